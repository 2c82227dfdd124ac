# src/services/datasets/__init__.py

# Импорт источников для их регистрации через метакласс
from .base import BaseDatasetSource, Dataset, DatasetError, DatasetSourceRegistry
from .simulator import SimulationSource
from .euroc import EurocCsvSource

__all__ = [
    'BaseDatasetSource',
    'Dataset',
    'DatasetError',
    'DatasetSourceRegistry',
    'SimulationSource',
    'EurocCsvSource',
]
