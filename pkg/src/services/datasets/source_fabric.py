# src/services/datasets/source_fabric.py

from src.config import DataConfig
from src.logger import setup_logger
from src.services.datasets.alignment import align_ground_truth
from src.services.datasets.base import BaseDatasetSource, Dataset, DatasetError, DatasetSourceRegistry

logger = setup_logger(__name__)


class DatasetSourceFactory:
    """Фабрика источников данных с автоматической регистрацией"""

    @classmethod
    def create_source_from_config(cls, data: DataConfig) -> BaseDatasetSource:
        """
        Создает источник по секции data конфигурации

        Args:
            data: Секция data (ровно один источник)

        Returns:
            Экземпляр источника

        Raises:
            DatasetError: Если источник не зарегистрирован
        """
        name = data.source_name
        source_class = DatasetSourceRegistry.get_source_class(name)
        if source_class is None:
            available = ", ".join(DatasetSourceRegistry.get_available_sources())
            raise DatasetError(f"Unsupported data source: {name}. Available sources: {available}")
        return source_class.create_from_config(getattr(data, name))

    @classmethod
    def get_available_sources(cls) -> list[str]:
        """Возвращает список доступных источников"""
        return DatasetSourceRegistry.get_available_sources()


def load_dataset(data: DataConfig) -> Dataset:
    """
    Загружает и выравнивает датасет из конфигурации

    Args:
        data: Секция data

    Returns:
        Выровненный Dataset со скоростями в ground truth
    """
    source = DatasetSourceFactory.create_source_from_config(data)
    dataset = source.load()
    smoothing = data.euroc.velocity_smoothing if data.euroc is not None else 0
    aligned = align_ground_truth(dataset, velocity_smoothing=smoothing)
    logger.info(f"✅ Dataset '{aligned.meta.name}' ready: {len(aligned.imu)} aligned samples "
                f"({aligned.duration:.1f} s)")
    return aligned
