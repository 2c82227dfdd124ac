# /src/services/datasets/base.py
"""
Типы датасетов, исключения и реестр источников данных
"""

from abc import ABC, ABCMeta, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Any, ClassVar, Dict, Optional, Type

import numpy as np
import numpy.typing as npt

from src.config import GravityModel, ImuIntrinsics
from src.services.inertial.imu_model import ImuSequence, ImuState
from src.services.inertial.so3_math import quat_normalize


class DatasetError(Exception):
    """Базовое исключение для ошибок данных"""
    pass


class DatasetFormatError(DatasetError):
    """Некорректная строка во входном файле"""
    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.path = path
        self.line_number = line_number

    def __str__(self) -> str:
        return f"DatasetFormatError: {self.message} (file: {self.path}, line: {self.line_number})"


class EmptyOverlapError(DatasetError):
    """Ground truth и IMU не пересекаются по времени"""
    pass


class InsufficientDataError(DatasetError):
    """Данных меньше, чем требуется операции"""
    pass


@dataclass(frozen=True)
class GroundTruth:
    """
    Ground truth: t [M] c, q [M, 4] (^G_I q), p [M, 3] м, v [M, 3] м/с или None
    """
    t: npt.NDArray[np.float64]
    q: npt.NDArray[np.float64]
    p: npt.NDArray[np.float64]
    v: Optional[npt.NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        q = quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(-1, 4))
        p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        v = None if self.v is None else np.asarray(self.v, dtype=np.float64).reshape(-1, 3)
        if not (len(t) == len(q) == len(p)) or (v is not None and len(v) != len(t)):
            raise DatasetError(
                f"Длины ground truth не совпадают: t={len(t)}, q={len(q)}, p={len(p)}, "
                f"v={None if v is None else len(v)}"
            )
        if len(t) > 1 and not np.all(np.diff(t) > 0.0):
            raise DatasetError("Временные метки ground truth должны строго возрастать")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def has_velocity(self) -> bool:
        return self.v is not None

    def slice(self, start: int, stop: int) -> "GroundTruth":
        """Подпоследовательность [start, stop)"""
        return GroundTruth(self.t[start:stop].copy(), self.q[start:stop].copy(), self.p[start:stop].copy(),
                           None if self.v is None else self.v[start:stop].copy())

    def state(self, index: Any) -> ImuState:
        """
        Состояние ImuState по индексу (или массиву индексов)

        Raises:
            DatasetError: Если скорость отсутствует
        """
        if self.v is None:
            raise DatasetError("В ground truth нет скоростей, сначала вызовите derive_velocity")
        q = self.q[index]
        return ImuState(q=q, v=self.v[index], p=self.p[index],
                        bg=np.zeros_like(self.p[index]), ba=np.zeros_like(self.p[index]))


@dataclass(frozen=True)
class DatasetMeta:
    """Метаданные последовательности"""
    name: str = "sequence"
    source: str = "unknown"
    gravity: GravityModel = field(default_factory=GravityModel)
    noise: ImuIntrinsics = field(default_factory=ImuIntrinsics)
    imu_rate: Optional[float] = None
    gt_rate: Optional[float] = None
    time_origin_ns: int = 0


@dataclass(frozen=True)
class Dataset:
    """
    Последовательность IMU с ground truth

    Время хранится в секундах относительно time_origin_ns.
    """
    imu: ImuSequence
    gt: GroundTruth
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    @property
    def is_aligned(self) -> bool:
        """Ground truth задан на тех же метках, что и IMU"""
        return len(self.gt) == len(self.imu) and bool(np.array_equal(self.gt.t, self.imu.t))

    @property
    def duration(self) -> float:
        return float(self.imu.t[-1] - self.imu.t[0]) if len(self.imu) else 0.0

    def median_rate(self) -> float:
        """Медианная частота IMU, Гц"""
        if len(self.imu) < 2:
            raise InsufficientDataError("Для оценки частоты нужно хотя бы 2 отсчета")
        return float(1.0 / np.median(np.diff(self.imu.t)))

    def slice(self, start: int, stop: int, name: Optional[str] = None) -> "Dataset":
        """
        Подпоследовательность выровненного датасета [start, stop)

        Raises:
            DatasetError: Если датасет не выровнен
        """
        if not self.is_aligned:
            raise DatasetError("Срез по индексам допустим только для выровненного датасета")
        meta = self.meta if name is None else replace(self.meta, name=name)
        return Dataset(self.imu.slice(start, stop), self.gt.slice(start, stop), meta)

    def with_measurements(self, measurements: npt.NDArray[np.float64], name: Optional[str] = None) -> "Dataset":
        """Тот же датасет с заменой измерений [N, 6]"""
        meta = self.meta if name is None else replace(self.meta, name=name)
        return Dataset(self.imu.with_measurements(measurements), self.gt, meta)


class DatasetSourceRegistry:
    """Реестр для автоматической регистрации источников данных"""
    _sources: Dict[str, Type['BaseDatasetSource']] = {}

    @classmethod
    def register(cls, source_name: str, source_class: Type['BaseDatasetSource']) -> None:
        """Регистрирует класс источника"""
        cls._sources[source_name] = source_class

    @classmethod
    def get_source_class(cls, source_name: str) -> Optional[Type['BaseDatasetSource']]:
        """Получает класс источника по имени"""
        return cls._sources.get(source_name)

    @classmethod
    def get_available_sources(cls) -> list[str]:
        """Возвращает список доступных источников"""
        return list(cls._sources.keys())


class DatasetSourceMeta(ABCMeta):
    """Метакласс для автоматической регистрации источников, наследующий от ABCMeta"""
    def __new__(mcs, name: str, bases: tuple, namespace: dict, **kwargs: Any) -> Type:
        cls = super().__new__(mcs, name, bases, namespace)

        # Регистрируем только конкретные источники (не базовый класс)
        if bases and getattr(cls, 'SOURCE_NAME', ""):
            DatasetSourceRegistry.register(cls.SOURCE_NAME, cls)  # type: ignore

        return cls


class BaseDatasetSource(ABC, metaclass=DatasetSourceMeta):
    """Базовый класс источника данных"""

    # Имя совпадает с ключом секции data в конфигурации
    SOURCE_NAME: ClassVar[str] = ""

    def __init__(self, settings: Any):
        """
        Args:
            settings: Секция конфигурации источника
        """
        self.settings = settings

    @abstractmethod
    def load(self) -> Dataset:
        """Загружает последовательность (без выравнивания)"""
        ...

    @classmethod
    def create_from_config(cls, settings: Any) -> 'BaseDatasetSource':
        """Создает источник из секции конфигурации"""
        return cls(settings)
