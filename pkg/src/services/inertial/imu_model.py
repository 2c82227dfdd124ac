# /src/services/inertial/imu_model.py
"""
Типы измерений и состояния IMU, модель смещение + шум для симуляции
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from src.config import GravityModel, ImuIntrinsics
from src.services.inertial.so3_math import IDENTITY_QUAT, Quaternion, quat_normalize, quat_to_rot


class ImuModelError(Exception):
    """Исключение для ошибок модели измерений IMU"""
    pass


class NonMonotonicTimestampsError(ImuModelError):
    """Временные метки не возрастают строго"""
    pass


@dataclass(frozen=True)
class ImuSample:
    """Один отсчет IMU: время, угловая скорость и удельная сила в {I}"""
    t: float
    omega: npt.NDArray[np.float64]
    accel: npt.NDArray[np.float64]


@dataclass(frozen=True)
class ImuState:
    """Состояние IMU: ориентация ^G_I q, смещения, скорость и позиция в {G}"""
    q: Quaternion = field(default_factory=lambda: IDENTITY_QUAT.copy())
    bg: npt.NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    v: npt.NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    ba: npt.NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    p: npt.NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", quat_normalize(self.q))
        for name in ("bg", "v", "ba", "p"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))


@dataclass(frozen=True)
class BiasState:
    """Текущие смещения гироскопа и акселерометра (принадлежат вызывающему)"""
    bg: npt.NDArray[np.float64]
    ba: npt.NDArray[np.float64]

    @classmethod
    def from_intrinsics(cls, intrinsics: ImuIntrinsics) -> "BiasState":
        """Начальные смещения из параметров модели"""
        return cls(np.array(intrinsics.initial_bg, dtype=np.float64),
                   np.array(intrinsics.initial_ba, dtype=np.float64))


@dataclass(frozen=True)
class ImuSequence:
    """
    Последовательность отсчетов IMU в виде массивов

    t: [N] секунды, omega: [N, 3] рад/с, accel: [N, 3] м/с²
    """
    t: npt.NDArray[np.float64]
    omega: npt.NDArray[np.float64]
    accel: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        omega = np.asarray(self.omega, dtype=np.float64).reshape(-1, 3)
        accel = np.asarray(self.accel, dtype=np.float64).reshape(-1, 3)
        if not (len(t) == len(omega) == len(accel)):
            raise ImuModelError(
                f"Длины не совпадают: t={len(t)}, omega={len(omega)}, accel={len(accel)}"
            )
        if len(t) > 1 and not np.all(np.diff(t) > 0.0):
            raise NonMonotonicTimestampsError("Временные метки должны строго возрастать")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(omega)) and np.all(np.isfinite(accel))):
            raise ImuModelError("Измерения содержат нечисловые значения")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "accel", accel)

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuSequence":
        """Собирает последовательность из списка ImuSample"""
        return cls(
            t=np.array([s.t for s in samples], dtype=np.float64),
            omega=np.array([s.omega for s in samples], dtype=np.float64).reshape(-1, 3),
            accel=np.array([s.accel for s in samples], dtype=np.float64).reshape(-1, 3),
        )

    def to_samples(self) -> List[ImuSample]:
        """Разворачивает в список ImuSample"""
        return [ImuSample(float(t), w.copy(), a.copy()) for t, w, a in zip(self.t, self.omega, self.accel)]

    def slice(self, start: int, stop: int) -> "ImuSequence":
        """Подпоследовательность [start, stop)"""
        return ImuSequence(self.t[start:stop].copy(), self.omega[start:stop].copy(), self.accel[start:stop].copy())

    @property
    def measurements(self) -> npt.NDArray[np.float64]:
        """Измерения одним массивом [N, 6] = (ω, a)"""
        return np.concatenate([self.omega, self.accel], axis=1)

    def with_measurements(self, measurements: npt.NDArray[np.float64]) -> "ImuSequence":
        """Та же временная сетка с новыми измерениями [N, 6]"""
        measurements = np.asarray(measurements, dtype=np.float64)
        return ImuSequence(self.t.copy(), measurements[:, :3].copy(), measurements[:, 3:6].copy())


def corrupt(true_omega: npt.ArrayLike,
            true_accel: npt.ArrayLike,
            intrinsics: ImuIntrinsics,
            rng: np.random.Generator,
            bias_state: BiasState,
            dt: float,
            t: float = 0.0) -> Tuple[ImuSample, BiasState]:
    """
    Линейная модель измерений: ω_m = ω + b_g + n_g, a_m = a + b_a + n_a

    Белый шум имеет СКО σ/√dt, смещение затем продвигается случайным
    блужданием с СКО σ_walk·√dt. Матрицы перекоса (если заданы) применяются
    к истинным значениям до смещения и шума.

    Args:
        true_omega: Истинная угловая скорость в {I}, рад/с
        true_accel: Истинная удельная сила в {I}, м/с²
        intrinsics: Параметры модели
        rng: Генератор случайных чисел (один поток на последовательность)
        bias_state: Текущие смещения
        dt: Шаг дискретизации, с
        t: Метка времени отсчета, с

    Returns:
        (ImuSample, обновленные смещения)

    Raises:
        ImuModelError: Если dt <= 0
    """
    if not dt > 0.0:
        raise ImuModelError(f"Шаг дискретизации должен быть положительным, получено dt={dt}")

    omega = np.asarray(true_omega, dtype=np.float64)
    accel = np.asarray(true_accel, dtype=np.float64)
    if intrinsics.gyro_misalignment is not None:
        omega = np.asarray(intrinsics.gyro_misalignment, dtype=np.float64) @ omega
    if intrinsics.accel_misalignment is not None:
        accel = np.asarray(intrinsics.accel_misalignment, dtype=np.float64) @ accel

    draws = rng.standard_normal(12)
    sqrt_dt = np.sqrt(dt)
    omega_m = omega + bias_state.bg + draws[0:3] * (intrinsics.sigma_g / sqrt_dt)
    accel_m = accel + bias_state.ba + draws[3:6] * (intrinsics.sigma_a / sqrt_dt)

    next_bias = BiasState(
        bg=bias_state.bg + draws[6:9] * (intrinsics.sigma_bg_walk * sqrt_dt),
        ba=bias_state.ba + draws[9:12] * (intrinsics.sigma_ba_walk * sqrt_dt),
    )
    return ImuSample(t=t, omega=omega_m, accel=accel_m), next_bias


def corrupt_sequence(t: npt.NDArray[np.float64],
                     true_omega: npt.NDArray[np.float64],
                     true_accel: npt.NDArray[np.float64],
                     intrinsics: ImuIntrinsics,
                     rng: np.random.Generator) -> Tuple[ImuSequence, npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """
    Применяет corrupt ко всей последовательности

    Args:
        t: Метки времени [N]
        true_omega: Истинные угловые скорости [N, 3]
        true_accel: Истинные удельные силы [N, 3]
        intrinsics: Параметры модели
        rng: Генератор случайных чисел

    Returns:
        (измерения, истинные смещения гироскопа [N, 3], истинные смещения акселерометра [N, 3])
    """
    n = len(t)
    bias = BiasState.from_intrinsics(intrinsics)
    omega_m = np.empty((n, 3))
    accel_m = np.empty((n, 3))
    bg_hist = np.empty((n, 3))
    ba_hist = np.empty((n, 3))
    for i in range(n):
        # Для последнего отсчета шаг берем у предыдущего интервала
        dt = t[i + 1] - t[i] if i + 1 < n else t[i] - t[i - 1] if n > 1 else 1.0
        bg_hist[i] = bias.bg
        ba_hist[i] = bias.ba
        sample, bias = corrupt(true_omega[i], true_accel[i], intrinsics, rng, bias, float(dt), float(t[i]))
        omega_m[i] = sample.omega
        accel_m[i] = sample.accel
    return ImuSequence(t, omega_m, accel_m), bg_hist, ba_hist


def true_body_accel(q: npt.ArrayLike,
                    global_accel: npt.ArrayLike,
                    gravity: Optional[GravityModel] = None) -> npt.NDArray[np.float64]:
    """
    Удельная сила в {I}: ^I a = ^I_G R (^G a - ^G g)

    Args:
        q: Ориентация ^G_I q [..., 4]
        global_accel: Ускорение в {G} [..., 3]
        gravity: Модель гравитации (по умолчанию [0, 0, -9.8])

    Returns:
        Удельная сила [..., 3]
    """
    g = np.asarray((gravity or GravityModel()).g, dtype=np.float64)
    rotation = quat_to_rot(q)
    specific = np.asarray(global_accel, dtype=np.float64) - g
    return np.einsum("...ji,...j->...i", rotation, specific)
