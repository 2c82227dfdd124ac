# /src/services/datasets/alignment.py
"""
Выравнивание ground truth по меткам IMU и оценка скорости по позициям
"""

from typing import Optional

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.spatial.transform import Rotation, Slerp

from src.logger import setup_logger
from src.services.datasets.base import Dataset, EmptyOverlapError, GroundTruth, InsufficientDataError

logger = setup_logger(__name__)

# Относительный разброс шагов, при котором сетка считается равномерной
UNIFORM_TOLERANCE = 1e-6


def _uniform_step(t: npt.NDArray[np.float64]) -> Optional[float]:
    steps = np.diff(t)
    step = float(np.mean(steps))
    if np.max(np.abs(steps - step)) <= UNIFORM_TOLERANCE * step:
        return step
    return None


def derive_velocity(t: npt.ArrayLike, positions: npt.ArrayLike, smoothing: int = 0) -> npt.NDArray[np.float64]:
    """
    Скорость по позициям конечными разностями

    На равномерной сетке (от 5 точек) используется центральный шаблон
    четвертого порядка с односторонними шаблонами того же порядка на краях,
    иначе центральные разности второго порядка (np.gradient).

    Args:
        t: Метки времени [M]
        positions: Позиции [M, 3]
        smoothing: Окно скользящего среднего, отсчеты (0 - без сглаживания)

    Returns:
        Скорости [M, 3]

    Raises:
        InsufficientDataError: Если поз меньше трех
    """
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(positions, dtype=np.float64)
    if len(t) < 3:
        raise InsufficientDataError(f"Для оценки скорости нужно не меньше 3 поз, получено {len(t)}")

    step = _uniform_step(t) if len(t) >= 5 else None
    if step is None:
        v = np.gradient(p, t, axis=0, edge_order=2)
    else:
        v = np.empty_like(p)
        v[2:-2] = (p[:-4] - 8.0 * p[1:-3] + 8.0 * p[3:-1] - p[4:]) / (12.0 * step)
        v[0] = (-25.0 * p[0] + 48.0 * p[1] - 36.0 * p[2] + 16.0 * p[3] - 3.0 * p[4]) / (12.0 * step)
        v[1] = (-3.0 * p[0] - 10.0 * p[1] + 18.0 * p[2] - 6.0 * p[3] + p[4]) / (12.0 * step)
        v[-2] = (3.0 * p[-1] + 10.0 * p[-2] - 18.0 * p[-3] + 6.0 * p[-4] - p[-5]) / (12.0 * step)
        v[-1] = (25.0 * p[-1] - 48.0 * p[-2] + 36.0 * p[-3] - 16.0 * p[-4] + 3.0 * p[-5]) / (12.0 * step)

    if smoothing and smoothing > 1:
        v = pd.DataFrame(v).rolling(window=smoothing, center=True, min_periods=1).mean().to_numpy()
    return v


def _to_scipy(q: npt.NDArray[np.float64]) -> Rotation:
    # Rotation ждет скаляр последним
    return Rotation.from_quat(q[:, [1, 2, 3, 0]])


def _from_scipy(rotation: Rotation) -> npt.NDArray[np.float64]:
    xyzw = rotation.as_quat()
    return xyzw[..., [3, 0, 1, 2]]


def align_ground_truth(dataset: Dataset, velocity_smoothing: int = 0) -> Dataset:
    """
    Пересэмплирует ground truth на метки IMU

    Позиция и скорость интерполируются линейно, ориентация - slerp по
    кратчайшей дуге. Отсчеты IMU вне интервала ground truth отбрасываются.
    Если скоростей нет, они сначала оцениваются derive_velocity.

    Args:
        dataset: Датасет
        velocity_smoothing: Окно сглаживания оценки скорости

    Returns:
        Выровненный датасет

    Raises:
        EmptyOverlapError: Если интервалы IMU и ground truth не пересекаются
    """
    gt = dataset.gt
    if dataset.is_aligned and gt.has_velocity:
        return dataset

    if len(gt) == 0:
        raise EmptyOverlapError("Ground truth пуст")
    inside = (dataset.imu.t >= gt.t[0]) & (dataset.imu.t <= gt.t[-1])
    if not np.any(inside):
        raise EmptyOverlapError(
            f"IMU [{dataset.imu.t[0]:.3f}, {dataset.imu.t[-1]:.3f}] c и ground truth "
            f"[{gt.t[0]:.3f}, {gt.t[-1]:.3f}] c не пересекаются"
        )
    first, last = int(np.argmax(inside)), int(len(inside) - np.argmax(inside[::-1]))
    dropped = len(dataset.imu) - (last - first)
    if dropped:
        logger.info(f"✂️ Dropped {dropped} IMU samples outside ground-truth span")
    imu = dataset.imu.slice(first, last)

    v = gt.v if gt.v is not None else derive_velocity(gt.t, gt.p, velocity_smoothing)

    if len(gt) == 1:
        q = np.repeat(gt.q, len(imu), axis=0)
        p = np.repeat(gt.p, len(imu), axis=0)
        vel = np.repeat(v, len(imu), axis=0)
    else:
        p = np.stack([np.interp(imu.t, gt.t, gt.p[:, k]) for k in range(3)], axis=1)
        vel = np.stack([np.interp(imu.t, gt.t, v[:, k]) for k in range(3)], axis=1)
        q = _from_scipy(Slerp(gt.t, _to_scipy(gt.q))(imu.t))
        # На совпадающих метках берем исходные значения без пересчета
        exact = np.searchsorted(gt.t, imu.t)
        exact = np.clip(exact, 0, len(gt) - 1)
        hit = gt.t[exact] == imu.t
        q[hit] = gt.q[exact[hit]]
        p[hit] = gt.p[exact[hit]]
        vel[hit] = v[exact[hit]]

    aligned = GroundTruth(t=imu.t.copy(), q=q, p=p, v=vel)
    return Dataset(imu=imu, gt=aligned, meta=dataset.meta)
