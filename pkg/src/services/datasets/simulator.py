# /src/services/datasets/simulator.py
"""
Синтетические траектории: суммы синусоид для позиции и вектора вращения
с аналитическими производными, измерения через модель смещение + шум
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt

from src.config import SinusoidTerm, TrajectorySpec
from src.logger import setup_logger
from src.services.datasets.base import BaseDatasetSource, Dataset, DatasetMeta, GroundTruth
from src.services.inertial.imu_model import corrupt_sequence, true_body_accel
from src.services.inertial.so3_math import exp_so3, right_jacobian

logger = setup_logger(__name__)

Array = npt.NDArray[np.float64]


@dataclass(frozen=True)
class TrajectorySamples:
    """Аналитическое состояние траектории на заданных метках"""
    t: Array
    q: Array
    p: Array
    v: Array
    a: Array
    omega: Array


@dataclass(frozen=True)
class SimulationResult:
    """Датасет плюс скрытые истинные величины (измерения без шума и смещения)"""
    dataset: Dataset
    true_omega: Array
    true_accel: Array
    true_bg: Array
    true_ba: Array


def _sinusoids(terms: Sequence[SinusoidTerm], t: Array) -> tuple[Array, Array, Array]:
    """Значение, первая и вторая производные суммы гармоник [N, 3]"""
    value = np.zeros((len(t), 3))
    first = np.zeros((len(t), 3))
    second = np.zeros((len(t), 3))
    for term in terms:
        amplitude = np.asarray(term.amplitude)
        omega = 2.0 * np.pi * np.asarray(term.frequency)
        arg = t[:, None] * omega + np.asarray(term.phase)
        value += amplitude * np.sin(arg)
        first += amplitude * omega * np.cos(arg)
        second -= amplitude * omega * omega * np.sin(arg)
    return value, first, second


def evaluate_trajectory(spec: TrajectorySpec, t: npt.ArrayLike) -> TrajectorySamples:
    """
    Аналитическая траектория на метках t

    q(t) = Exp(r(t)), ^I ω = Jr(r)·ṙ; позиция, скорость и ускорение в {G}
    дифференцируются в замкнутой форме.

    Args:
        spec: Описание траектории
        t: Метки времени, с

    Returns:
        TrajectorySamples
    """
    t = np.asarray(t, dtype=np.float64)
    p, v, a = _sinusoids(spec.position_terms, t)
    r, r_dot, _ = _sinusoids(spec.attitude_terms, t)
    q = exp_so3(r)
    omega = np.einsum("nij,nj->ni", right_jacobian(r), r_dot)
    return TrajectorySamples(t=t, q=q, p=p, v=v, a=a, omega=omega)


def _grid(duration: float, rate: float) -> Array:
    count = int(np.floor(duration * rate + 1e-9)) + 1
    return np.arange(count, dtype=np.float64) / rate


def simulate(spec: TrajectorySpec, name: str = "simulation") -> SimulationResult:
    """
    Генерирует последовательность по TrajectorySpec

    Ground truth хранится без шума (на частоте gt_rate, по умолчанию на
    метках IMU), измерения получены через true_body_accel и corrupt.

    Args:
        spec: Описание траектории и модели IMU
        name: Имя последовательности

    Returns:
        SimulationResult
    """
    t_imu = _grid(spec.duration, spec.imu_rate)
    truth = evaluate_trajectory(spec, t_imu)
    accel = true_body_accel(truth.q, truth.a, spec.gravity)

    rng = np.random.default_rng(spec.seed)
    imu, bg_hist, ba_hist = corrupt_sequence(t_imu, truth.omega, accel, spec.intrinsics, rng)

    gt_rate = spec.gt_rate or spec.imu_rate
    gt_truth = truth if spec.gt_rate is None else evaluate_trajectory(spec, _grid(spec.duration, gt_rate))
    gt = GroundTruth(t=gt_truth.t, q=gt_truth.q, p=gt_truth.p, v=gt_truth.v)

    meta = DatasetMeta(name=name, source="simulation", gravity=spec.gravity, noise=spec.intrinsics,
                       imu_rate=spec.imu_rate, gt_rate=gt_rate)
    logger.info(f"🛰️ Simulated '{name}': {len(imu)} IMU samples, {len(gt)} gt poses, seed={spec.seed}")
    return SimulationResult(dataset=Dataset(imu=imu, gt=gt, meta=meta),
                            true_omega=truth.omega, true_accel=accel, true_bg=bg_hist, true_ba=ba_hist)


class SimulationSource(BaseDatasetSource):
    """Источник данных из TrajectorySpec"""

    SOURCE_NAME = "simulation"

    def load(self) -> Dataset:
        return simulate(self.settings).dataset
