# /src/services/evaluation/metrics.py
"""
Метрики качества измерений: относительная ошибка позы за n интервалов,
дрейф интегрирования от горизонта и RMSE траектории счисления пути
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import numpy.typing as npt

from src.config import EvalConfig
from src.logger import setup_logger
from src.services.datasets.base import Dataset
from src.services.inertial.imu_model import ImuState
from src.services.inertial.preintegration import Scheme, integrate_batch, propagate_state
from src.services.inertial.so3_math import log_so3, quat_inv, quat_mul

logger = setup_logger(__name__)

Array = npt.NDArray[np.float64]

# Верхняя граница числа стартов на горизонт дрейфа
MAX_DRIFT_STARTS = 2000


class EvaluationError(Exception):
    """Данных недостаточно для метрики или параметры некорректны"""
    pass


@dataclass(frozen=True)
class DriftPoint:
    """RMSE позиции, ориентации и скорости на одном горизонте"""
    horizon: float
    n_steps: int
    pos_rmse: float
    rot_rmse: float
    vel_rmse: float
    n_starts: int


@dataclass
class EvalReport:
    """Метрики одной последовательности для одного вида измерений"""
    sequence: str
    method: str
    n_frames: int
    rel_trans_rmse: float
    rel_rot_rmse: float
    drift: List[DriftPoint] = field(default_factory=list)
    trajectory_rmse: float = 0.0
    reset_interval: Optional[float] = None


def _measurements(dataset: Dataset, measurements: Optional[npt.ArrayLike]) -> Array:
    if measurements is None:
        return dataset.imu.measurements
    values = np.asarray(measurements, dtype=np.float64)
    if values.shape != (len(dataset.imu), 6):
        raise EvaluationError(f"Измерения формы {values.shape}, ожидалось {(len(dataset.imu), 6)}")
    return values


def _check_aligned(dataset: Dataset) -> None:
    if not dataset.is_aligned or dataset.gt.v is None:
        raise EvaluationError("Метрики требуют выровненный ground truth со скоростями")


def _rmse(values: Array) -> float:
    return float(np.sqrt(np.mean(values * values))) if values.size else 0.0


def _propagate_from(dataset: Dataset, values: Array, starts: Array, n_steps: int,
                    scheme: Scheme) -> tuple[ImuState, ImuState]:
    """Распространяет состояния ground truth со стартов на n_steps интервалов"""
    index = starts[:, None] + np.arange(n_steps + 1)
    t = dataset.imu.t[index]
    window = values[index]
    delta, _ = integrate_batch(t, window[..., :3], window[..., 3:], scheme)[0]
    predicted = propagate_state(dataset.gt.state(starts), delta, dataset.meta.gravity)
    return predicted, dataset.gt.state(starts + n_steps)


def _errors(predicted: ImuState, reference: ImuState) -> tuple[Array, Array, Array]:
    pos = np.linalg.norm(predicted.p - reference.p, axis=-1)
    rot = np.linalg.norm(log_so3(quat_mul(quat_inv(reference.q), predicted.q)), axis=-1)
    vel = np.linalg.norm(predicted.v - reference.v, axis=-1)
    return pos, rot, vel


def relative_pose_rmse(dataset: Dataset,
                       measurements: Optional[npt.ArrayLike] = None,
                       n_frames: int = 10,
                       scheme: Scheme = "midpoint") -> tuple[float, float]:
    """
    RMSE относительной позы за n_frames интервалов IMU

    С каждого отсчета преинтегрируются n_frames интервалов измерений,
    состояние распространяется из ground truth на старте и сравнивается с
    ground truth на конце. Ошибка вращения |log(q_gt⁻¹ ⊗ q_pred)|.

    Args:
        dataset: Выровненный датасет
        measurements: Измерения [N, 6] (по умолчанию сырые из датасета)
        n_frames: Число интервалов
        scheme: Схема интегрирования

    Returns:
        (RMSE переноса, м; RMSE вращения, рад)

    Raises:
        EvaluationError: Если отсчетов меньше n_frames + 1
    """
    _check_aligned(dataset)
    values = _measurements(dataset, measurements)
    n = len(dataset.imu)
    if n_frames < 1 or n < n_frames + 1:
        raise EvaluationError(f"Для {n_frames} интервалов нужно не меньше {n_frames + 1} отсчетов, есть {n}")
    starts = np.arange(n - n_frames)
    predicted, reference = _propagate_from(dataset, values, starts, n_frames, scheme)
    pos, rot, _ = _errors(predicted, reference)
    return _rmse(pos), _rmse(rot)


def drift_curve(dataset: Dataset,
                measurements: Optional[npt.ArrayLike] = None,
                horizons: Sequence[float] = (0.1, 0.5, 1.0, 2.0),
                scheme: Scheme = "midpoint",
                max_starts: int = MAX_DRIFT_STARTS) -> List[DriftPoint]:
    """
    Ошибка интегрирования от длины горизонта

    Для каждого горизонта состояние распространяется из ground truth только
    по измерениям; старты равномерно прорежены до max_starts.

    Args:
        dataset: Выровненный датасет
        measurements: Измерения [N, 6]
        horizons: Горизонты, с
        scheme: Схема интегрирования
        max_starts: Максимум стартов на горизонт

    Returns:
        Список DriftPoint в порядке горизонтов

    Raises:
        EvaluationError: Если горизонт длиннее данных
    """
    _check_aligned(dataset)
    values = _measurements(dataset, measurements)
    n = len(dataset.imu)
    step = float(np.median(np.diff(dataset.imu.t))) if n > 1 else 0.0
    points = []
    for horizon in horizons:
        if horizon < 0.0:
            raise EvaluationError(f"Горизонт должен быть неотрицательным: {horizon}")
        n_steps = int(round(horizon / step)) if step > 0.0 else 0
        if n_steps >= n:
            raise EvaluationError(f"Горизонт {horizon} с длиннее данных ({dataset.duration:.2f} с)")
        if n_steps == 0:
            points.append(DriftPoint(horizon, 0, 0.0, 0.0, 0.0, n))
            continue
        starts = np.arange(n - n_steps)
        if len(starts) > max_starts:
            starts = np.unique(np.linspace(0, n - n_steps - 1, max_starts).round().astype(int))
        predicted, reference = _propagate_from(dataset, values, starts, n_steps, scheme)
        pos, rot, vel = _errors(predicted, reference)
        points.append(DriftPoint(horizon, n_steps, _rmse(pos), _rmse(rot), _rmse(vel), len(starts)))
    return points


def dead_reckon(dataset: Dataset,
                measurements: Optional[npt.ArrayLike] = None,
                reset_interval: Optional[float] = None,
                scheme: Scheme = "midpoint") -> ImuState:
    """
    Счисление пути от первого состояния ground truth

    При reset_interval состояние периодически заменяется ground truth
    (имитация внешних коррекций).

    Args:
        dataset: Выровненный датасет
        measurements: Измерения [N, 6]
        reset_interval: Период переякоривания, с
        scheme: Схема интегрирования

    Returns:
        ImuState с полями [N, k] на всех метках IMU
    """
    _check_aligned(dataset)
    values = _measurements(dataset, measurements)
    n = len(dataset.imu)
    t = dataset.imu.t
    state = dataset.gt.state(0)
    q, p, v = np.empty((n, 4)), np.empty((n, 3)), np.empty((n, 3))
    q[0], p[0], v[0] = state.q, state.p, state.v
    if n < 2:
        return ImuState(q=q, p=p, v=v, bg=np.zeros((n, 3)), ba=np.zeros((n, 3)))

    steps, _ = integrate_batch(np.stack([t[:-1], t[1:]], axis=1),
                               np.stack([values[:-1, :3], values[1:, :3]], axis=1),
                               np.stack([values[:-1, 3:], values[1:, 3:]], axis=1), scheme)[0]
    gravity = dataset.meta.gravity
    anchor_time = t[0]
    for k in range(n - 1):
        if reset_interval is not None and t[k] - anchor_time >= reset_interval:
            state = dataset.gt.state(k)
            anchor_time = t[k]
        state = propagate_state(state, steps[k], gravity)
        q[k + 1], p[k + 1], v[k + 1] = state.q, state.p, state.v
    return ImuState(q=q, p=p, v=v, bg=np.zeros((n, 3)), ba=np.zeros((n, 3)))


def trajectory_rmse(dataset: Dataset,
                    measurements: Optional[npt.ArrayLike] = None,
                    reset_interval: Optional[float] = None,
                    scheme: Scheme = "midpoint") -> float:
    """
    RMSE позиции при счислении пути (dead_reckon) по всем меткам, м
    """
    states = dead_reckon(dataset, measurements, reset_interval, scheme)
    errors = np.linalg.norm(states.p - dataset.gt.p, axis=-1)
    return _rmse(errors)


def evaluate(dataset: Dataset,
             measurements: Optional[npt.ArrayLike],
             method: str,
             config: EvalConfig,
             scheme: Scheme = "midpoint") -> EvalReport:
    """
    Полный набор метрик для одной последовательности

    Args:
        dataset: Выровненный датасет
        measurements: Измерения [N, 6] (None - сырые)
        method: Тег "raw" или "refined"
        config: Настройки оценки
        scheme: Схема интегрирования

    Returns:
        EvalReport
    """
    trans, rot = relative_pose_rmse(dataset, measurements, config.n_frames, scheme)
    drift = drift_curve(dataset, measurements, config.horizons, scheme)
    traj = trajectory_rmse(dataset, measurements, config.reset_interval, scheme)
    logger.info(f"📏 {dataset.meta.name} [{method}]: rel_trans={trans:.6f} m, rel_rot={rot:.6f} rad, "
                f"traj={traj:.4f} m")
    return EvalReport(sequence=dataset.meta.name, method=method, n_frames=config.n_frames,
                      rel_trans_rmse=trans, rel_rot_rmse=rot, drift=drift, trajectory_rmse=traj,
                      reset_interval=config.reset_interval)


def average_report(reports: Sequence[EvalReport], method: str) -> EvalReport:
    """
    Строка "average": среднее метрик по последовательностям одного метода

    Raises:
        EvaluationError: Если отчетов метода нет или горизонты различаются
    """
    selected = [r for r in reports if r.method == method]
    if not selected:
        raise EvaluationError(f"Нет отчетов для метода {method}")
    horizons = [[p.horizon for p in r.drift] for r in selected]
    if any(h != horizons[0] for h in horizons):
        raise EvaluationError("Горизонты дрейфа различаются между отчетами")

    drift = [
        DriftPoint(
            horizon=points[0].horizon,
            n_steps=points[0].n_steps,
            pos_rmse=float(np.mean([p.pos_rmse for p in points])),
            rot_rmse=float(np.mean([p.rot_rmse for p in points])),
            vel_rmse=float(np.mean([p.vel_rmse for p in points])),
            n_starts=int(sum(p.n_starts for p in points)),
        )
        for points in zip(*[r.drift for r in selected])
    ]
    return EvalReport(
        sequence="average",
        method=method,
        n_frames=selected[0].n_frames,
        rel_trans_rmse=float(np.mean([r.rel_trans_rmse for r in selected])),
        rel_rot_rmse=float(np.mean([r.rel_rot_rmse for r in selected])),
        drift=drift,
        trajectory_rmse=float(np.mean([r.trajectory_rmse for r in selected])),
        reset_interval=selected[0].reset_interval,
    )
