# /src/services/inertial/preintegration.py
"""
Преинтеграция окна измерений IMU: Δq, Δβ, Δγ, распространение состояния,
вывод обучающих целей из ground truth и аналитические якобианы.

Члены Δq, Δβ, Δγ зависят только от измерений окна: ни ориентация, ни
скорость, ни позиция, ни гравитация здесь не читаются.
"""

import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from src.config import GravityModel
from src.services.inertial.imu_model import ImuSample, ImuSequence, ImuState, NonMonotonicTimestampsError
from src.services.inertial.so3_math import (
    Quaternion,
    exp_so3,
    quat_inv,
    quat_mul,
    quat_to_rot,
    right_jacobian,
    skew,
)

Scheme = Literal["euler", "midpoint"]
SCHEMES: Tuple[str, ...] = ("euler", "midpoint")


class PreintegrationError(Exception):
    """Базовое исключение для ошибок преинтеграции"""
    pass


class WindowTooShortError(PreintegrationError):
    """Окно (или префикс окна) содержит меньше двух отсчетов"""
    pass


@dataclass(frozen=True)
class PreintegrationDelta:
    """
    Наблюдаемая сводка окна: (Δq, Δβ, Δγ, Δt)

    Поля могут иметь ведущую батч-ось.
    """
    dq: Quaternion
    dbeta: npt.NDArray[np.float64]
    dgamma: npt.NDArray[np.float64]
    dt_total: Union[float, npt.NDArray[np.float64]]
    n_samples: int

    def __getitem__(self, index: int) -> "PreintegrationDelta":
        """Элемент батча"""
        dt_total = self.dt_total[index] if np.ndim(self.dt_total) else self.dt_total
        return PreintegrationDelta(self.dq[index], self.dbeta[index], self.dgamma[index],
                                   float(dt_total), self.n_samples)


@dataclass(frozen=True)
class PreintJacobians:
    """
    Якобианы дельт по каждому отсчету окна, [..., N, 3, 3]

    Вращение дифференцируется через правое возмущение:
    Δq(ω + h) = Δq(ω) ⊗ Exp(d_theta_d_omega[i] · h).
    """
    d_theta_d_omega: npt.NDArray[np.float64]
    d_beta_d_omega: npt.NDArray[np.float64]
    d_beta_d_accel: npt.NDArray[np.float64]
    d_gamma_d_omega: npt.NDArray[np.float64]
    d_gamma_d_accel: npt.NDArray[np.float64]

    def __getitem__(self, index: int) -> "PreintJacobians":
        """Элемент батча"""
        return PreintJacobians(self.d_theta_d_omega[index], self.d_beta_d_omega[index],
                               self.d_beta_d_accel[index], self.d_gamma_d_omega[index],
                               self.d_gamma_d_accel[index])


def _rotate(rotation: npt.NDArray[np.float64], v: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """R·v поэлементно (результат не зависит от размера батча)"""
    return (rotation[..., :, 0] * v[..., 0:1]
            + rotation[..., :, 1] * v[..., 1:2]
            + rotation[..., :, 2] * v[..., 2:3])


def _as_arrays(window: Union[ImuSequence, Sequence[ImuSample]]) -> ImuSequence:
    if isinstance(window, ImuSequence):
        return window
    return ImuSequence.from_samples(list(window))


def _check_batch(t: npt.NDArray[np.float64]) -> None:
    if t.shape[-1] < 2:
        raise WindowTooShortError(f"Окно должно содержать не меньше 2 отсчетов, получено {t.shape[-1]}")
    if not np.all(np.diff(t, axis=-1) > 0.0):
        raise NonMonotonicTimestampsError("Временные метки окна должны строго возрастать")


def prefix_lengths(n_samples: int, fractions: Sequence[float]) -> List[int]:
    """
    Длины префиксов ⌈f·N⌉ для долей окна

    Args:
        n_samples: Длина окна N
        fractions: Возрастающие доли из (0, 1]

    Returns:
        Список длин префиксов

    Raises:
        PreintegrationError: Если доли не возрастают или вне (0, 1]
        WindowTooShortError: Если какой-то префикс короче 2 отсчетов
    """
    if not fractions:
        raise PreintegrationError("Список долей пуст")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise PreintegrationError(f"Доли должны лежать в (0, 1]: {list(fractions)}")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise PreintegrationError(f"Доли должны строго возрастать: {list(fractions)}")
    lengths = [min(n_samples, int(math.ceil(f * n_samples - 1e-9))) for f in fractions]
    if lengths[0] < 2:
        raise WindowTooShortError(
            f"Префикс доли {fractions[0]} окна из {n_samples} отсчетов содержит меньше 2 отсчетов"
        )
    return lengths


def integrate_batch(t: npt.NDArray[np.float64],
                    omega: npt.NDArray[np.float64],
                    accel: npt.NDArray[np.float64],
                    scheme: Scheme = "midpoint",
                    stops: Optional[Sequence[int]] = None,
                    with_jacobians: bool = False) -> List[Tuple[PreintegrationDelta, Optional[PreintJacobians]]]:
    """
    Дискретная преинтеграция батча окон одинаковой длины

    Схемы:
        euler    - ω_k и R_k·a_k на шаге [t_k, t_k+1]
        midpoint - средняя скорость ½(ω_k + ω_k+1), трапеция ½(R_k·a_k + R_k+1·a_k+1)
    Двойной интеграл накапливается одновременно: Δγ += Δβ·dt + ½·ā·dt², затем Δβ += ā·dt.
    Якобианы накапливаются прямым проходом вместе с интегрированием.

    Args:
        t: Метки времени [B, N]
        omega: Угловые скорости [B, N, 3]
        accel: Удельные силы [B, N, 3]
        scheme: Схема интегрирования
        stops: Длины префиксов для снимков (по умолчанию только N)
        with_jacobians: Считать якобианы

    Returns:
        Список (дельта, якобианы или None) для каждой длины из stops
    """
    if scheme not in SCHEMES:
        raise PreintegrationError(f"Неизвестная схема интегрирования: {scheme}")
    t = np.asarray(t, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    accel = np.asarray(accel, dtype=np.float64)
    _check_batch(t)

    batch, n = t.shape
    stops = list(stops) if stops is not None else [n]
    if any(m < 2 or m > n for m in stops):
        raise WindowTooShortError(f"Недопустимые длины префиксов {stops} для окна из {n} отсчетов")
    remaining = sorted(set(stops))
    snapshots = {}
    last = remaining[-1]

    q = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (batch, 1))
    rotation = np.tile(np.eye(3), (batch, 1, 1))
    beta = np.zeros((batch, 3))
    gamma = np.zeros((batch, 3))

    if with_jacobians:
        j_theta = np.zeros((batch, n, 3, 3))
        j_beta_w = np.zeros((batch, n, 3, 3))
        j_gamma_w = np.zeros((batch, n, 3, 3))
        j_beta_a = np.zeros((batch, n, 3, 3))
        j_gamma_a = np.zeros((batch, n, 3, 3))

    for k in range(last - 1):
        dt = t[:, k + 1] - t[:, k]
        dt_col = dt[:, None]

        if scheme == "midpoint":
            phi = 0.5 * (omega[:, k] + omega[:, k + 1]) * dt_col
        else:
            phi = omega[:, k] * dt_col
        step = exp_so3(phi)
        q_next = quat_mul(q, step)
        rotation_next = quat_to_rot(q_next)

        if scheme == "midpoint":
            a_mean = 0.5 * (_rotate(rotation, accel[:, k]) + _rotate(rotation_next, accel[:, k + 1]))
        else:
            a_mean = _rotate(rotation, accel[:, k])

        if with_jacobians:
            live = slice(0, k + 2)
            dt3 = dt[:, None, None, None]
            step_t = np.swapaxes(quat_to_rot(step), -1, -2)[:, None]
            jr = right_jacobian(phi) * dt[:, None, None]

            j_theta_next = np.zeros_like(j_theta)
            j_theta_next[:, live] = step_t @ j_theta[:, live]
            m0 = (rotation @ skew(accel[:, k]))[:, None]
            if scheme == "midpoint":
                j_theta_next[:, k] += 0.5 * jr
                j_theta_next[:, k + 1] += 0.5 * jr
                m1 = (rotation_next @ skew(accel[:, k + 1]))[:, None]
                da_w = -0.5 * (m0 @ j_theta[:, live] + m1 @ j_theta_next[:, live])
            else:
                j_theta_next[:, k] += jr
                da_w = -(m0 @ j_theta[:, live])

            j_gamma_w[:, live] += dt3 * j_beta_w[:, live] + 0.5 * dt3 * dt3 * da_w
            j_beta_w[:, live] += dt3 * da_w
            j_gamma_a[:, live] += dt3 * j_beta_a[:, live]

            dt2 = dt[:, None, None]
            if scheme == "midpoint":
                j_gamma_a[:, k] += 0.25 * dt2 * dt2 * rotation
                j_gamma_a[:, k + 1] += 0.25 * dt2 * dt2 * rotation_next
                j_beta_a[:, k] += 0.5 * dt2 * rotation
                j_beta_a[:, k + 1] += 0.5 * dt2 * rotation_next
            else:
                j_gamma_a[:, k] += 0.5 * dt2 * dt2 * rotation
                j_beta_a[:, k] += dt2 * rotation
            j_theta = j_theta_next

        gamma = gamma + beta * dt_col + 0.5 * a_mean * dt_col * dt_col
        beta = beta + a_mean * dt_col
        q = q_next
        rotation = rotation_next

        m = k + 2
        if m in remaining:
            delta = PreintegrationDelta(q.copy(), beta.copy(), gamma.copy(), t[:, m - 1] - t[:, 0], m)
            jac = None
            if with_jacobians:
                jac = PreintJacobians(j_theta[:, :m].copy(), j_beta_w[:, :m].copy(), j_beta_a[:, :m].copy(),
                                      j_gamma_w[:, :m].copy(), j_gamma_a[:, :m].copy())
            snapshots[m] = (delta, jac)

    return [snapshots[m] for m in stops]


def _single(window: Union[ImuSequence, Sequence[ImuSample]]) -> Tuple[npt.NDArray[np.float64], ...]:
    seq = _as_arrays(window)
    return seq.t[None], seq.omega[None], seq.accel[None]


def preintegrate(window: Union[ImuSequence, Sequence[ImuSample]], scheme: Scheme = "midpoint") -> PreintegrationDelta:
    """
    Преинтеграция одного окна

    Args:
        window: Окно отсчетов (не меньше 2, время строго возрастает)
        scheme: "euler" или "midpoint"

    Returns:
        PreintegrationDelta
    """
    t, omega, accel = _single(window)
    delta, _ = integrate_batch(t, omega, accel, scheme)[0]
    return delta[0]


def preintegrate_with_jacobians(window: Union[ImuSequence, Sequence[ImuSample]],
                                scheme: Scheme = "midpoint") -> Tuple[PreintegrationDelta, PreintJacobians]:
    """
    Преинтеграция с якобианами по каждому отсчету

    Args:
        window: Окно отсчетов
        scheme: Схема интегрирования

    Returns:
        (PreintegrationDelta, PreintJacobians)
    """
    t, omega, accel = _single(window)
    delta, jac = integrate_batch(t, omega, accel, scheme, with_jacobians=True)[0]
    assert jac is not None
    return delta[0], jac[0]


def prefix_deltas(window: Union[ImuSequence, Sequence[ImuSample]],
                  fractions: Sequence[float],
                  scheme: Scheme = "midpoint") -> List[PreintegrationDelta]:
    """
    Дельты по первым ⌈f·N⌉ отсчетам для каждой доли f

    Args:
        window: Окно отсчетов
        fractions: Возрастающие доли из (0, 1]
        scheme: Схема интегрирования

    Returns:
        Список PreintegrationDelta в порядке долей
    """
    t, omega, accel = _single(window)
    stops = prefix_lengths(t.shape[1], fractions)
    return [delta[0] for delta, _ in integrate_batch(t, omega, accel, scheme, stops)]


def _gravity(g: Optional[GravityModel]) -> npt.NDArray[np.float64]:
    return np.asarray((g or GravityModel()).g, dtype=np.float64)


def propagate_state(state: ImuState, delta: PreintegrationDelta, gravity: Optional[GravityModel] = None) -> ImuState:
    """
    Распространение состояния на окно:
    q' = q ⊗ Δq, v' = v + g·Δt + R·Δβ, p' = p + v·Δt + ½·g·Δt² + R·Δγ

    Смещения копируются без изменений. Поддерживает ведущую батч-ось.

    Args:
        state: Состояние в начале окна
        delta: Дельта окна
        gravity: Модель гравитации

    Returns:
        Состояние в конце окна
    """
    g = _gravity(gravity)
    dt = np.asarray(delta.dt_total, dtype=np.float64)[..., None]
    rotation = quat_to_rot(state.q)
    q_next = quat_mul(state.q, delta.dq)
    v_next = state.v + g * dt + _rotate(rotation, delta.dbeta)
    p_next = state.p + state.v * dt + 0.5 * g * dt * dt + _rotate(rotation, delta.dgamma)
    return ImuState(q=q_next, bg=state.bg.copy(), v=v_next, ba=state.ba.copy(), p=p_next)


def derive_targets(state_k: ImuState,
                   state_k1: ImuState,
                   dt: Union[float, npt.NDArray[np.float64]],
                   gravity: Optional[GravityModel] = None,
                   n_samples: int = 0) -> PreintegrationDelta:
    """
    Обучающие цели из ground truth (обращение формул распространения):
    Δq = q_k⁻¹ ⊗ q_k+1, Δβ = Rᵀ(v_k+1 - v_k - g·Δt), Δγ = Rᵀ(p_k+1 - p_k - v_k·Δt - ½·g·Δt²)

    Args:
        state_k: Состояние в начале окна
        state_k1: Состояние в конце окна
        dt: Длительность окна, с
        gravity: Модель гравитации
        n_samples: Количество отсчетов окна (для справки)

    Returns:
        PreintegrationDelta

    Raises:
        PreintegrationError: Если dt <= 0
    """
    dt_arr = np.asarray(dt, dtype=np.float64)
    if not np.all(dt_arr > 0.0):
        raise PreintegrationError(f"Длительность окна должна быть положительной: {dt}")
    g = _gravity(gravity)
    dt_col = dt_arr[..., None]
    rotation_t = np.swapaxes(quat_to_rot(state_k.q), -1, -2)
    dq = quat_mul(quat_inv(state_k.q), state_k1.q)
    dbeta = _rotate(rotation_t, state_k1.v - state_k.v - g * dt_col)
    dgamma = _rotate(rotation_t, state_k1.p - state_k.p - state_k.v * dt_col - 0.5 * g * dt_col * dt_col)
    dt_total: Union[float, npt.NDArray[np.float64]] = float(dt_arr) if dt_arr.ndim == 0 else dt_arr
    return PreintegrationDelta(dq, dbeta, dgamma, dt_total, n_samples)
