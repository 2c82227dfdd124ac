# /src/services/learning/losses.py
"""
Функции потерь на наблюдаемых членах преинтеграции

Вращение, Δβ и Δγ сравниваются через Huber, уточненные измерения
регуляризуются мертвой зоной |u_m - û| <= λ. Многогоризонтная потеря
суммирует члены по префиксам окна, градиенты по измерениям собираются
через якобианы префиксов.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from src.config import ImuIntrinsics, LossConfig
from src.services.inertial.imu_model import ImuSample, ImuSequence
from src.services.inertial.preintegration import (
    PreintegrationDelta,
    Scheme,
    integrate_batch,
    prefix_lengths,
)
from src.services.inertial.so3_math import (
    Quaternion,
    log_so3,
    quat_inv,
    quat_mul,
    quat_to_rot,
    right_jacobian_inv,
)

Array = npt.NDArray[np.float64]


class LossError(Exception):
    """Исключение для несогласованных входов функций потерь"""
    pass


@dataclass(frozen=True)
class LossValue:
    """Значение потери и ее градиент по предсказанию"""
    value: float
    grad: Array


@dataclass(frozen=True)
class LossBreakdown:
    """
    Полная потеря окна (или батча окон) с разбивкой по членам

    grad: ∂L/∂refined той же формы, что и уточненные измерения.
    """
    total: float
    lq: float
    lv: float
    lp: float
    ld: float
    grad: Array


@dataclass(frozen=True)
class AugmentedBias:
    """
    Случайные постоянные смещения аугментации и их интегрированные члены

    Вход сети при аугментации равен u - b. Интегрированные члены посчитаны
    точно по чистому окну u для каждого горизонта:
    q_b = Δq(u) ⊗ Δq(u - b)⁻¹, β_b = Δβ(u) - Δβ(u - b), γ_b = Δγ(u) - Δγ(u - b).
    Поля q_b/beta_b/gamma_b имеют ось горизонтов [..., H, k].
    """
    bg: Array
    ba: Array
    q_b: Quaternion
    beta_b: Array
    gamma_b: Array

    @classmethod
    def build(cls,
              bg: npt.ArrayLike,
              ba: npt.ArrayLike,
              window: ImuSequence,
              fractions: Sequence[float] = (1.0,),
              scheme: Scheme = "midpoint") -> "AugmentedBias":
        """
        Считает интегрированные члены для одного окна

        Args:
            bg: Смещение гироскопа, рад/с
            ba: Смещение акселерометра, м/с²
            window: Чистое окно (до вычитания смещения)
            fractions: Доли горизонтов
            scheme: Схема интегрирования

        Returns:
            AugmentedBias с членами [H, k]
        """
        bg = np.asarray(bg, dtype=np.float64)
        ba = np.asarray(ba, dtype=np.float64)
        q_b, beta_b, gamma_b = bias_terms_batch(window.t[None], window.measurements[None],
                                                bg[None], ba[None], fractions, scheme)
        return cls(bg, ba, q_b[0], beta_b[0], gamma_b[0])

    @property
    def offset(self) -> Array:
        """Вектор смещения измерений (bg, ba)"""
        return np.concatenate([self.bg, self.ba], axis=-1)

    def horizon(self, index: int) -> "AugmentedBias":
        """Члены одного горизонта"""
        return AugmentedBias(self.bg, self.ba, self.q_b[..., index, :],
                             self.beta_b[..., index, :], self.gamma_b[..., index, :])


def huber(x: Union[float, npt.ArrayLike], delta: float) -> float:
    """
    Huber по компонентам, затем сумма

    ½x² при |x| <= δ, иначе δ(|x| - ½δ).
    """
    x = np.abs(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.where(x <= delta, 0.5 * x * x, delta * (x - 0.5 * delta))))


def huber_grad(x: npt.ArrayLike, delta: float) -> Array:
    """Производная Huber по каждой компоненте: clip(x, -δ, δ)"""
    return np.clip(np.asarray(x, dtype=np.float64), -delta, delta)


def _huber_rows(x: Array, delta: float) -> Array:
    ax = np.abs(x)
    return np.sum(np.where(ax <= delta, 0.5 * ax * ax, delta * (ax - 0.5 * delta)), axis=-1)


def _rotation_terms(dq_target: Quaternion,
                    dq_pred: Quaternion,
                    q_b: Optional[Quaternion],
                    delta: float) -> Tuple[Array, Array]:
    """Построчные значения и градиенты по правому возмущению dq_pred"""
    correction = quat_inv(dq_pred) if q_b is None else quat_mul(quat_inv(dq_pred), quat_inv(q_b))
    error = quat_mul(dq_target, correction)
    phi = log_so3(error)
    # log(E0·Exp(-R(C)ᵀδ)) ≈ φ0 - Jr⁻¹(φ0)·R(C)ᵀ·δ
    d_phi = -right_jacobian_inv(phi) @ np.swapaxes(quat_to_rot(correction), -1, -2)
    grad = np.einsum("...ji,...j->...i", d_phi, huber_grad(phi, delta))
    return _huber_rows(phi, delta), grad


def loss_rotation(dq_target: npt.ArrayLike,
                  dq_pred: npt.ArrayLike,
                  delta: float,
                  aug: Optional[AugmentedBias] = None) -> LossValue:
    """
    Huber от log(Δq_s ⊗ Δq̂⁻¹ ⊗ q_b⁻¹)

    Args:
        dq_target: Целевой Δq
        dq_pred: Предсказанный Δq̂
        delta: Порог Huber, рад
        aug: Смещения аугментации (без них q_b = единица)

    Returns:
        LossValue с градиентом по правому возмущению Δq̂ (Δq̂ ⊗ Exp(δ))
    """
    q_b = None if aug is None else aug.q_b
    values, grad = _rotation_terms(np.asarray(dq_target, dtype=np.float64),
                                   np.asarray(dq_pred, dtype=np.float64), q_b, delta)
    return LossValue(float(np.sum(values)), grad)


def _translation_loss(target: npt.ArrayLike, pred: npt.ArrayLike, bias_term: Optional[Array], delta: float) -> LossValue:
    residual = np.asarray(target, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    if bias_term is not None:
        residual = residual - bias_term
    return LossValue(huber(residual, delta), -huber_grad(residual, delta))


def loss_beta(dbeta_target: npt.ArrayLike,
              dbeta_pred: npt.ArrayLike,
              delta: float,
              aug: Optional[AugmentedBias] = None) -> LossValue:
    """Huber от Δβ_s - Δβ̂ - β_b; градиент по Δβ̂"""
    return _translation_loss(dbeta_target, dbeta_pred, None if aug is None else aug.beta_b, delta)


def loss_gamma(dgamma_target: npt.ArrayLike,
               dgamma_pred: npt.ArrayLike,
               delta: float,
               aug: Optional[AugmentedBias] = None) -> LossValue:
    """Huber от Δγ_s - Δγ̂ - γ_b; градиент по Δγ̂"""
    return _translation_loss(dgamma_target, dgamma_pred, None if aug is None else aug.gamma_b, delta)


def loss_reg(raw_window: npt.ArrayLike, refined_window: npt.ArrayLike, lam: npt.ArrayLike) -> LossValue:
    """
    Регуляризация мертвой зоной: Σ max(|u_m - û| - λ, 0)

    Args:
        raw_window: Сырые измерения [..., T, 6]
        refined_window: Уточненные измерения той же формы
        lam: λ по каналам (6) или скаляр

    Returns:
        LossValue с градиентом по уточненным измерениям

    Raises:
        LossError: Если длины окон не совпадают
    """
    raw = np.asarray(raw_window, dtype=np.float64)
    refined = np.asarray(refined_window, dtype=np.float64)
    if raw.shape != refined.shape:
        raise LossError(f"Формы сырого {raw.shape} и уточненного {refined.shape} окон не совпадают")
    diff = refined - raw
    excess = np.abs(diff) - np.asarray(lam, dtype=np.float64)
    active = excess > 0.0
    value = float(np.sum(np.where(active, excess, 0.0)))
    grad = np.where(active, np.sign(diff), 0.0)
    return LossValue(value, grad)


def resolve_lambda(config: LossConfig, noise: ImuIntrinsics, imu_rate: float) -> Array:
    """
    λ по каналам

    Явное значение из конфигурации (скаляр растягивается на 6 каналов),
    иначе k·σ/√dt белого шума гироскопа и акселерометра.

    Args:
        config: Конфигурация потерь
        noise: Параметры шума источника
        imu_rate: Частота IMU, Гц

    Returns:
        λ [6]
    """
    if config.lambda_reg is not None:
        return np.broadcast_to(np.asarray(config.lambda_reg, dtype=np.float64), (6,)).copy()
    scale = config.lambda_noise_multiple * np.sqrt(imu_rate)
    return np.array([noise.sigma_g] * 3 + [noise.sigma_a] * 3, dtype=np.float64) * scale


def bias_terms_batch(t: Array,
                     measurements: Array,
                     bg: Array,
                     ba: Array,
                     fractions: Sequence[float] = (1.0,),
                     scheme: Scheme = "midpoint") -> Tuple[Quaternion, Array, Array]:
    """
    Интегрированные члены смещений для батча окон

    Args:
        t: Метки времени [B, T]
        measurements: Чистые измерения [B, T, 6]
        bg: Смещения гироскопа [B, 3]
        ba: Смещения акселерометра [B, 3]
        fractions: Доли горизонтов
        scheme: Схема интегрирования

    Returns:
        (q_b [B, H, 4], beta_b [B, H, 3], gamma_b [B, H, 3])
    """
    stops = prefix_lengths(t.shape[1], fractions)
    clean = integrate_batch(t, measurements[..., :3], measurements[..., 3:], scheme, stops)
    shifted = integrate_batch(t, measurements[..., :3] - bg[:, None], measurements[..., 3:] - ba[:, None],
                              scheme, stops)
    q_b = np.stack([quat_mul(c.dq, quat_inv(s.dq)) for (c, _), (s, _) in zip(clean, shifted)], axis=1)
    beta_b = np.stack([c.dbeta - s.dbeta for (c, _), (s, _) in zip(clean, shifted)], axis=1)
    gamma_b = np.stack([c.dgamma - s.dgamma for (c, _), (s, _) in zip(clean, shifted)], axis=1)
    return q_b, beta_b, gamma_b


def integrated_bias_terms(bg: npt.ArrayLike,
                          ba: npt.ArrayLike,
                          window: Union[ImuSequence, Sequence[ImuSample]],
                          scheme: Scheme = "midpoint") -> Tuple[Quaternion, Array, Array]:
    """
    Интегрированные члены постоянных смещений на всем окне

    Члены точные для данного окна: q_b = Δq(u) ⊗ Δq(u - b)⁻¹,
    β_b = Δβ(u) - Δβ(u - b), γ_b = Δγ(u) - Δγ(u - b). Ускорение смещения
    поворачивается вращением самого окна, поэтому на вращающемся окне
    β_b ≠ ba·T. Для окна без вращения члены совпадают с преинтеграцией
    сигнала, состоящего только из смещения: постоянное ba = c дает
    β_b = cT, γ_b = ½cT². Разность с Δ(u + b) - Δ(u) второго порядка по b.

    Args:
        bg: Смещение гироскопа
        ba: Смещение акселерометра
        window: Окно измерений, к которому добавлено смещение
        scheme: Схема интегрирования

    Returns:
        (q_b, beta_b, gamma_b)
    """
    seq = window if isinstance(window, ImuSequence) else ImuSequence.from_samples(list(window))
    aug = AugmentedBias.build(bg, ba, seq, (1.0,), scheme)
    return aug.q_b[0], aug.beta_b[0], aug.gamma_b[0]


def _stack_targets(targets: Sequence[PreintegrationDelta], batch: int) -> Tuple[Array, Array, Array]:
    dq = np.asarray([d.dq for d in targets], dtype=np.float64)
    dbeta = np.asarray([d.dbeta for d in targets], dtype=np.float64)
    dgamma = np.asarray([d.dgamma for d in targets], dtype=np.float64)
    # [H, B, k] -> [B, H, k]
    dq, dbeta, dgamma = (np.moveaxis(x.reshape(len(targets), batch, -1), 0, 1) for x in (dq, dbeta, dgamma))
    return dq, dbeta, dgamma


def batch_loss(t: Array,
               net_input: Array,
               refined: Array,
               targets: Sequence[PreintegrationDelta],
               config: LossConfig,
               lam: npt.ArrayLike,
               aug: Optional[AugmentedBias] = None,
               scheme: Scheme = "midpoint") -> LossBreakdown:
    """
    Многогоризонтная потеря батча окон

    Σ_h w_h·(L_q + L_v + L_p) + reg_weight·L_d, суммированная по окнам батча.

    Args:
        t: Метки времени [B, T]
        net_input: Вход сети (сырые измерения с аугментацией) [B, T, 6]
        refined: Уточненные измерения [B, T, 6]
        targets: Цели по горизонтам, поля с батч-осью [B, ...]
        config: Конфигурация потерь
        lam: λ мертвой зоны
        aug: Смещения аугментации с членами [B, H, k]
        scheme: Схема интегрирования

    Returns:
        LossBreakdown с градиентом [B, T, 6]

    Raises:
        LossError: Если число целей не совпадает с числом горизонтов
    """
    fractions = config.horizon_fractions
    if len(targets) != len(fractions):
        raise LossError(f"Получено {len(targets)} целей для {len(fractions)} горизонтов")
    batch, n, _ = refined.shape
    stops = prefix_lengths(n, fractions)
    weights = config.weights()
    dq_t, dbeta_t, dgamma_t = _stack_targets(targets, batch)

    results = integrate_batch(t, refined[..., :3], refined[..., 3:], scheme, stops, with_jacobians=True)
    grad = np.zeros_like(refined)
    lq = lv = lp = 0.0
    for h, ((delta, jac), m, weight) in enumerate(zip(results, stops, weights)):
        assert jac is not None
        q_b = None if aug is None else aug.q_b[:, h]
        rot_values, g_theta = _rotation_terms(dq_t[:, h], delta.dq, q_b, config.huber_delta_q)

        r_beta = dbeta_t[:, h] - delta.dbeta
        r_gamma = dgamma_t[:, h] - delta.dgamma
        if aug is not None:
            r_beta = r_beta - aug.beta_b[:, h]
            r_gamma = r_gamma - aug.gamma_b[:, h]
        g_beta = -huber_grad(r_beta, config.huber_delta_v)
        g_gamma = -huber_grad(r_gamma, config.huber_delta_p)

        lq += weight * float(np.sum(rot_values))
        lv += weight * huber(r_beta, config.huber_delta_v)
        lp += weight * huber(r_gamma, config.huber_delta_p)

        # ∂L/∂ω_i = J_iᵀ·g для каждого отсчета префикса
        grad[:, :m, :3] += weight * (
            np.einsum("bnji,bj->bni", jac.d_theta_d_omega, g_theta)
            + np.einsum("bnji,bj->bni", jac.d_beta_d_omega, g_beta)
            + np.einsum("bnji,bj->bni", jac.d_gamma_d_omega, g_gamma)
        )
        grad[:, :m, 3:] += weight * (
            np.einsum("bnji,bj->bni", jac.d_beta_d_accel, g_beta)
            + np.einsum("bnji,bj->bni", jac.d_gamma_d_accel, g_gamma)
        )

    reg = loss_reg(net_input, refined, lam)
    ld = config.reg_weight * reg.value
    grad += config.reg_weight * reg.grad
    return LossBreakdown(total=lq + lv + lp + ld, lq=lq, lv=lv, lp=lp, ld=ld, grad=grad)


def total_loss(window: ImuSequence,
               refined: npt.ArrayLike,
               targets: Sequence[PreintegrationDelta],
               config: LossConfig,
               lam: npt.ArrayLike,
               aug: Optional[AugmentedBias] = None,
               scheme: Scheme = "midpoint") -> LossBreakdown:
    """
    Многогоризонтная потеря одного окна

    Args:
        window: Вход сети (сырые измерения с аугментацией)
        refined: Уточненные измерения [T, 6]
        targets: Цели по горизонтам (по одной PreintegrationDelta на долю)
        config: Конфигурация потерь
        lam: λ мертвой зоны
        aug: Смещения аугментации с членами [H, k]
        scheme: Схема интегрирования

    Returns:
        LossBreakdown с градиентом [T, 6]
    """
    refined = np.asarray(refined, dtype=np.float64)
    if refined.shape != (len(window), 6):
        raise LossError(f"Уточненное окно формы {refined.shape}, ожидалось {(len(window), 6)}")
    batch_aug = None
    if aug is not None:
        batch_aug = AugmentedBias(aug.bg[None], aug.ba[None], aug.q_b[None], aug.beta_b[None], aug.gamma_b[None])
    result = batch_loss(window.t[None], window.measurements[None], refined[None], targets,
                        config, lam, batch_aug, scheme)
    return LossBreakdown(result.total, result.lq, result.lv, result.lp, result.ld, result.grad[0])
