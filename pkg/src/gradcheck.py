# src/gradcheck.py
"""
Проверка аналитических градиентов центральными конечными разностями

Ошибка каждой проверки: ‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖, FLOOR)
по всему блоку. Проверки идут на крошечной сети (hidden 4, окно 8).
"""

import argparse
import os
import sys
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np
import numpy.typing as npt
import pandas as pd

from src.config import ExperimentConfig, NetworkConfig
from src.logger import setup_logger
from src.services.inertial.imu_model import ImuSequence
from src.services.inertial.preintegration import PreintegrationDelta, Scheme, integrate_batch, prefix_lengths
from src.services.inertial.so3_math import exp_so3, log_so3, quat_inv, quat_mul
from src.services.learning.losses import (
    AugmentedBias,
    batch_loss,
    loss_beta,
    loss_gamma,
    loss_reg,
    loss_rotation,
)
from src.services.learning.refine_net import NetworkParams, Normalizer, backward, forward, init_params

logger = setup_logger(__name__)

Array = npt.NDArray[np.float64]

TOLERANCE = 1e-4
STEP = 1e-6
FLOOR = 1e-12
TABLE_COLUMNS = ["name", "max_rel_error", "tolerance", "passed", "n_entries"]


@dataclass(frozen=True)
class CheckResult:
    """Итог одной проверки"""
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    n_entries: int


def relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), FLOOR)
    return float(np.linalg.norm(a - n)) / scale


def numeric_gradient(fn: Callable[[Array], float], x: Array, step: float = STEP) -> Array:
    """Центральные разности скалярной функции по каждому элементу x"""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + step
        plus = fn(x)
        flat[k] = saved - step
        minus = fn(x)
        flat[k] = saved
        out[k] = (plus - minus) / (2.0 * step)
    return grad


def numeric_jacobian(fn: Callable[[Array], Array], x: Array, step: float = STEP) -> Array:
    """Якобиан [выход, вход] центральными разностями"""
    flat = x.reshape(-1)
    columns = []
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + step
        plus = np.asarray(fn(x)).reshape(-1)
        flat[k] = saved - step
        minus = np.asarray(fn(x)).reshape(-1)
        flat[k] = saved
        columns.append((plus - minus) / (2.0 * step))
    return np.stack(columns, axis=-1)


def _result(name: str, analytic: Array, numeric: Array) -> CheckResult:
    error = relative_error(analytic, numeric)
    return CheckResult(name, error, TOLERANCE, bool(error < TOLERANCE), int(np.size(analytic)))


def _tiny_net(config: NetworkConfig) -> NetworkConfig:
    return config.model_copy(update={"hidden": 4, "window_len": 8, "zero_init_head": False,
                                     "variable_length": False})


def _window(rng: np.random.Generator, n: int = 8, rate: float = 200.0) -> tuple[Array, Array]:
    t = np.arange(n) / rate
    omega = rng.normal(0.0, 0.8, (n, 3))
    accel = rng.normal(0.0, 1.5, (n, 3)) + np.array([0.0, 0.0, 9.8])
    return t, np.concatenate([omega, accel], axis=1)


def check_preintegration(rng: np.random.Generator, scheme: Scheme) -> List[CheckResult]:
    """Блоки якобианов преинтеграции по ω_i и a_i"""
    t, u = _window(rng)
    n = len(t)
    delta, jac = integrate_batch(t[None], u[None, :, :3], u[None, :, 3:], scheme, with_jacobians=True)[0]
    assert jac is not None
    base_q = delta.dq[0]

    def run(x: Array) -> tuple[Array, Array, Array]:
        d, _ = integrate_batch(t[None], x[None, :, :3], x[None, :, 3:], scheme)[0]
        return log_so3(quat_mul(quat_inv(base_q), d.dq[0])), d.dbeta[0], d.dgamma[0]

    blocks = {
        "theta_omega": (0, slice(0, 3), jac.d_theta_d_omega[0]),
        "beta_omega": (1, slice(0, 3), jac.d_beta_d_omega[0]),
        "beta_accel": (1, slice(3, 6), jac.d_beta_d_accel[0]),
        "gamma_omega": (2, slice(0, 3), jac.d_gamma_d_omega[0]),
        "gamma_accel": (2, slice(3, 6), jac.d_gamma_d_accel[0]),
    }
    results = []
    for name, (output, channels, analytic) in blocks.items():
        x = u.copy()

        def fn(values: Array, output: int = output) -> Array:
            return run(values)[output]

        numeric = numeric_jacobian(fn, x).reshape(3, n, 6)[:, :, channels]
        # [3, N, 3] -> [N, 3(выход), 3(вход)]
        results.append(_result(f"preint/{scheme}/{name}", analytic, np.moveaxis(numeric, 0, 1)))
    return results


def check_losses(rng: np.random.Generator, delta_q: float, delta_v: float, delta_p: float) -> List[CheckResult]:
    """Градиенты отдельных потерь, с аугментацией смещений и без"""
    t, u = _window(rng)
    target = integrate_batch(t[None], u[None, :, :3] + 0.05, u[None, :, 3:] + 0.3, "midpoint")[0][0][0]
    pred = integrate_batch(t[None], u[None, :, :3], u[None, :, 3:], "midpoint")[0][0][0]
    aug = AugmentedBias.build(rng.uniform(-0.02, 0.02, 3), rng.uniform(-0.2, 0.2, 3),
                              _sequence(t, u)).horizon(0)

    results = []
    for suffix, bias in (("", None), ("_augmented", aug)):
        analytic = loss_rotation(target.dq, pred.dq, delta_q, bias).grad
        numeric = numeric_gradient(
            lambda d: loss_rotation(target.dq, quat_mul(pred.dq, exp_so3(d)), delta_q, bias).value, np.zeros(3))
        results.append(_result(f"loss/rotation{suffix}", analytic, numeric))

        analytic = loss_beta(target.dbeta, pred.dbeta, delta_v, bias).grad
        numeric = numeric_gradient(lambda x: loss_beta(target.dbeta, x, delta_v, bias).value, pred.dbeta.copy())
        results.append(_result(f"loss/beta{suffix}", analytic, numeric))

        analytic = loss_gamma(target.dgamma, pred.dgamma, delta_p, bias).grad
        numeric = numeric_gradient(lambda x: loss_gamma(target.dgamma, x, delta_p, bias).value, pred.dgamma.copy())
        results.append(_result(f"loss/gamma{suffix}", analytic, numeric))

    lam = np.full(6, 0.05)
    refined = u + rng.normal(0.0, 0.1, u.shape)
    analytic = loss_reg(u, refined, lam).grad
    numeric = numeric_gradient(lambda x: loss_reg(u, x, lam).value, refined.copy())
    results.append(_result("loss/reg", analytic, numeric))
    return results


def _sequence(t: Array, u: Array) -> ImuSequence:
    return ImuSequence(t=t, omega=u[:, :3], accel=u[:, 3:])


def _targets(t: Array, u: Array, fractions: List[float], scheme: Scheme) -> List[PreintegrationDelta]:
    stops = prefix_lengths(len(t), fractions)
    return [d for d, _ in integrate_batch(t[None], u[None, :, :3] + 0.03, u[None, :, 3:] - 0.2, scheme, stops)]


def check_multi_horizon(rng: np.random.Generator, config: ExperimentConfig) -> List[CheckResult]:
    """∂L/∂refined полной многогоризонтной потери (с аугментацией и без)"""
    scheme = config.loss.scheme
    fractions = config.loss.horizon_fractions
    t, u = _window(rng)
    targets = _targets(t, u, fractions, scheme)
    lam = np.full(6, 0.05)
    refined = u + rng.normal(0.0, 0.1, u.shape)
    bg, ba = rng.uniform(-0.02, 0.02, 3), rng.uniform(-0.2, 0.2, 3)
    single = AugmentedBias.build(bg, ba, _sequence(t, u), fractions, scheme)
    aug = AugmentedBias(single.bg[None], single.ba[None], single.q_b[None], single.beta_b[None],
                        single.gamma_b[None])

    results = []
    for suffix, bias in (("", None), ("_augmented", aug)):
        def value(x: Array) -> float:
            return batch_loss(t[None], u[None], x[None], targets, config.loss, lam, bias, scheme).total

        analytic = batch_loss(t[None], u[None], refined[None], targets, config.loss, lam, bias, scheme).grad[0]
        numeric = numeric_gradient(value, refined.copy())
        results.append(_result(f"loss/multi_horizon{suffix}", analytic, numeric))
    return results


def _net_setup(rng: np.random.Generator, net: NetworkConfig) -> tuple[NetworkParams, Normalizer, Array, Array, Optional[Array]]:
    params = init_params(net, rng)
    t, u = _window(rng, net.window_len)
    dt = np.append(np.diff(t), t[1] - t[0]) if net.use_dt_channel else None
    features = u if dt is None else np.concatenate([u, dt[:, None]], axis=1)
    return params, Normalizer.fit(features), t, u, dt


def check_network(rng: np.random.Generator, config: ExperimentConfig) -> List[CheckResult]:
    """BPTT по каждой группе параметров и по входу для L = Σ G·refined"""
    net = _tiny_net(config.net)
    params, normalizer, _, u, dt = _net_setup(rng, net)
    weights = rng.normal(0.0, 1.0, u.shape)

    refined, cache = forward(params, u, normalizer, net, dt=dt)
    grads, input_grads = backward(params, cache, weights)

    results = []
    for name in params:
        def value(x: Array, name: str = name) -> float:
            trial = params.copy()
            trial.arrays[name] = x
            out, _ = forward(trial, u, normalizer, net, dt=dt)
            return float(np.sum(weights * out))

        numeric = numeric_gradient(value, params[name].copy())
        results.append(_result(f"net/{name}", grads[name], numeric))

    numeric = numeric_gradient(lambda x: float(np.sum(weights * forward(params, x, normalizer, net, dt=dt)[0])),
                               u.copy())
    results.append(_result("net/input", input_grads, numeric))
    return results


def check_end_to_end(rng: np.random.Generator, config: ExperimentConfig) -> List[CheckResult]:
    """Потеря окна по всем весам сети: forward -> batch_loss -> backward"""
    net = _tiny_net(config.net)
    scheme = config.loss.scheme
    params, normalizer, t, u, dt = _net_setup(rng, net)
    targets = _targets(t, u, config.loss.horizon_fractions, scheme)
    lam = np.full(6, 0.05)

    def loss_of(trial: NetworkParams) -> float:
        out, _ = forward(trial, u[None], normalizer, net, dt=None if dt is None else dt[None])
        return batch_loss(t[None], u[None], out, targets, config.loss, lam, None, scheme).total

    refined, cache = forward(params, u[None], normalizer, net, dt=None if dt is None else dt[None])
    result = batch_loss(t[None], u[None], refined, targets, config.loss, lam, None, scheme)
    grads, _ = backward(params, cache, result.grad)

    analytic, numeric = [], []
    for name in params:
        def value(x: Array, name: str = name) -> float:
            trial = params.copy()
            trial.arrays[name] = x
            return loss_of(trial)

        analytic.append(grads[name].ravel())
        numeric.append(numeric_gradient(value, params[name].copy()).ravel())
    return [_result("end_to_end", np.concatenate(analytic), np.concatenate(numeric))]


def run_gradchecks(config: ExperimentConfig) -> List[CheckResult]:
    """
    Полный набор проверок градиентов

    Args:
        config: Конфигурация эксперимента (используются секции net и loss)

    Returns:
        Список CheckResult в фиксированном порядке
    """
    rng = np.random.default_rng(config.seed)
    loss = config.loss
    results: List[CheckResult] = []
    for scheme in ("euler", "midpoint"):
        results.extend(check_preintegration(rng, scheme))
    results.extend(check_losses(rng, loss.huber_delta_q, loss.huber_delta_v, loss.huber_delta_p))
    results.extend(check_multi_horizon(rng, config))
    results.extend(check_network(rng, config))
    results.extend(check_end_to_end(rng, config))

    logger.info("\n" + format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        logger.error(f"❌ Gradient checks failed: {len(failed)}/{len(results)}")
    else:
        logger.info(f"🎉 All {len(results)} gradient checks passed")
    return results


def format_table(results: List[CheckResult]) -> str:
    """Текстовая таблица name | max rel error | PASS/FAIL"""
    width = max((len(r.name) for r in results), default=4)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  status"]
    for r in results:
        status = "✅ PASS" if r.passed else "❌ FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:>12.3e}  {status}")
    return "\n".join(lines)


def write_table(results: List[CheckResult], path: str) -> str:
    """Сохраняет таблицу проверок в CSV"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame([asdict(r) for r in results], columns=TABLE_COLUMNS).to_csv(path, index=False)
    return path


def main() -> None:
    """Главная функция для запуска проверки градиентов"""
    parser = argparse.ArgumentParser(description="Проверка аналитических градиентов")
    parser.add_argument("--config", required=True, help="JSON файл эксперимента")
    args = parser.parse_args()

    from src.services.runner import load_experiment_config
    results = run_gradchecks(load_experiment_config(args.config))
    sys.exit(0 if all(r.passed for r in results) else 1)


if __name__ == "__main__":
    main()
