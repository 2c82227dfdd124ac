# /src/services/learning/refine_net.py
"""
Сеть уточнения измерений: стек bidirectional LSTM + полносвязная голова.

Прямой проход и точный обратный проход (BPTT) реализованы на numpy, float64.
Порядок гейтов в весах: i, f, g, o; z = W·x + U·h + b.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from src.config import NetworkConfig
from src.logger import setup_logger
from src.services.inertial.imu_model import ImuSample, ImuSequence

logger = setup_logger(__name__)

CHECKPOINT_FORMAT = "obsint-checkpoint"
CHECKPOINT_VERSION = 1
DIRECTIONS = ("fwd", "bwd")
# Нижняя граница СКО нормализации
MIN_STD = 1e-6

Array = npt.NDArray[np.float64]
RawWindow = Union[ImuSequence, Sequence[ImuSample], Array]


class NetworkError(Exception):
    """Базовое исключение для ошибок сети"""
    pass


class ShapeMismatchError(NetworkError):
    """Размеры входа, градиента или параметров не согласованы с конфигурацией"""
    pass


class CheckpointError(NetworkError):
    """Файл чекпоинта отсутствует, поврежден или имеет неизвестную версию"""
    pass


@dataclass
class NetworkParams:
    """Именованные массивы весов сети"""
    arrays: Dict[str, Array]

    def __getitem__(self, name: str) -> Array:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self) -> Iterator[Tuple[str, Array]]:
        return iter(self.arrays.items())

    def copy(self) -> "NetworkParams":
        return NetworkParams({name: value.copy() for name, value in self.arrays.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams({name: np.zeros_like(value) for name, value in self.arrays.items()})

    def global_norm(self) -> float:
        """Глобальная L2-норма всех массивов"""
        return float(np.sqrt(sum(float(np.sum(value * value)) for value in self.arrays.values())))

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(value))) for value in self.arrays.values())


@dataclass
class Normalizer:
    """
    Поканальная аффинная нормализация по статистике обучающего набора

    Каналы: ω (3), a (3) и, опционально, dt.
    """
    mean: Array
    std: Array

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), MIN_STD)
        if self.mean.shape != self.std.shape:
            raise ShapeMismatchError(f"mean {self.mean.shape} и std {self.std.shape} не совпадают")

    @classmethod
    def identity(cls, channels: int = 6) -> "Normalizer":
        return cls(np.zeros(channels), np.ones(channels))

    @classmethod
    def fit(cls, features: Array) -> "Normalizer":
        """
        Статистика по массиву признаков [..., C]

        Args:
            features: Признаки обучающего набора

        Returns:
            Normalizer
        """
        flat = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
        if len(flat) == 0:
            raise NetworkError("Нельзя оценить нормализацию по пустому набору")
        return cls(flat.mean(axis=0), flat.std(axis=0))

    @property
    def channels(self) -> int:
        return int(self.mean.shape[0])

    def normalize(self, x: Array) -> Array:
        return (x - self.mean[: x.shape[-1]]) / self.std[: x.shape[-1]]

    def denormalize(self, x: Array) -> Array:
        return x * self.std[: x.shape[-1]] + self.mean[: x.shape[-1]]

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class LstmCache:
    """Промежуточные значения одного направления одного слоя (в порядке обработки)"""
    x: Array
    i: Array
    f: Array
    g: Array
    o: Array
    c: Array
    h: Array


@dataclass
class ForwardCache:
    """Все, что нужно обратному проходу"""
    config: NetworkConfig
    features: Array
    layers: List[Dict[str, LstmCache]] = field(default_factory=list)
    head_input: Optional[Array] = None
    std: Optional[Array] = None
    squeezed: bool = False


def param_names(config: NetworkConfig) -> List[str]:
    """Имена параметров в фиксированном порядке"""
    names = []
    for layer in range(config.n_layers):
        for direction in DIRECTIONS:
            names.extend(f"l{layer}_{direction}_{kind}" for kind in ("W", "U", "b"))
    names.extend(["head_W", "head_b"])
    return names


def param_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    """Ожидаемые формы параметров"""
    h = config.hidden
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in range(config.n_layers):
        d_in = config.input_dim if layer == 0 else 2 * h
        for direction in DIRECTIONS:
            shapes[f"l{layer}_{direction}_W"] = (4 * h, d_in)
            shapes[f"l{layer}_{direction}_U"] = (4 * h, h)
            shapes[f"l{layer}_{direction}_b"] = (4 * h,)
    shapes["head_W"] = (config.output_dim, 2 * h)
    shapes["head_b"] = (config.output_dim,)
    return shapes


def check_params(params: NetworkParams, config: NetworkConfig) -> None:
    """
    Проверяет согласованность параметров с конфигурацией

    Raises:
        ShapeMismatchError: Если набор имен или формы не совпадают
    """
    expected = param_shapes(config)
    if set(expected) != set(params.arrays):
        raise ShapeMismatchError(
            f"Набор параметров не совпадает с конфигурацией: "
            f"лишние {sorted(set(params.arrays) - set(expected))}, "
            f"отсутствуют {sorted(set(expected) - set(params.arrays))}"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{name}: ожидалась форма {shape}, получена {params[name].shape}")


def init_params(config: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
    """
    Инициализация весов

    Входные и рекуррентные веса ~ U(-1/√H, 1/√H), смещение forget-гейта 1,
    остальные смещения 0. Голова нулевая при zero_init_head.

    Args:
        config: Конфигурация сети
        rng: Генератор случайных чисел

    Returns:
        NetworkParams
    """
    h = config.hidden
    scale = 1.0 / np.sqrt(h)
    shapes = param_shapes(config)
    arrays: Dict[str, Array] = {}
    for name in param_names(config):
        shape = shapes[name]
        if name.endswith("_b") and name.startswith("l"):
            bias = np.zeros(shape)
            bias[h:2 * h] = 1.0
            arrays[name] = bias
        elif name.startswith("l"):
            arrays[name] = rng.uniform(-scale, scale, size=shape)
        elif name == "head_W":
            if config.zero_init_head:
                arrays[name] = np.zeros(shape)
            else:
                head_scale = 1.0 / np.sqrt(2 * h)
                arrays[name] = rng.uniform(-head_scale, head_scale, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetworkParams(arrays)


def _sigmoid(z: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _window_features(window: RawWindow,
                     dt: Optional[Array],
                     config: NetworkConfig) -> Tuple[Array, bool]:
    """Приводит окно к массиву [B, T, 6 или 7]"""
    squeezed = False
    if not isinstance(window, np.ndarray):
        seq = window if isinstance(window, ImuSequence) else ImuSequence.from_samples(list(window))
        raw = seq.measurements[None]
        if dt is None and len(seq) > 1:
            steps = np.diff(seq.t)
            dt = np.append(steps, steps[-1])[None]
        squeezed = True
    else:
        raw = np.asarray(window, dtype=np.float64)
        if raw.ndim == 2:
            raw = raw[None]
            squeezed = True
            if dt is not None:
                dt = np.asarray(dt, dtype=np.float64)[None]
    if raw.ndim != 3 or raw.shape[-1] != 6:
        raise ShapeMismatchError(f"Ожидалось окно [B, T, 6], получено {raw.shape}")
    if not config.variable_length and raw.shape[1] != config.window_len:
        raise ShapeMismatchError(f"Длина окна {raw.shape[1]} не совпадает с window_len={config.window_len}")
    if config.use_dt_channel:
        if dt is None:
            raise ShapeMismatchError("use_dt_channel требует шаги dt для каждого отсчета")
        dt = np.asarray(dt, dtype=np.float64).reshape(raw.shape[0], raw.shape[1], 1)
        raw = np.concatenate([raw, dt], axis=-1)
    return raw, squeezed


def _lstm_forward(x: Array, w: Array, u: Array, b: Array) -> LstmCache:
    batch, steps, _ = x.shape
    h_size = u.shape[1]
    gates = {name: np.empty((batch, steps, h_size)) for name in ("i", "f", "g", "o", "c", "h")}
    h_prev = np.zeros((batch, h_size))
    c_prev = np.zeros((batch, h_size))
    x_proj = x @ w.T + b
    for t in range(steps):
        z = x_proj[:, t] + h_prev @ u.T
        i = _sigmoid(z[:, :h_size])
        f = _sigmoid(z[:, h_size:2 * h_size])
        g = np.tanh(z[:, 2 * h_size:3 * h_size])
        o = _sigmoid(z[:, 3 * h_size:])
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        for name, value in (("i", i), ("f", f), ("g", g), ("o", o), ("c", c_prev), ("h", h_prev)):
            gates[name][:, t] = value
    return LstmCache(x=x, **gates)


def _lstm_backward(dh: Array, cache: LstmCache, w: Array, u: Array) -> Tuple[Array, Array, Array, Array]:
    batch, steps, h_size = dh.shape
    dw = np.zeros_like(w)
    du = np.zeros_like(u)
    db = np.zeros(4 * h_size)
    dx = np.empty_like(cache.x)
    dh_next = np.zeros((batch, h_size))
    dc_next = np.zeros((batch, h_size))
    for t in reversed(range(steps)):
        i, f, g, o, c = cache.i[:, t], cache.f[:, t], cache.g[:, t], cache.o[:, t], cache.c[:, t]
        c_prev = cache.c[:, t - 1] if t > 0 else np.zeros_like(c)
        h_prev = cache.h[:, t - 1] if t > 0 else np.zeros_like(c)
        tanh_c = np.tanh(c)

        dh_t = dh[:, t] + dh_next
        d_o = dh_t * tanh_c
        dc = dc_next + dh_t * o * (1.0 - tanh_c * tanh_c)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            d_o * o * (1.0 - o),
        ], axis=1)
        dc_next = dc * f

        dw += dz.T @ cache.x[:, t]
        du += dz.T @ h_prev
        db += dz.sum(axis=0)
        dx[:, t] = dz @ w
        dh_next = dz @ u
    return dx, dw, du, db


def forward(params: NetworkParams,
            raw_window: RawWindow,
            normalizer: Normalizer,
            config: NetworkConfig,
            dt: Optional[Array] = None) -> Tuple[Array, ForwardCache]:
    """
    Прямой проход: сырое окно -> уточненные измерения

    Args:
        params: Веса сети
        raw_window: ImuSequence, список ImuSample или массив [T, 6] / [B, T, 6]
        normalizer: Нормализация входа
        config: Конфигурация сети
        dt: Шаги по времени [T] / [B, T] (только для use_dt_channel и массивного входа)

    Returns:
        (уточненные измерения той же формы, что и вход, ForwardCache)

    Raises:
        ShapeMismatchError: Если форма окна не согласована с конфигурацией
    """
    check_params(params, config)
    features, squeezed = _window_features(raw_window, dt, config)
    if normalizer.channels != features.shape[-1]:
        raise ShapeMismatchError(
            f"Нормализация на {normalizer.channels} каналов, вход содержит {features.shape[-1]}"
        )
    raw = features[..., :6]
    layer_input = normalizer.normalize(features)
    cache = ForwardCache(config=config, features=features, squeezed=squeezed, std=normalizer.std[:6].copy())

    for layer in range(config.n_layers):
        caches: Dict[str, LstmCache] = {}
        outputs = []
        for direction in DIRECTIONS:
            w = params[f"l{layer}_{direction}_W"]
            u = params[f"l{layer}_{direction}_U"]
            b = params[f"l{layer}_{direction}_b"]
            x = layer_input if direction == "fwd" else layer_input[:, ::-1]
            lstm_cache = _lstm_forward(x, w, u, b)
            caches[direction] = lstm_cache
            outputs.append(lstm_cache.h if direction == "fwd" else lstm_cache.h[:, ::-1])
        cache.layers.append(caches)
        layer_input = np.concatenate(outputs, axis=-1)

    cache.head_input = layer_input
    head = layer_input @ params["head_W"].T + params["head_b"]
    correction = head * normalizer.std[:6]
    refined = raw + correction if config.residual_output else correction + normalizer.mean[:6]
    return (refined[0] if squeezed else refined), cache


def backward(params: NetworkParams,
             cache: ForwardCache,
             grad_refined: Array) -> Tuple[NetworkParams, Array]:
    """
    Обратный проход (BPTT)

    Args:
        params: Веса, использованные в forward
        cache: Кэш соответствующего forward
        grad_refined: ∂L/∂refined той же формы, что и выход forward

    Returns:
        (градиенты по параметрам, градиенты по сырым измерениям [.., T, 6])

    Raises:
        ShapeMismatchError: Если градиент или параметры не согласованы с кэшем
    """
    config = cache.config
    check_params(params, config)
    grad = np.asarray(grad_refined, dtype=np.float64)
    if cache.squeezed:
        grad = grad[None]
    expected = cache.features.shape[:2] + (6,)
    if grad.shape != expected:
        raise ShapeMismatchError(f"Градиент формы {grad.shape}, ожидалась {expected}")
    assert cache.head_input is not None and cache.std is not None

    grads: Dict[str, Array] = {}
    d_head = grad * cache.std
    grads["head_W"] = np.einsum("bto,btk->ok", d_head, cache.head_input)
    grads["head_b"] = d_head.sum(axis=(0, 1))
    d_layer = d_head @ params["head_W"]

    h = config.hidden
    for layer in reversed(range(config.n_layers)):
        caches = cache.layers[layer]
        d_input = None
        for direction in DIRECTIONS:
            w = params[f"l{layer}_{direction}_W"]
            u = params[f"l{layer}_{direction}_U"]
            if direction == "fwd":
                dh = d_layer[..., :h]
            else:
                dh = d_layer[:, ::-1, h:]
            dx, dw, du, db = _lstm_backward(dh, caches[direction], w, u)
            if direction == "bwd":
                dx = dx[:, ::-1]
            d_input = dx if d_input is None else d_input + dx
            grads[f"l{layer}_{direction}_W"] = dw
            grads[f"l{layer}_{direction}_U"] = du
            grads[f"l{layer}_{direction}_b"] = db
        assert d_input is not None
        d_layer = d_input

    input_grads = d_layer[..., :6] / cache.std
    if config.residual_output:
        input_grads = input_grads + grad
    if cache.squeezed:
        input_grads = input_grads[0]
    ordered = {name: grads[name] for name in param_names(config)}
    return NetworkParams(ordered), input_grads


@dataclass
class Checkpoint:
    """Содержимое файла чекпоинта"""
    config: NetworkConfig
    params: NetworkParams
    normalizer: Normalizer
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str,
                    params: NetworkParams,
                    normalizer: Normalizer,
                    config: NetworkConfig,
                    meta: Optional[Dict[str, Any]] = None) -> None:
    """
    Сохраняет чекпоинт в версионированный JSON

    Формат: {"format", "version", "config", "normalizer": {"mean", "std"},
    "params": {name: {"shape", "data"}}, "meta"}. Числа float64 сериализуются
    через repr и восстанавливаются без потерь.

    Args:
        path: Путь к файлу
        params: Веса
        normalizer: Нормализация входа
        config: Конфигурация сети
        meta: Произвольные метаданные (эпоха, метрики)
    """
    check_params(params, config)
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.model_dump(),
        "normalizer": normalizer.to_dict(),
        "params": {
            name: {"shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in params.items()
        },
        "meta": meta or {},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(document, f)
    os.replace(tmp_path, path)
    logger.debug(f"💾 Checkpoint saved: {path}")


def load_checkpoint(path: str) -> Checkpoint:
    """
    Загружает чекпоинт

    Args:
        path: Путь к файлу

    Returns:
        Checkpoint

    Raises:
        CheckpointError: Если файл отсутствует, поврежден или версия неизвестна
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"Чекпоинт не найден: {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Чекпоинт поврежден: {path}: {e}") from e

    if document.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Неизвестный формат чекпоинта в {path}")
    if document.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Неподдерживаемая версия чекпоинта {document.get('version')} в {path}")

    try:
        config = NetworkConfig.model_validate(document["config"])
        arrays = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in document["params"].items()
        }
        normalizer = Normalizer(document["normalizer"]["mean"], document["normalizer"]["std"])
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"Некорректное содержимое чекпоинта {path}: {e}") from e

    params = NetworkParams(arrays)
    try:
        check_params(params, config)
    except ShapeMismatchError as e:
        raise CheckpointError(f"Чекпоинт {path} не согласован с конфигурацией: {e}") from e
    return Checkpoint(config=config, params=params, normalizer=normalizer, meta=document.get("meta", {}))


def refine_sequence(checkpoint: Checkpoint, sequence: ImuSequence) -> Array:
    """
    Уточняет всю последовательность окнами длины window_len

    Окна идут встык, последнее выравнивается по концу последовательности;
    в перекрытии берутся значения последнего окна.

    Args:
        checkpoint: Обученная сеть
        sequence: Сырые измерения

    Returns:
        Уточненные измерения [N, 6]

    Raises:
        ShapeMismatchError: Если последовательность короче окна
    """
    config = checkpoint.config
    n, length = len(sequence), config.window_len
    if n < length:
        raise ShapeMismatchError(f"Последовательность из {n} отсчетов короче окна {length}")
    starts = list(range(0, n - length + 1, length))
    if starts[-1] + length < n:
        starts.append(n - length)

    index = np.asarray(starts)[:, None] + np.arange(length)
    steps = np.diff(sequence.t)
    dt = np.append(steps, steps[-1])[index] if config.use_dt_channel else None
    refined, _ = forward(checkpoint.params, sequence.measurements[index], checkpoint.normalizer, config, dt=dt)

    result = np.empty((n, 6))
    for start, window in zip(starts, refined):
        result[start:start + length] = window
    return result
