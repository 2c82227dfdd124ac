# /src/services/learning/trainer.py
"""
Обучение сети уточнения: Adam, отбор лучшей модели по валидации,
журнал метрик по эпохам и возобновление с сохраненного состояния
"""

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from src.config import LossConfig, NetworkConfig, TrainConfig, get_thread_limit
from src.logger import setup_logger
from src.services.datasets.windows import TrainingWindow, WindowBatch, stack_windows
from src.services.inertial.preintegration import Scheme
from src.services.learning.losses import LossBreakdown, batch_loss
from src.services.learning.refine_net import (
    Checkpoint,
    NetworkParams,
    Normalizer,
    ShapeMismatchError,
    backward,
    check_params,
    forward,
    init_params,
    save_checkpoint,
)

logger = setup_logger(__name__)

CHECKPOINT_FILE = "checkpoint_best.json"
METRICS_FILE = "metrics.csv"
STATE_FILE = "train_state.json"
METRICS_COLUMNS = ["epoch", "train_loss", "val_loss", "lq", "lv", "lp", "ld", "wall_s"]


class TrainingError(Exception):
    """Базовое исключение для ошибок обучения"""
    pass


class NonFiniteGradientError(TrainingError):
    """Градиент группы параметров содержит inf или nan"""
    def __init__(self, message: str, group: str):
        super().__init__(message)
        self.message = message
        self.group = group

    def __str__(self) -> str:
        return f"NonFiniteGradientError: {self.message} (group: {self.group})"


class DivergenceError(TrainingError):
    """Потеря стала нечисловой"""
    def __init__(self, message: str, epoch: int, metrics: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.message = message
        self.epoch = epoch
        self.metrics = metrics or {}

    def __str__(self) -> str:
        return f"DivergenceError: {self.message} (epoch: {self.epoch}, last metrics: {self.metrics})"


@dataclass
class AdamState:
    """Моменты Adam по каждой группе параметров и номер шага"""
    m: NetworkParams
    v: NetworkParams
    step: int = 0

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)


@dataclass
class EpochMetrics:
    """Строка журнала метрик"""
    epoch: int
    train_loss: float
    val_loss: float
    lq: float
    lv: float
    lp: float
    ld: float
    wall_s: float


@dataclass
class TrainingResult:
    """Лучший чекпоинт и журнал метрик"""
    checkpoint: Checkpoint
    metrics: List[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False


def clip_gradients(grads: NetworkParams, max_norm: Optional[float]) -> Tuple[NetworkParams, float]:
    """
    Ограничение глобальной нормы градиента

    Returns:
        (градиенты после ограничения, норма до ограничения)
    """
    norm = grads.global_norm()
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return NetworkParams({name: value * scale for name, value in grads.items()}), norm


def adam_step(params: NetworkParams,
              grads: NetworkParams,
              state: AdamState,
              config: TrainConfig,
              lr: Optional[float] = None) -> Tuple[NetworkParams, AdamState]:
    """
    Шаг Adam с коррекцией смещения моментов

    Args:
        params: Текущие веса
        grads: Градиенты
        state: Состояние оптимизатора
        config: Гиперпараметры
        lr: Learning rate шага (по умолчанию config.lr)

    Returns:
        (новые веса, новое состояние)

    Raises:
        NonFiniteGradientError: Если градиент группы нечисловой
        TrainingError: Если формы градиентов не совпадают с весами
    """
    for name, value in grads.items():
        if name not in params.arrays or params[name].shape != value.shape:
            raise TrainingError(f"Градиент {name} не согласован с весами")
        if not np.all(np.isfinite(value)):
            raise NonFiniteGradientError(f"Нечисловой градиент в группе {name}", name)

    grads, _ = clip_gradients(grads, config.grad_clip)
    lr = config.lr if lr is None else lr
    step = state.step + 1
    correction1 = 1.0 - config.beta1 ** step
    correction2 = 1.0 - config.beta2 ** step

    new_params: Dict[str, npt.NDArray[np.float64]] = {}
    new_m: Dict[str, npt.NDArray[np.float64]] = {}
    new_v: Dict[str, npt.NDArray[np.float64]] = {}
    for name, value in params.items():
        g = grads[name]
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        new_params[name] = value - lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
    return NetworkParams(new_params), AdamState(NetworkParams(new_m), NetworkParams(new_v), step)


def fit_normalizer(windows: Sequence[TrainingWindow], net: NetworkConfig) -> Normalizer:
    """Нормализация по входам обучающих окон (и шагам dt при use_dt_channel)"""
    batch = stack_windows(windows)
    features = batch.raw
    if net.use_dt_channel:
        features = np.concatenate([features, batch.dt[..., None]], axis=-1)
    return Normalizer.fit(features)


def _params_to_json(params: NetworkParams) -> Dict[str, Any]:
    return {name: {"shape": list(value.shape), "data": value.ravel().tolist()} for name, value in params.items()}


def _params_from_json(document: Dict[str, Any]) -> NetworkParams:
    return NetworkParams({
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in document.items()
    })


class Trainer:
    """Цикл обучения с упорядоченной редукцией градиентов по частям батча"""

    def __init__(self,
                 net: NetworkConfig,
                 loss: LossConfig,
                 train: TrainConfig,
                 lam: npt.ArrayLike,
                 scheme: Scheme = "midpoint",
                 output_dir: Optional[str] = None,
                 threads: Optional[int] = None):
        """
        Args:
            net: Конфигурация сети
            loss: Конфигурация потерь
            train: Параметры обучения
            lam: λ мертвой зоны регуляризации [6]
            scheme: Схема интегрирования
            output_dir: Каталог для чекпоинта, журнала и состояния (None - без файлов)
            threads: Число воркеров (по умолчанию OBSINT_THREADS)
        """
        self.net = net
        self.loss = loss
        self.train_config = train
        self.lam = np.asarray(lam, dtype=np.float64)
        self.scheme = scheme
        self.output_dir = output_dir
        self.threads = max(1, threads if threads is not None else get_thread_limit())
        logger.info(f"🧠 Trainer: {net.n_layers}x{net.hidden} BiLSTM, window {net.window_len}, "
                    f"lr={train.lr}, batch={train.batch_size}, threads={self.threads}")

    def _path(self, filename: str) -> Optional[str]:
        return None if self.output_dir is None else os.path.join(self.output_dir, filename)

    def _chunk(self, params: NetworkParams, normalizer: Normalizer, batch: WindowBatch,
               with_grads: bool) -> Tuple[LossBreakdown, Optional[NetworkParams]]:
        dt = batch.dt if self.net.use_dt_channel else None
        refined, cache = forward(params, batch.raw, normalizer, self.net, dt=dt)
        result = batch_loss(batch.t, batch.raw, refined, batch.targets, self.loss, self.lam, batch.aug, self.scheme)
        if not with_grads:
            return result, None
        grads, _ = backward(params, cache, result.grad)
        return result, grads

    def evaluate_batch(self,
                       params: NetworkParams,
                       normalizer: Normalizer,
                       batch: WindowBatch,
                       with_grads: bool = True) -> Tuple[LossBreakdown, Optional[NetworkParams]]:
        """
        Суммарная потеря батча и градиенты по весам

        Батч делится на части по числу воркеров; результаты складываются в
        порядке частей, так что итог не зависит от расписания потоков.

        Returns:
            (LossBreakdown с суммами по окнам, сумма градиентов или None)
        """
        n = len(batch)
        parts = min(self.threads, n)
        edges = np.linspace(0, n, parts + 1).round().astype(int)
        chunks = [batch.select(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

        if parts == 1:
            results = [self._chunk(params, normalizer, chunks[0], with_grads)]
        else:
            with ThreadPoolExecutor(max_workers=parts) as pool:
                futures = [pool.submit(self._chunk, params, normalizer, chunk, with_grads) for chunk in chunks]
                results = [future.result() for future in futures]

        total = results[0][0]
        lq, lv, lp, ld = total.lq, total.lv, total.lp, total.ld
        grads = results[0][1]
        for part, part_grads in results[1:]:
            lq, lv, lp, ld = lq + part.lq, lv + part.lv, lp + part.lp, ld + part.ld
            if grads is not None and part_grads is not None:
                grads = NetworkParams({name: grads[name] + part_grads[name] for name in grads})
        summary = LossBreakdown(total=lq + lv + lp + ld, lq=lq, lv=lv, lp=lp, ld=ld,
                                grad=np.zeros(0))
        return summary, grads

    def dataset_loss(self, params: NetworkParams, normalizer: Normalizer,
                     windows: Sequence[TrainingWindow]) -> LossBreakdown:
        """Средняя по окнам потеря набора (без градиентов)"""
        if not windows:
            raise TrainingError("Пустой набор окон")
        sums = np.zeros(4)
        size = self.train_config.batch_size
        for start in range(0, len(windows), size):
            part, _ = self.evaluate_batch(params, normalizer, stack_windows(windows[start:start + size]),
                                          with_grads=False)
            sums += np.array([part.lq, part.lv, part.lp, part.ld])
        lq, lv, lp, ld = (sums / len(windows)).tolist()
        return LossBreakdown(total=lq + lv + lp + ld, lq=lq, lv=lv, lp=lp, ld=ld, grad=np.zeros(0))

    def _learning_rate(self, epoch: int) -> float:
        config = self.train_config
        if not config.cosine_decay or config.max_epochs == 0:
            return config.lr
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * (epoch - 1) / config.max_epochs))

    def _write_metrics(self, row: EpochMetrics) -> None:
        path = self._path(METRICS_FILE)
        if path is None:
            return
        frame = pd.DataFrame([asdict(row)], columns=METRICS_COLUMNS)
        frame.to_csv(path, mode="a", header=not os.path.exists(path), index=False)

    def _save_best(self, params: NetworkParams, normalizer: Normalizer, epoch: int, val_loss: float) -> Checkpoint:
        meta = {"epoch": epoch, "val_loss": val_loss, "train": self.train_config.model_dump(),
                "loss": self.loss.model_dump(), "lambda_reg": self.lam.tolist(), "scheme": self.scheme}
        checkpoint = Checkpoint(config=self.net, params=params.copy(), normalizer=normalizer, meta=meta)
        path = self._path(CHECKPOINT_FILE)
        if path is not None:
            save_checkpoint(path, params, normalizer, self.net, meta)
        return checkpoint

    def _save_state(self, epoch: int, params: NetworkParams, adam: AdamState, normalizer: Normalizer,
                    rng: np.random.Generator, best_epoch: int, best_val: float, best_params: NetworkParams) -> None:
        path = self._path(STATE_FILE)
        if path is None:
            return
        document = {
            "epoch": epoch,
            "net": self.net.model_dump(mode="json"),
            "lr": self.train_config.lr,
            "seed": self.train_config.seed,
            "params": _params_to_json(params),
            "best_params": _params_to_json(best_params),
            "adam": {"m": _params_to_json(adam.m), "v": _params_to_json(adam.v), "step": adam.step},
            "normalizer": normalizer.to_dict(),
            "rng": rng.bit_generator.state,
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
        }
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(document, f)
        os.replace(tmp_path, path)

    def _load_state(self) -> Optional[Dict[str, Any]]:
        path = self._path(STATE_FILE)
        if path is None or not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def _check_resume_state(self, state: Dict[str, Any]) -> NetworkParams:
        """
        Сверяет сохраненное состояние с текущей конфигурацией

        max_epochs может отличаться (продление обучения), сеть, lr и seed - нет.

        Returns:
            Параметры из состояния

        Raises:
            TrainingError: Если состояние получено с другой конфигурацией
        """
        mismatched = []
        if state.get("net") != self.net.model_dump(mode="json"):
            mismatched.append("net")
        for key in ("lr", "seed"):
            if state.get(key) != getattr(self.train_config, key):
                mismatched.append(f"train.{key}")
        if mismatched:
            raise TrainingError(f"{STATE_FILE} сохранен с другой конфигурацией: {', '.join(mismatched)}")
        params = _params_from_json(state["params"])
        try:
            check_params(params, self.net)
        except ShapeMismatchError as e:
            raise TrainingError(f"{STATE_FILE}: {e}") from e
        return params

    def _check_splits(self, train_windows: Sequence[TrainingWindow], val_windows: Sequence[TrainingWindow]) -> None:
        if not train_windows or not val_windows:
            raise TrainingError(
                f"Нужны непустые train и val: train={len(train_windows)}, val={len(val_windows)}"
            )
        if any(w.split != "train" for w in train_windows):
            raise TrainingError("В обучающем наборе есть окна не из сплита train")
        if any(w.split != "val" for w in val_windows):
            raise TrainingError("В валидационном наборе есть окна не из сплита val")

    def fit(self,
            train_windows: Sequence[TrainingWindow],
            val_windows: Sequence[TrainingWindow],
            resume: bool = False) -> TrainingResult:
        """
        Обучение с отбором по валидационной потере

        Эпоха 0 в журнале - инициализированная модель. Лучший чекпоинт
        обновляется при строгом улучшении валидационной потери.

        Args:
            train_windows: Окна сплита train
            val_windows: Окна сплита val
            resume: Продолжить с train_state.json в output_dir

        Returns:
            TrainingResult

        Raises:
            TrainingError: Если наборы пусты, смешивают сплиты или состояние
                resume не согласовано с конфигурацией
            DivergenceError: Если потеря стала нечисловой
        """
        self._check_splits(train_windows, val_windows)
        config = self.train_config
        if self.output_dir is not None:
            os.makedirs(self.output_dir, exist_ok=True)

        state = self._load_state() if resume else None
        rng = np.random.default_rng(config.seed)
        metrics: List[EpochMetrics] = []
        if state is not None:
            params = self._check_resume_state(state)
            best_params = _params_from_json(state["best_params"])
            adam = AdamState(_params_from_json(state["adam"]["m"]), _params_from_json(state["adam"]["v"]),
                             int(state["adam"]["step"]))
            normalizer = Normalizer(state["normalizer"]["mean"], state["normalizer"]["std"])
            rng.bit_generator.state = state["rng"]
            first_epoch = int(state["epoch"]) + 1
            best_epoch = int(state["best_epoch"])
            best_val = float(state["best_val_loss"])
            checkpoint = self._save_best(best_params, normalizer, best_epoch, best_val)
            logger.info(f"🔁 Resuming from epoch {first_epoch - 1} (best val {best_val:.6g} at epoch {best_epoch})")
        else:
            if self.output_dir is not None and os.path.exists(self._path(METRICS_FILE) or ""):
                os.remove(self._path(METRICS_FILE) or "")
            params = init_params(self.net, rng)
            adam = AdamState.zeros(params)
            normalizer = fit_normalizer(train_windows, self.net)
            started = time.monotonic()
            train_init = self.dataset_loss(params, normalizer, train_windows)
            val_init = self.dataset_loss(params, normalizer, val_windows)
            row = EpochMetrics(0, train_init.total, val_init.total, val_init.lq, val_init.lv, val_init.lp,
                               val_init.ld, time.monotonic() - started)
            metrics.append(row)
            self._write_metrics(row)
            best_epoch, best_val, best_params = 0, val_init.total, params.copy()
            checkpoint = self._save_best(best_params, normalizer, 0, best_val)
            self._save_state(0, params, adam, normalizer, rng, best_epoch, best_val, best_params)
            first_epoch = 1
            logger.info(f"🚀 Epoch 0: train={train_init.total:.6g}, val={best_val:.6g} (ld={val_init.ld:.3g})")

        stopped_early = False
        n_train = len(train_windows)
        for epoch in range(first_epoch, config.max_epochs + 1):
            started = time.monotonic()
            lr = self._learning_rate(epoch)
            order = rng.permutation(n_train) if config.shuffle else np.arange(n_train)
            sums = np.zeros(4)
            for start in range(0, n_train, config.batch_size):
                selected = [train_windows[i] for i in order[start:start + config.batch_size]]
                part, grads = self.evaluate_batch(params, normalizer, stack_windows(selected))
                assert grads is not None
                if not math.isfinite(part.total):
                    raise DivergenceError("Обучающая потеря стала нечисловой", epoch,
                                          asdict(metrics[-1]) if metrics else None)
                scale = 1.0 / len(selected)
                grads = NetworkParams({name: value * scale for name, value in grads.items()})
                params, adam = adam_step(params, grads, adam, config, lr)
                sums += np.array([part.lq, part.lv, part.lp, part.ld])

            train_loss = float(sums.sum() / n_train)
            val = self.dataset_loss(params, normalizer, val_windows)
            row = EpochMetrics(epoch, train_loss, val.total, val.lq, val.lv, val.lp, val.ld,
                               time.monotonic() - started)
            if not math.isfinite(val.total):
                raise DivergenceError("Валидационная потеря стала нечисловой", epoch, asdict(row))
            metrics.append(row)
            self._write_metrics(row)

            if val.total < best_val:
                best_epoch, best_val, best_params = epoch, val.total, params.copy()
                checkpoint = self._save_best(best_params, normalizer, epoch, best_val)
            self._save_state(epoch, params, adam, normalizer, rng, best_epoch, best_val, best_params)
            logger.info(f"📈 Epoch {epoch}/{config.max_epochs}: train={train_loss:.6g}, val={val.total:.6g} "
                        f"(lq={val.lq:.3g}, lv={val.lv:.3g}, lp={val.lp:.3g}, ld={val.ld:.3g}), "
                        f"lr={lr:.3g}, {row.wall_s:.1f}s")

            if config.early_stop_patience is not None and epoch - best_epoch >= config.early_stop_patience:
                logger.info(f"⏹️ Early stop at epoch {epoch}: no improvement for {config.early_stop_patience} epochs")
                stopped_early = True
                break

        logger.info(f"🏁 Training done: best val {best_val:.6g} at epoch {best_epoch}")
        return TrainingResult(checkpoint=checkpoint, metrics=metrics, best_epoch=best_epoch,
                              best_val_loss=best_val, stopped_early=stopped_early)


def train(train_windows: Sequence[TrainingWindow],
          val_windows: Sequence[TrainingWindow],
          net: NetworkConfig,
          loss: LossConfig,
          train_config: TrainConfig,
          lam: npt.ArrayLike,
          scheme: Scheme = "midpoint",
          output_dir: Optional[str] = None,
          resume: bool = False) -> TrainingResult:
    """
    Удобная функция обучения

    Returns:
        TrainingResult с лучшим чекпоинтом и журналом метрик
    """
    trainer = Trainer(net, loss, train_config, lam, scheme=scheme, output_dir=output_dir)
    return trainer.fit(train_windows, val_windows, resume=resume)
