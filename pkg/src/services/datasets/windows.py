# /src/services/datasets/windows.py
"""
Обучающие окна: нарезка выровненного датасета, цели по горизонтам,
аугментация и разбиение train | gap | val | gap | test
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from src.config import AugmentationConfig, DataConfig, GravityModel
from src.logger import setup_logger
from src.services.datasets.base import Dataset, DatasetError, InsufficientDataError
from src.services.inertial.imu_model import ImuSequence, ImuState
from src.services.inertial.preintegration import PreintegrationDelta, Scheme, derive_targets, prefix_lengths
from src.services.learning.losses import AugmentedBias

logger = setup_logger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TrainingWindow:
    """
    Окно для обучения или оценки

    raw: вход сети (после аугментации), targets: цели по горизонтам,
    state_start/state_end: граничные состояния ground truth.
    """
    start: int
    raw: ImuSequence
    state_start: ImuState
    state_end: ImuState
    targets: Tuple[PreintegrationDelta, ...]
    split: str = "train"
    noise_seed: Optional[int] = None
    aug: Optional[AugmentedBias] = None

    def __len__(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class WindowBatch:
    """Окна одной длины, собранные в массивы с батч-осью"""
    t: npt.NDArray[np.float64]
    raw: npt.NDArray[np.float64]
    targets: List[PreintegrationDelta]
    aug: Optional[AugmentedBias]

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @property
    def dt(self) -> npt.NDArray[np.float64]:
        """Шаги по времени на каждый отсчет [B, T] (последний повторяет предыдущий)"""
        steps = np.diff(self.t, axis=1)
        return np.concatenate([steps, steps[:, -1:]], axis=1)

    def select(self, start: int, stop: int) -> "WindowBatch":
        """Подбатч окон [start, stop)"""
        part = slice(start, stop)
        targets = [
            PreintegrationDelta(d.dq[part], d.dbeta[part], d.dgamma[part],
                                np.asarray(d.dt_total)[part], d.n_samples)
            for d in self.targets
        ]
        aug = None
        if self.aug is not None:
            aug = AugmentedBias(self.aug.bg[part], self.aug.ba[part], self.aug.q_b[part],
                                self.aug.beta_b[part], self.aug.gamma_b[part])
        return WindowBatch(t=self.t[part], raw=self.raw[part], targets=targets, aug=aug)


@dataclass(frozen=True)
class SplitBounds:
    """Полуинтервалы индексов отсчетов для каждого сплита"""
    train: Tuple[int, int]
    val: Tuple[int, int]
    test: Optional[Tuple[int, int]]

    def as_dict(self) -> Dict[str, Optional[Tuple[int, int]]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def window_targets(dataset: Dataset,
                   start: int,
                   window_len: int,
                   fractions: Sequence[float],
                   gravity: Optional[GravityModel] = None) -> Tuple[PreintegrationDelta, ...]:
    """Цели окна по горизонтам из выровненного ground truth"""
    gt = dataset.gt
    gravity = gravity or dataset.meta.gravity
    targets = []
    state_k = gt.state(start)
    for m in prefix_lengths(window_len, fractions):
        end = start + m - 1
        targets.append(derive_targets(state_k, gt.state(end), gt.t[end] - gt.t[start], gravity, n_samples=m))
    return tuple(targets)


def make_windows(dataset: Dataset,
                 window_len: int,
                 stride: int,
                 augmentation: Optional[AugmentationConfig],
                 rng: np.random.Generator,
                 fractions: Sequence[float] = (1.0,),
                 scheme: Scheme = "midpoint",
                 split: str = "train",
                 start: int = 0,
                 stop: Optional[int] = None) -> List[TrainingWindow]:
    """
    Нарезает окна из выровненного датасета

    Начала окон: offset, offset + stride, ... в [start, stop); offset случаен
    в [0, stride) при random_offset. При аугментации вход сети получает
    аддитивный белый шум и случайное постоянное смещение (записывается в
    AugmentedBias вместе с интегрированными членами).

    Args:
        dataset: Выровненный датасет
        window_len: Длина окна, отсчеты
        stride: Шаг между окнами
        augmentation: Настройки аугментации (None - без аугментации)
        rng: Генератор случайных чисел
        fractions: Доли горизонтов для целей
        scheme: Схема интегрирования для членов смещения
        split: Тег сплита
        start: Первый отсчет диапазона
        stop: Конец диапазона (по умолчанию конец датасета)

    Returns:
        Список TrainingWindow

    Raises:
        DatasetError: Если датасет не выровнен
        InsufficientDataError: Если диапазон короче одного окна
    """
    if not dataset.is_aligned:
        raise DatasetError("make_windows требует выровненный датасет (align_ground_truth)")
    if split not in SPLITS:
        raise DatasetError(f"Неизвестный сплит: {split}")
    stop = len(dataset.imu) if stop is None else stop
    if stop - start < window_len:
        raise InsufficientDataError(
            f"Диапазон [{start}, {stop}) короче окна из {window_len} отсчетов"
        )

    offset = 0
    if augmentation is not None and augmentation.random_offset:
        offset = int(rng.integers(0, min(stride, stop - start - window_len + 1)))

    gravity = dataset.meta.gravity
    windows = []
    for s in range(start + offset, stop - window_len + 1, stride):
        clean = dataset.imu.slice(s, s + window_len)
        raw = clean
        noise_seed = None
        aug = None
        if augmentation is not None:
            measurements = clean.measurements
            changed = False
            if augmentation.noise_std_gyro > 0.0 or augmentation.noise_std_accel > 0.0:
                noise_seed = int(rng.integers(0, 2**31 - 1))
                std = np.array([augmentation.noise_std_gyro] * 3 + [augmentation.noise_std_accel] * 3)
                measurements = measurements + np.random.default_rng(noise_seed).standard_normal(measurements.shape) * std
                changed = True
            if augmentation.random_bias:
                bg = rng.uniform(-augmentation.bias_max_gyro, augmentation.bias_max_gyro, 3)
                ba = rng.uniform(-augmentation.bias_max_accel, augmentation.bias_max_accel, 3)
                aug = AugmentedBias.build(bg, ba, clean.with_measurements(measurements), fractions, scheme)
                measurements = measurements - aug.offset
                changed = True
            if changed:
                raw = clean.with_measurements(measurements)

        windows.append(TrainingWindow(
            start=s,
            raw=raw,
            state_start=dataset.gt.state(s),
            state_end=dataset.gt.state(s + window_len - 1),
            targets=window_targets(dataset, s, window_len, fractions, gravity),
            split=split,
            noise_seed=noise_seed,
            aug=aug,
        ))
    return windows


def split_bounds(n_samples: int, window_len: int, data: DataConfig) -> SplitBounds:
    """
    Разбиение по времени: train | gap | val | gap | test

    Тест занимает конец последовательности, валидация - хвост оставшейся
    части; зазоры не короче gap_windows окон.

    Raises:
        InsufficientDataError: Если train или val (или непустой test) короче окна
    """
    gap = data.gap_windows * window_len
    n_test = int(round(data.test_fraction * n_samples))
    if n_test > 0:
        test: Optional[Tuple[int, int]] = (n_samples - n_test, n_samples)
        val_end = n_samples - n_test - gap
    else:
        test = None
        val_end = n_samples
    n_val = int(round(data.val_fraction * max(val_end, 0)))
    val = (val_end - n_val, val_end)
    train = (0, val[0] - gap)

    for name, bounds in (("train", train), ("val", val), ("test", test)):
        if bounds is not None and bounds[1] - bounds[0] < window_len:
            raise InsufficientDataError(
                f"Сплит {name} содержит {bounds[1] - bounds[0]} отсчетов, нужно не меньше {window_len}"
            )
    return SplitBounds(train=train, val=val, test=test)


def make_splits(dataset: Dataset,
                data: DataConfig,
                window_len: int,
                fractions: Sequence[float],
                rng: np.random.Generator,
                scheme: Scheme = "midpoint") -> Dict[str, List[TrainingWindow]]:
    """
    Окна всех сплитов; аугментация только для train

    Returns:
        {"train": [...], "val": [...], "test": [...]}
    """
    bounds = split_bounds(len(dataset.imu), window_len, data)
    result: Dict[str, List[TrainingWindow]] = {}
    for name, span in bounds.as_dict().items():
        if span is None:
            result[name] = []
            continue
        augmentation = data.augmentation if name == "train" else None
        result[name] = make_windows(dataset, window_len, data.stride, augmentation, rng, fractions, scheme,
                                    split=name, start=span[0], stop=span[1])
    logger.info(f"🪟 Windows: train={len(result['train'])}, val={len(result['val'])}, "
                f"test={len(result['test'])}")
    return result


def stack_windows(windows: Sequence[TrainingWindow]) -> WindowBatch:
    """
    Собирает окна одной длины в батч

    Raises:
        DatasetError: Если окна пустые, разной длины или аугментированы частично
    """
    if not windows:
        raise DatasetError("Нельзя собрать пустой батч")
    lengths = {len(w) for w in windows}
    if len(lengths) != 1:
        raise DatasetError(f"Окна батча разной длины: {sorted(lengths)}")

    t = np.stack([w.raw.t for w in windows])
    raw = np.stack([w.raw.measurements for w in windows])
    targets = [
        PreintegrationDelta(
            dq=np.stack([w.targets[h].dq for w in windows]),
            dbeta=np.stack([w.targets[h].dbeta for w in windows]),
            dgamma=np.stack([w.targets[h].dgamma for w in windows]),
            dt_total=np.array([w.targets[h].dt_total for w in windows]),
            n_samples=windows[0].targets[h].n_samples,
        )
        for h in range(len(windows[0].targets))
    ]

    with_aug = [w.aug is not None for w in windows]
    aug = None
    if all(with_aug):
        augs = [w.aug for w in windows if w.aug is not None]
        aug = AugmentedBias(
            bg=np.stack([a.bg for a in augs]),
            ba=np.stack([a.ba for a in augs]),
            q_b=np.stack([a.q_b for a in augs]),
            beta_b=np.stack([a.beta_b for a in augs]),
            gamma_b=np.stack([a.gamma_b for a in augs]),
        )
    elif any(with_aug):
        raise DatasetError("Батч смешивает окна с аугментацией смещения и без нее")
    return WindowBatch(t=t, raw=raw, targets=targets, aug=aug)
