# src/config.py
import json
import math
from functools import lru_cache
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


Vec3Field = Tuple[float, float, float]
Matrix3Field = Tuple[Vec3Field, Vec3Field, Vec3Field]


class ConfigError(Exception):
    """Исключение для ошибок валидации конфигурации эксперимента"""
    def __init__(self, message: str, field_paths: Optional[List[str]] = None):
        super().__init__(message)
        self.message = message
        self.field_paths = field_paths or []

    def __str__(self) -> str:
        if not self.field_paths:
            return f"ConfigError: {self.message}"
        return f"ConfigError: {self.message} (fields: {', '.join(self.field_paths)})"


class StrictModel(BaseModel):
    """Базовая модель конфигурации: неизвестные поля запрещены"""
    model_config = ConfigDict(extra="forbid")


class GravityModel(StrictModel):
    """Известная гравитация в глобальной системе {G}"""
    g: Vec3Field = Field(default=(0.0, 0.0, -9.8), description="Вектор гравитации, м/с²")
    allow_nonstandard: bool = Field(
        default=False,
        description="Разрешить |g| вне диапазона [9.7, 9.9] (явное переопределение)"
    )

    @model_validator(mode="after")
    def _check_magnitude(self) -> "GravityModel":
        norm = math.sqrt(sum(c * c for c in self.g))
        if not self.allow_nonstandard and not 9.7 <= norm <= 9.9:
            raise ValueError(f"|g| = {norm:.4f} вне диапазона [9.7, 9.9]")
        return self


class ImuIntrinsics(StrictModel):
    """Параметры модели измерений: смещения (random walk) и белый шум"""
    sigma_g: float = Field(default=0.0, ge=0.0, description="Плотность белого шума гироскопа, рад/с/√Гц")
    sigma_a: float = Field(default=0.0, ge=0.0, description="Плотность белого шума акселерометра, м/с²/√Гц")
    sigma_bg_walk: float = Field(default=0.0, ge=0.0, description="Random walk смещения гироскопа, рад/с/√с")
    sigma_ba_walk: float = Field(default=0.0, ge=0.0, description="Random walk смещения акселерометра, м/с²/√с")
    initial_bg: Vec3Field = Field(default=(0.0, 0.0, 0.0), description="Начальное смещение гироскопа, рад/с")
    initial_ba: Vec3Field = Field(default=(0.0, 0.0, 0.0), description="Начальное смещение акселерометра, м/с²")
    gyro_misalignment: Optional[Matrix3Field] = Field(
        default=None,
        description="Матрица масштаба/перекоса гироскопа (только симулятор, по умолчанию выключена)"
    )
    accel_misalignment: Optional[Matrix3Field] = Field(
        default=None,
        description="Матрица масштаба/перекоса акселерометра (только симулятор, по умолчанию выключена)"
    )


class SinusoidTerm(StrictModel):
    """Одна гармоника суммы синусоид: A·sin(2π·f·t + φ) по каждой оси"""
    amplitude: Vec3Field = Field(default=(0.0, 0.0, 0.0), description="Амплитуда по осям")
    frequency: Vec3Field = Field(default=(0.0, 0.0, 0.0), description="Частота по осям, Гц")
    phase: Vec3Field = Field(default=(0.0, 0.0, 0.0), description="Фаза по осям, рад")

    @field_validator("frequency")
    @classmethod
    def _non_negative_frequency(cls, value: Vec3Field) -> Vec3Field:
        if any(f < 0 for f in value):
            raise ValueError("частоты должны быть неотрицательными")
        return value


class TrajectorySpec(StrictModel):
    """Параметры синтетической гладкой траектории и модели IMU"""
    duration: float = Field(default=120.0, gt=0.0, description="Длительность последовательности, с")
    imu_rate: float = Field(default=200.0, gt=0.0, description="Частота IMU, Гц")
    gt_rate: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Частота ground truth, Гц (None - совпадает с IMU)"
    )
    position_terms: List[SinusoidTerm] = Field(default_factory=list, description="Гармоники позиции, м")
    attitude_terms: List[SinusoidTerm] = Field(
        default_factory=list,
        description="Гармоники вектора вращения, рад"
    )
    intrinsics: ImuIntrinsics = Field(default_factory=ImuIntrinsics)
    gravity: GravityModel = Field(default_factory=GravityModel)
    seed: int = Field(default=0, description="Seed генератора шума")

    @field_validator("attitude_terms")
    @classmethod
    def _attitude_within_pi(cls, terms: List[SinusoidTerm]) -> List[SinusoidTerm]:
        # |r(t)| ограничен суммой амплитуд; log/exp однозначны при |r| < π
        bound = [sum(abs(term.amplitude[axis]) for term in terms) for axis in range(3)]
        if math.sqrt(sum(b * b for b in bound)) >= math.pi - 1e-3:
            raise ValueError("суммарная амплитуда ориентации должна быть меньше π")
        return terms

    @classmethod
    def random(cls,
               seed: int,
               duration: float = 120.0,
               imu_rate: float = 200.0,
               n_terms: int = 3,
               max_position_amplitude: float = 1.5,
               max_attitude_amplitude: float = 0.45,
               max_frequency: float = 0.6,
               **kwargs: Any) -> "TrajectorySpec":
        """
        Создает воспроизводимую случайную траекторию из суммы синусоид

        Args:
            seed: Seed для выбора амплитуд, частот и фаз
            duration: Длительность, с
            imu_rate: Частота IMU, Гц
            n_terms: Количество гармоник позиции и ориентации
            max_position_amplitude: Максимальная амплитуда позиции, м
            max_attitude_amplitude: Максимальная амплитуда ориентации на гармонику, рад
            max_frequency: Максимальная частота, Гц
            **kwargs: Остальные поля TrajectorySpec

        Returns:
            TrajectorySpec
        """
        rng = np.random.default_rng(seed)

        def draw(max_amplitude: float) -> List[SinusoidTerm]:
            terms = []
            for _ in range(n_terms):
                terms.append(SinusoidTerm(
                    amplitude=tuple(rng.uniform(0.2, 1.0, 3) * max_amplitude),  # type: ignore[arg-type]
                    frequency=tuple(rng.uniform(0.05, max_frequency, 3)),  # type: ignore[arg-type]
                    phase=tuple(rng.uniform(0.0, 2.0 * math.pi, 3)),  # type: ignore[arg-type]
                ))
            return terms

        return cls(
            duration=duration,
            imu_rate=imu_rate,
            position_terms=draw(max_position_amplitude),
            attitude_terms=draw(max_attitude_amplitude),
            seed=seed,
            **kwargs,
        )


class EurocSource(StrictModel):
    """Пути к последовательности в CSV формате EuRoC"""
    imu_path: str = Field(..., description="CSV с IMU: timestamp_ns,wx,wy,wz,ax,ay,az")
    gt_path: str = Field(..., description="CSV с ground truth: timestamp_ns,px,py,pz,qw,qx,qy,qz[,vx,vy,vz]")
    noise: ImuIntrinsics = Field(
        default_factory=lambda: ImuIntrinsics(sigma_g=1.6968e-4, sigma_a=2.0e-3),
        description="Паспортные шумы IMU (для λ регуляризации)"
    )
    gravity: GravityModel = Field(default_factory=lambda: GravityModel(g=(0.0, 0.0, -9.81)))
    velocity_smoothing: int = Field(
        default=0,
        ge=0,
        description="Окно сглаживания при выводе скорости из позиций (0 - выключено)"
    )


class AugmentationConfig(StrictModel):
    """Аугментация обучающих окон"""
    random_offset: bool = Field(default=True, description="Случайный сдвиг начала окон")
    noise_std_gyro: float = Field(default=0.0, ge=0.0, description="Аддитивный шум гироскопа, рад/с")
    noise_std_accel: float = Field(default=0.0, ge=0.0, description="Аддитивный шум акселерометра, м/с²")
    random_bias: bool = Field(default=False, description="Добавлять случайные постоянные смещения")
    bias_max_gyro: float = Field(default=0.02, ge=0.0, description="Граница равномерного смещения гироскопа, рад/с")
    bias_max_accel: float = Field(default=0.2, ge=0.0, description="Граница равномерного смещения акселерометра, м/с²")


class DataConfig(StrictModel):
    """Источник данных и нарезка окон"""
    simulation: Optional[TrajectorySpec] = Field(default=None, description="Синтетическая последовательность")
    euroc: Optional[EurocSource] = Field(default=None, description="Последовательность EuRoC")
    stride: int = Field(default=20, ge=1, description="Шаг между окнами, отсчеты")
    val_fraction: float = Field(default=0.15, gt=0.0, lt=1.0, description="Доля валидации (хвост обучения)")
    test_fraction: float = Field(default=0.25, ge=0.0, lt=1.0, description="Доля теста (конец последовательности)")
    gap_windows: int = Field(default=1, ge=1, description="Зазор между сплитами, в окнах")
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)

    @model_validator(mode="after")
    def _exactly_one_source(self) -> "DataConfig":
        if (self.simulation is None) == (self.euroc is None):
            raise ValueError("нужно указать ровно один источник данных: simulation или euroc")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction должно быть меньше 1")
        return self

    @property
    def source_name(self) -> str:
        """Имя источника для реестра"""
        return "simulation" if self.simulation is not None else "euroc"


class NetworkConfig(StrictModel):
    """Архитектура сети уточнения измерений"""
    n_layers: int = Field(default=2, ge=1, description="Количество bidirectional LSTM слоев")
    hidden: int = Field(default=64, ge=1, description="Размер скрытого состояния на направление")
    window_len: int = Field(default=200, ge=2, description="Длина окна, отсчеты")
    output_dim: int = Field(default=6, ge=6, le=6, description="Размер выхода (ω, a)")
    residual_output: bool = Field(default=True, description="refined = raw + поправка")
    zero_init_head: bool = Field(
        default=True,
        description="Нулевая инициализация FC головы (старт с тождественного уточнения)"
    )
    use_dt_channel: bool = Field(default=False, description="Подавать dt седьмым каналом")
    variable_length: bool = Field(default=False, description="Разрешить окна другой длины")

    @property
    def input_dim(self) -> int:
        """Размер входа сети"""
        return 7 if self.use_dt_channel else 6


class LossConfig(StrictModel):
    """Функции потерь и горизонты интегрирования"""
    huber_delta_q: float = Field(default=0.01, gt=0.0, description="δ Huber для вращения, рад")
    huber_delta_v: float = Field(default=0.05, gt=0.0, description="δ Huber для Δβ, м/с")
    huber_delta_p: float = Field(default=0.05, gt=0.0, description="δ Huber для Δγ, м")
    lambda_reg: Optional[Union[float, List[float]]] = Field(
        default=None,
        description="Мертвая зона регуляризации (скаляр или 6 каналов). None - кратное шуму"
    )
    lambda_noise_multiple: float = Field(default=3.0, ge=0.0, description="λ = k·σ белого шума")
    horizon_fractions: List[float] = Field(
        default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0],
        description="Доли окна для многогоризонтных потерь"
    )
    horizon_weights: Optional[List[float]] = Field(default=None, description="Веса горизонтов (None - все 1)")
    reg_weight: float = Field(default=1.0, ge=0.0, description="Вес регуляризации")
    scheme: Literal["euler", "midpoint"] = Field(default="midpoint", description="Схема интегрирования")

    @field_validator("lambda_reg")
    @classmethod
    def _lambda_non_negative(cls, value: Optional[Union[float, List[float]]]) -> Optional[Union[float, List[float]]]:
        if value is None:
            return value
        values = [value] if isinstance(value, (int, float)) else list(value)
        if isinstance(value, list) and len(values) != 6:
            raise ValueError("lambda_reg должен быть скаляром или списком из 6 значений")
        if any(v < 0 for v in values):
            raise ValueError("lambda_reg должен быть неотрицательным")
        return value

    @model_validator(mode="after")
    def _check_horizons(self) -> "LossConfig":
        fractions = self.horizon_fractions
        if not fractions:
            raise ValueError("horizon_fractions не может быть пустым")
        if any(not 0.0 < f <= 1.0 for f in fractions):
            raise ValueError("доли горизонтов должны лежать в (0, 1]")
        if any(b <= a for a, b in zip(fractions, fractions[1:])):
            raise ValueError("доли горизонтов должны строго возрастать")
        if self.horizon_weights is not None and len(self.horizon_weights) != len(fractions):
            raise ValueError("horizon_weights должен совпадать по длине с horizon_fractions")
        return self

    def weights(self) -> List[float]:
        """Веса горизонтов с учетом дефолта"""
        return list(self.horizon_weights) if self.horizon_weights is not None else [1.0] * len(self.horizon_fractions)


class TrainConfig(StrictModel):
    """Параметры обучения (Adam, отбор по валидации)"""
    lr: float = Field(default=1e-4, gt=0.0, description="Learning rate")
    batch_size: int = Field(default=32, ge=1, description="Размер батча")
    max_epochs: int = Field(default=700, ge=0, description="Максимум эпох")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    grad_clip: Optional[float] = Field(default=10.0, gt=0.0, description="Граница глобальной нормы градиента")
    cosine_decay: bool = Field(default=False, description="Косинусное затухание learning rate")
    early_stop_patience: Optional[int] = Field(default=None, ge=1, description="Эпох без улучшения до остановки")
    shuffle: bool = Field(default=True, description="Перемешивать батчи")
    seed: int = Field(default=0, description="Seed инициализации и перемешивания")


class EvalConfig(StrictModel):
    """Метрики оценки"""
    n_frames: int = Field(default=10, ge=1, description="Интервалов IMU для относительной ошибки позы")
    horizons: List[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0], description="Горизонты дрейфа, с")
    reset_interval: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Переякорение на ground truth каждые N секунд (эмуляция внешних коррекций)"
    )
    max_rel_trans_rmse: Optional[float] = Field(default=None, gt=0.0, description="Порог регрессии, м")
    max_rel_rot_rmse: Optional[float] = Field(default=None, gt=0.0, description="Порог регрессии, рад")


class ExperimentConfig(StrictModel):
    """Полный документ эксперимента"""
    data: DataConfig
    net: NetworkConfig = Field(default_factory=NetworkConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = Field(default="output", description="Каталог результатов")
    seed: int = Field(default=0, description="Главный seed эксперимента")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Распространяет seed на обучение и симуляцию"""
        updated = self.model_copy(deep=True)
        updated.seed = seed
        updated.train.seed = seed
        if updated.data.simulation is not None:
            updated.data.simulation.seed = seed
        return updated


def format_validation_error(error: ValidationError, prefix: str = "") -> ConfigError:
    """
    Преобразует ошибку pydantic в ConfigError с путями полей

    Args:
        error: Ошибка валидации pydantic
        prefix: Префикс пути (например, имя секции)

    Returns:
        ConfigError
    """
    paths = []
    messages = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"])
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        paths.append(path or "<root>")
        messages.append(f"{path or '<root>'}: {item['msg']}")
    return ConfigError("; ".join(messages), paths)


def apply_overrides(config_dict: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """
    Применяет переопределения вида section.key=value к словарю конфигурации

    Значение разбирается как JSON, при неудаче используется строка.

    Args:
        config_dict: Исходный словарь конфигурации
        overrides: Список строк section.key=value

    Returns:
        Новый словарь с примененными переопределениями

    Raises:
        ConfigError: Если строка некорректна или путь не существует
    """
    result = json.loads(json.dumps(config_dict))
    known_sections = set(ExperimentConfig.model_fields)

    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Некорректное переопределение '{override}', ожидается key=value", [override])
        path, raw_value = override.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys or keys[0] not in known_sections:
            raise ConfigError(f"Неизвестный путь конфигурации '{path}'", [path])

        try:
            value: Any = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value

        node = result
        for key in keys[:-1]:
            if node.get(key) is None:
                node[key] = {}
            if not isinstance(node[key], dict):
                raise ConfigError(f"Путь '{path}' проходит через не-секцию '{key}'", [path])
            node = node[key]
        node[keys[-1]] = value

    return result


def build_experiment_config(config_dict: Dict[str, Any], overrides: Optional[List[str]] = None) -> ExperimentConfig:
    """
    Строит и валидирует ExperimentConfig, запрещая неизвестные поля

    Args:
        config_dict: Словарь конфигурации
        overrides: Переопределения section.key=value

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: При ошибках валидации (с путями полей)
    """
    merged = apply_overrides(config_dict, overrides or [])
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise format_validation_error(e) from e


class Settings(BaseSettings):
    """Настройки процесса из окружения и .env"""

    OBSINT_THREADS: int = Field(default=1, ge=1, description="Максимум параллельных воркеров")
    OBSINT_LOG_LEVEL: str = Field(default="INFO", description="Уровень логирования")
    OBSINT_LOG_FILE: Optional[str] = Field(default=None, description="Файл логов с ротацией (опционально)")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"  # Игнорируем лишние поля из окружения
    )


@lru_cache()
def get_settings() -> Settings:
    """Получить настройки процесса"""
    return Settings()


def get_log_level() -> str:
    """Получить уровень логирования"""
    return get_settings().OBSINT_LOG_LEVEL


def get_thread_limit() -> int:
    """Получить ограничение на число воркеров"""
    return get_settings().OBSINT_THREADS
