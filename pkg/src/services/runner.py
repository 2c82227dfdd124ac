# /src/services/runner.py

import fcntl
import json
import os
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

from src.config import ConfigError, ExperimentConfig, build_experiment_config
from src.logger import setup_logger
from src.services.pipeline import ExperimentPipeline, PipelineResult

LOCK_FILE = ".obsint.lock"
COMMANDS = ("simulate", "train", "eval", "gradcheck", "predict")


def load_experiment_config(file_path: str,
                           overrides: Optional[List[str]] = None,
                           seed: Optional[int] = None) -> ExperimentConfig:
    """
    Загрузить конфигурацию эксперимента из JSON файла

    Args:
        file_path: Путь к файлу конфигурации
        overrides: Переопределения section.key=value
        seed: Seed эксперимента (распространяется на обучение и симуляцию)

    Returns:
        ExperimentConfig

    Raises:
        FileNotFoundError: Если файл не найден
        ConfigError: Если JSON невалидный или конфигурация не проходит проверку
    """
    logger = setup_logger(__name__)

    if not os.path.exists(file_path):
        raise FileNotFoundError(f"Configuration file not found: {file_path}")

    with open(file_path, 'r', encoding='utf-8') as f:
        try:
            config_data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Невалидный JSON в {file_path}: {e}") from e

    if not isinstance(config_data, dict):
        raise ConfigError(f"Конфигурация должна быть JSON объектом, получено {type(config_data).__name__}")

    config = build_experiment_config(config_data, overrides)
    if seed is not None:
        config = config.with_seed(seed)
    logger.info(f"✅ Конфигурация загружена: {file_path} (source={config.data.source_name}, seed={config.seed})")
    if overrides:
        logger.info(f"📋 Переопределения: {overrides}")
    return config


@contextmanager
def file_lock(lock_file: str, timeout: float = 0.0) -> Iterator[None]:
    """
    Контекстный менеджер для файловой блокировки

    Args:
        lock_file: Путь к файлу блокировки
        timeout: Сколько секунд ждать освобождения (0 - не ждать)

    Raises:
        RuntimeError: Если блокировку не удалось получить
    """
    lock_path = Path(lock_file)
    lock_path.parent.mkdir(parents=True, exist_ok=True)

    start_time = time.time()

    while True:
        try:
            with open(lock_file, 'w') as f:
                fcntl.flock(f.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
                f.write(f"PID: {os.getpid()}\nStarted: {datetime.now(timezone.utc).isoformat()}\n")
                f.flush()

                try:
                    yield
                finally:
                    fcntl.flock(f.fileno(), fcntl.LOCK_UN)
                break

        except BlockingIOError:
            if time.time() - start_time >= timeout:
                raise RuntimeError(
                    f"Could not acquire lock {lock_file}. Another process may be using this output directory."
                )
            time.sleep(0.5)


def _dispatch(pipeline: ExperimentPipeline,
              command: str,
              checkpoint: Optional[str],
              horizon: Optional[float],
              resume: bool) -> PipelineResult:
    if command == "simulate":
        return pipeline.cmd_simulate()
    if command == "train":
        return pipeline.cmd_train(resume=resume)
    if command == "eval":
        return pipeline.cmd_eval(checkpoint)
    if command == "gradcheck":
        return pipeline.cmd_gradcheck()
    if checkpoint is None:
        raise ValueError("predict требует --checkpoint")
    return pipeline.cmd_predict(checkpoint, horizon)


def run_command(command: str,
                config_path: str,
                overrides: Optional[List[str]] = None,
                seed: Optional[int] = None,
                checkpoint: Optional[str] = None,
                horizon: Optional[float] = None,
                resume: bool = False) -> Dict[str, Any]:
    """
    Унифицированная точка входа для команд эксперимента

    Args:
        command: simulate | train | eval | gradcheck | predict
        config_path: Путь к JSON файлу эксперимента
        overrides: Переопределения section.key=value
        seed: Seed эксперимента
        checkpoint: Путь к чекпоинту (eval, predict)
        horizon: Горизонт предсказания, с (predict)
        resume: Продолжить обучение с сохраненного состояния (train)

    Returns:
        Словарь с результатами: {"success": bool, "command": ..., "result"/"error": ...}
    """
    logger = setup_logger(__name__)

    if command not in COMMANDS:
        return {"success": False, "command": command, "error": f"Unknown command: {command}"}

    try:
        config = load_experiment_config(config_path, overrides, seed)
    except (FileNotFoundError, ConfigError) as e:
        error_msg = f"Ошибка загрузки конфигурации: {e}"
        logger.error(f"💥 {error_msg}")
        return {"success": False, "command": command, "error": error_msg}

    lock_path = os.path.join(config.output_dir, LOCK_FILE)
    try:
        with file_lock(lock_path):
            logger.info(f"🔐 Получена блокировка {lock_path}")
            pipeline = ExperimentPipeline(config)
            result = _dispatch(pipeline, command, checkpoint, horizon, resume)

            if result.success:
                logger.info(f"🏁 Command '{command}' completed in {result.total_execution_time:.2f}s")
                return {"success": True, "command": command, "result": result}

            logger.error(f"❌ Command '{command}' failed: {result.errors}")
            return {"success": False, "command": command, "result": result,
                    "error": "; ".join(result.errors)}

    except RuntimeError as e:
        error_msg = str(e)
        logger.error(f"🔒 {error_msg}")
        return {"success": False, "command": command, "error": error_msg}

    except Exception as e:
        error_msg = f"Критическая ошибка: {e}"
        logger.error(f"💥 {error_msg}")
        return {"success": False, "command": command, "error": error_msg}
