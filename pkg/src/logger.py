# /src/logger.py
# Логирование obsint: прогресс в stderr, опционально файл с ротацией

import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional

from src.config import get_log_level, get_settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
ROOT_LOGGER = "obsint"


def _resolve_level() -> int:
    try:
        return getattr(logging, get_log_level().upper(), logging.INFO)
    except Exception:
        # Настройки недоступны (например, битый .env в тестах)
        return logging.INFO


def _resolve_log_file(log_file: Optional[str]) -> Optional[str]:
    if log_file is not None:
        return log_file
    try:
        return get_settings().OBSINT_LOG_FILE
    except Exception:
        return None


def _file_handler(path: str, max_bytes: int, backup_count: int) -> RotatingFileHandler:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return RotatingFileHandler(path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")


def setup_logger(
    name: str = ROOT_LOGGER,
    log_file: Optional[str] = None,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 5
) -> logging.Logger:
    """
    Логгер модуля: stderr и, если задан файл (аргумент или OBSINT_LOG_FILE),
    RotatingFileHandler

    stdout не используется: результаты команд пишутся только в файлы
    output_dir. Повторный вызов с тем же именем возвращает уже настроенный
    логгер без новых handlers.

    Args:
        name: Имя логгера (обычно __name__)
        log_file: Путь к файлу логов
        max_bytes: Размер файла до ротации, байт
        backup_count: Количество резервных файлов

    Returns:
        Настроенный логгер
    """
    logger = logging.getLogger(name)
    level = _resolve_level()
    logger.setLevel(level)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]

    path = _resolve_log_file(log_file)
    file_error: Optional[Exception] = None
    if path:
        try:
            handlers.append(_file_handler(path, max_bytes, backup_count))
        except OSError as e:
            file_error = e

    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    if file_error is not None:
        logger.warning(f"⚠️ Log file {path} unavailable, console only: {file_error}")
    return logger


def get_logger() -> logging.Logger:
    """Корневой логгер приложения"""
    return setup_logger()
