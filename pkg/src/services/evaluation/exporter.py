# /src/services/evaluation/exporter.py
# Экспорт отчетов оценки в CSV

import logging
import os
from typing import List, Optional, Sequence

import pandas as pd

from src.logger import setup_logger
from src.services.evaluation.metrics import EvalReport

RELATIVE_POSE_FILE = "relative_pose.csv"
DRIFT_FILE = "drift.csv"
TRAJECTORY_FILE = "trajectory.csv"

RELATIVE_POSE_COLUMNS = ["sequence", "method", "n_frames", "rel_trans_rmse", "rel_rot_rmse"]
DRIFT_COLUMNS = ["sequence", "method", "horizon", "quantity", "rmse", "n_steps", "n_starts"]
TRAJECTORY_COLUMNS = ["sequence", "method", "reset_interval", "trajectory_rmse"]
DRIFT_QUANTITIES = ("pos", "rot", "vel")


class ReportExportError(Exception):
    """Базовое исключение для ошибок экспорта отчетов"""
    pass


class ReportExporter:
    """Запись EvalReport в набор CSV: относительная поза, дрейф, траектория"""

    def __init__(self, out_dir: str):
        """
        Args:
            out_dir: Каталог для файлов отчета
        """
        self.out_dir = out_dir
        self._logger: Optional[logging.Logger] = None

    @property
    def logger(self) -> logging.Logger:
        """Ленивое создание логгера"""
        if self._logger is None:
            self._logger = setup_logger(__name__)
        return self._logger

    @staticmethod
    def relative_pose_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
        rows = [[r.sequence, r.method, r.n_frames, r.rel_trans_rmse, r.rel_rot_rmse] for r in reports]
        return pd.DataFrame(rows, columns=RELATIVE_POSE_COLUMNS)

    @staticmethod
    def drift_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
        """Одна строка на (горизонт, величина); столбцы horizon/rmse готовы для графика"""
        rows = []
        for report in reports:
            for point in report.drift:
                for quantity, value in zip(DRIFT_QUANTITIES, (point.pos_rmse, point.rot_rmse, point.vel_rmse)):
                    rows.append([report.sequence, report.method, point.horizon, quantity, value,
                                 point.n_steps, point.n_starts])
        return pd.DataFrame(rows, columns=DRIFT_COLUMNS)

    @staticmethod
    def trajectory_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
        rows = [[r.sequence, r.method, r.reset_interval, r.trajectory_rmse] for r in reports]
        return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)

    def export(self, reports: Sequence[EvalReport]) -> List[str]:
        """
        Записывает отчеты

        Args:
            reports: Отчеты (пустой список дает файлы только с заголовками)

        Returns:
            Список записанных путей

        Raises:
            ReportExportError: Если каталог недоступен для записи
        """
        frames = {
            RELATIVE_POSE_FILE: self.relative_pose_frame(reports),
            DRIFT_FILE: self.drift_frame(reports),
            TRAJECTORY_FILE: self.trajectory_frame(reports),
        }
        paths = []
        try:
            os.makedirs(self.out_dir, exist_ok=True)
            for filename, frame in frames.items():
                path = os.path.join(self.out_dir, filename)
                frame.to_csv(path, index=False)
                paths.append(path)
        except OSError as e:
            error_msg = f"Failed to write report to {self.out_dir}: {e}"
            self.logger.error(error_msg)
            raise ReportExportError(error_msg) from e

        self.logger.info(f"📊 Report written: {len(reports)} rows -> {self.out_dir}")
        return paths


def emit_report(reports: Sequence[EvalReport], out_dir: str) -> List[str]:
    """
    Удобная функция экспорта отчетов

    Args:
        reports: Отчеты
        out_dir: Каталог

    Returns:
        Список записанных путей
    """
    return ReportExporter(out_dir).export(reports)


def read_report(out_dir: str, filename: Optional[str] = None) -> pd.DataFrame:
    """Читает CSV отчета (по умолчанию относительную позу)"""
    return pd.read_csv(os.path.join(out_dir, filename or RELATIVE_POSE_FILE))
