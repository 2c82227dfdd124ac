# /src/services/datasets/euroc.py
"""
Чтение и запись последовательностей в CSV-раскладке EuRoC

IMU: timestamp_ns,wx,wy,wz,ax,ay,az
GT:  timestamp_ns,px,py,pz,qw,qx,qy,qz[,vx,vy,vz] (лишние столбцы игнорируются)
Заголовок необязателен и определяется автоматически.
"""

import os
import re
from typing import List, Optional, Tuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from src.config import EurocSource, GravityModel, ImuIntrinsics
from src.logger import setup_logger
from src.services.datasets.base import BaseDatasetSource, Dataset, DatasetError, DatasetFormatError, DatasetMeta, GroundTruth
from src.services.inertial.imu_model import ImuSequence

logger = setup_logger(__name__)

IMU_COLUMNS = ["timestamp_ns", "wx", "wy", "wz", "ax", "ay", "az"]
GT_COLUMNS = ["timestamp_ns", "px", "py", "pz", "qw", "qx", "qy", "qz"]
GT_VELOCITY_COLUMNS = ["vx", "vy", "vz"]
NS_PER_S = 1_000_000_000


def _has_header(path: str) -> bool:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first:
        return False
    token = first.split(",")[0].strip().lstrip("#").strip()
    try:
        float(token)
        return False
    except ValueError:
        return True


def _read_table(path: str, min_columns: int, max_columns: int) -> Tuple[pd.DataFrame, int]:
    """
    Читает CSV в строки и проверяет каждое поле

    Returns:
        (таблица строк, номер первой строки данных в файле)
    """
    if not os.path.exists(path):
        raise DatasetError(f"Файл не найден: {path}")
    header = _has_header(path)
    first_line = 2 if header else 1
    try:
        frame = pd.read_csv(path, header=None, skiprows=1 if header else 0, dtype=str,
                            skipinitialspace=True, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=range(min_columns)), first_line
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = int(match.group(1)) if match else None
        raise DatasetFormatError(f"Неверное число полей: {e}", path, line) from e

    if frame.shape[1] < min_columns:
        raise DatasetFormatError(f"Ожидалось не меньше {min_columns} столбцов, найдено {frame.shape[1]}",
                                 path, first_line)
    frame = frame.iloc[:, :max_columns]
    return frame, first_line


def _numeric(frame: pd.DataFrame, path: str, first_line: int, required: int) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.float64]]:
    """Метки в int64 нс и значения в float64; первая плохая строка - ошибка с номером"""
    stamps = frame.iloc[:, 0].str.strip()
    values = frame.iloc[:, 1:].apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))

    bad = ~stamps.str.fullmatch(r"\d+").fillna(False).astype(bool) | values.iloc[:, :required - 1].isna().any(axis=1)
    if len(values.columns) > required - 1:
        extra = values.iloc[:, required - 1:]
        # Дополнительные столбцы либо заполнены целиком, либо отсутствуют целиком
        partial = extra.isna().any(axis=1) & ~extra.isna().all(axis=1)
        bad |= partial
    if bool(bad.any()):
        position = int(np.flatnonzero(bad.to_numpy())[0])
        raw = ",".join(str(x) for x in frame.iloc[position].tolist())
        raise DatasetFormatError(f"Некорректная строка: '{raw}'", path, first_line + position)

    ts = np.array([int(x) for x in stamps], dtype=np.int64)
    return ts, values.to_numpy(dtype=np.float64)


def _sort_and_dedupe(ts: npt.NDArray[np.int64], values: npt.NDArray[np.float64], path: str) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.float64]]:
    order = np.argsort(ts, kind="stable")
    ts, values = ts[order], values[order]
    keep = np.ones(len(ts), dtype=bool)
    keep[1:] = ts[1:] != ts[:-1]
    dropped = int(len(ts) - keep.sum())
    if dropped:
        logger.warning(f"⚠️ {path}: dropped {dropped} rows with duplicate timestamps")
    return ts[keep], values[keep]


def read_imu_csv(path: str) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.float64]]:
    """
    Читает IMU CSV

    Returns:
        (метки в нс [N], измерения [N, 6])

    Raises:
        DatasetError: Если файл отсутствует
        DatasetFormatError: Если строка некорректна (с номером строки)
    """
    frame, first_line = _read_table(path, len(IMU_COLUMNS), len(IMU_COLUMNS))
    ts, values = _numeric(frame, path, first_line, len(IMU_COLUMNS))
    return _sort_and_dedupe(ts, values, path)


def read_gt_csv(path: str) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.float64], bool]:
    """
    Читает GT CSV

    Returns:
        (метки в нс [M], значения [M, 7 или 10], есть ли скорости)
    """
    max_columns = len(GT_COLUMNS) + len(GT_VELOCITY_COLUMNS)
    frame, first_line = _read_table(path, len(GT_COLUMNS), max_columns)
    ts, values = _numeric(frame, path, first_line, len(GT_COLUMNS))
    has_velocity = values.shape[1] >= max_columns - 1 and not bool(np.isnan(values[:, 7:10]).any())
    values = values[:, :10] if has_velocity else values[:, :7]
    ts, values = _sort_and_dedupe(ts, values, path)
    return ts, values, has_velocity


def load_euroc_csv(imu_path: str,
                   gt_path: str,
                   gravity: Optional[GravityModel] = None,
                   noise: Optional[ImuIntrinsics] = None,
                   name: Optional[str] = None) -> Dataset:
    """
    Загружает последовательность из пары CSV

    Метки переводятся в секунды относительно первой метки IMU; исходные
    наносекунды восстанавливаются через time_origin_ns.

    Args:
        imu_path: CSV с IMU
        gt_path: CSV с ground truth
        gravity: Модель гравитации (по умолчанию [0, 0, -9.81])
        noise: Параметры шума датчика
        name: Имя последовательности (по умолчанию каталог файла IMU)

    Returns:
        Dataset (без выравнивания)
    """
    imu_ns, imu_values = read_imu_csv(imu_path)
    gt_ns, gt_values, has_velocity = read_gt_csv(gt_path)
    if len(imu_ns) == 0:
        raise DatasetError(f"IMU файл не содержит данных: {imu_path}")
    if len(gt_ns) == 0:
        raise DatasetError(f"GT файл не содержит данных: {gt_path}")

    origin = int(imu_ns[0])
    imu = ImuSequence(t=(imu_ns - origin) / NS_PER_S, omega=imu_values[:, :3], accel=imu_values[:, 3:6])
    gt = GroundTruth(
        t=(gt_ns - origin) / NS_PER_S,
        q=gt_values[:, 3:7],
        p=gt_values[:, 0:3],
        v=gt_values[:, 7:10] if has_velocity else None,
    )
    sequence_name = name or os.path.basename(os.path.dirname(os.path.abspath(imu_path))) or "euroc"
    meta = DatasetMeta(
        name=sequence_name,
        source="euroc",
        gravity=gravity or GravityModel(g=(0.0, 0.0, -9.81)),
        noise=noise or ImuIntrinsics(),
        imu_rate=float(1.0 / np.median(np.diff(imu.t))) if len(imu) > 1 else None,
        gt_rate=float(1.0 / np.median(np.diff(gt.t))) if len(gt) > 1 else None,
        time_origin_ns=origin,
    )
    logger.info(f"📂 Loaded '{sequence_name}': {len(imu)} IMU samples, {len(gt)} gt poses "
                f"(velocity {'present' if has_velocity else 'missing'})")
    return Dataset(imu=imu, gt=gt, meta=meta)


def to_nanoseconds(t: npt.NDArray[np.float64], origin_ns: int) -> npt.NDArray[np.int64]:
    """Секунды относительно origin -> абсолютные наносекунды"""
    return np.round(np.asarray(t) * NS_PER_S).astype(np.int64) + np.int64(origin_ns)


def imu_frame(t: npt.NDArray[np.float64], measurements: npt.NDArray[np.float64], origin_ns: int) -> pd.DataFrame:
    """Таблица IMU в раскладке EuRoC"""
    frame = pd.DataFrame(measurements, columns=IMU_COLUMNS[1:])
    frame.insert(0, "timestamp_ns", to_nanoseconds(t, origin_ns))
    return frame


def save_euroc_csv(dataset: Dataset, imu_path: str, gt_path: str) -> List[str]:
    """
    Сохраняет датасет в пару CSV с заголовками

    Args:
        dataset: Датасет
        imu_path: Путь к IMU CSV
        gt_path: Путь к GT CSV

    Returns:
        Список записанных путей
    """
    for path in (imu_path, gt_path):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

    origin = dataset.meta.time_origin_ns
    imu_frame(dataset.imu.t, dataset.imu.measurements, origin).to_csv(imu_path, index=False)

    gt = dataset.gt
    gt_columns = GT_COLUMNS[1:] + (GT_VELOCITY_COLUMNS if gt.v is not None else [])
    values = [gt.p, gt.q] + ([gt.v] if gt.v is not None else [])
    gt_frame = pd.DataFrame(np.concatenate(values, axis=1), columns=gt_columns)
    gt_frame.insert(0, "timestamp_ns", to_nanoseconds(gt.t, origin))
    gt_frame.to_csv(gt_path, index=False)

    logger.info(f"💾 Saved '{dataset.meta.name}' to {imu_path} and {gt_path}")
    return [imu_path, gt_path]


class EurocCsvSource(BaseDatasetSource):
    """Источник данных из CSV в раскладке EuRoC"""

    SOURCE_NAME = "euroc"

    def __init__(self, settings: EurocSource):
        super().__init__(settings)

    def load(self) -> Dataset:
        return load_euroc_csv(self.settings.imu_path, self.settings.gt_path,
                              gravity=self.settings.gravity, noise=self.settings.noise)
