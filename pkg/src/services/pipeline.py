# /src/services/pipeline.py
"""
Оркестратор команд эксперимента: симуляция, обучение, оценка,
проверка градиентов и предсказание траектории
"""

import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from src.config import ExperimentConfig
from src.logger import setup_logger
from src.services.datasets.base import Dataset, DatasetError
from src.services.datasets.euroc import imu_frame, save_euroc_csv, to_nanoseconds
from src.services.datasets.simulator import simulate
from src.services.datasets.source_fabric import load_dataset
from src.services.datasets.windows import make_splits, split_bounds
from src.services.evaluation.exporter import emit_report
from src.services.evaluation.metrics import EvalReport, average_report, dead_reckon, evaluate
from src.services.learning.losses import resolve_lambda
from src.services.learning.refine_net import load_checkpoint, refine_sequence
from src.services.learning.trainer import CHECKPOINT_FILE, Trainer

SIMULATION_DIR = "simulation"
REPORT_DIR = "report"
PREDICT_DIR = "predict"
TRAJECTORY_COLUMNS = ["timestamp_ns", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]


@dataclass
class StageResult:
    """Результат выполнения отдельного этапа"""
    success: bool
    execution_time: float
    error_message: Optional[str] = None
    data: Optional[Dict[str, Any]] = None


@dataclass
class PipelineResult:
    """Результат выполнения команды"""
    command: str
    success: bool
    total_stages: int
    completed_stages: int
    total_execution_time: float
    results: Dict[str, StageResult] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)

    def stage_data(self, name: str) -> Dict[str, Any]:
        """Данные этапа (пустой словарь, если этап не выполнен)"""
        stage = self.results.get(name)
        return (stage.data or {}) if stage is not None else {}


class ThresholdViolation(Exception):
    """Метрика оценки превысила настроенный порог регрессии"""
    pass


class ExperimentPipeline:
    """
    Выполняет команды эксперимента как последовательность этапов

    Каждый этап возвращает словарь данных; исключение этапа останавливает
    команду и попадает в PipelineResult.errors.
    """

    def __init__(self, config: ExperimentConfig):
        """
        Args:
            config: Проверенная конфигурация эксперимента
        """
        self.config = config
        self.scheme = config.loss.scheme
        self.logger = setup_logger(__name__)
        self._dataset: Optional[Dataset] = None
        self.logger.info(f"ExperimentPipeline initialized: source={config.data.source_name}, "
                         f"output_dir={config.output_dir}, seed={config.seed}")

    @property
    def dataset(self) -> Dataset:
        """Ленивая загрузка и выравнивание датасета"""
        if self._dataset is None:
            self._dataset = load_dataset(self.config.data)
        return self._dataset

    def _output_path(self, *parts: str) -> str:
        return os.path.join(self.config.output_dir, *parts)

    def _run_stages(self, command: str, stages: List[tuple[str, Callable[[], Dict[str, Any]]]]) -> PipelineResult:
        start_time = time.time()
        self.logger.info(f"▶️ Command '{command}': {len(stages)} stages")
        results: Dict[str, StageResult] = {}
        errors: List[str] = []
        completed = 0

        for name, stage in stages:
            stage_start = time.time()
            try:
                data = stage()
                results[name] = StageResult(success=True, execution_time=time.time() - stage_start, data=data)
                completed += 1
                self.logger.info(f"✅ Stage '{name}' done in {results[name].execution_time:.2f}s")
            except Exception as e:
                error_msg = f"Stage '{name}' failed: {e}"
                self.logger.error(f"❌ {error_msg}")
                results[name] = StageResult(success=False, execution_time=time.time() - stage_start,
                                            error_message=str(e))
                errors.append(error_msg)
                break

        return PipelineResult(
            command=command,
            success=completed == len(stages) and not errors,
            total_stages=len(stages),
            completed_stages=completed,
            total_execution_time=time.time() - start_time,
            results=results,
            errors=errors,
        )

    # simulate

    def _simulate_stage(self) -> Dict[str, Any]:
        spec = self.config.data.simulation
        if spec is None:
            raise DatasetError("simulate требует источник data.simulation")
        result = simulate(spec)
        imu_path = self._output_path(SIMULATION_DIR, "imu.csv")
        gt_path = self._output_path(SIMULATION_DIR, "gt.csv")
        paths = save_euroc_csv(result.dataset, imu_path, gt_path)
        return {"paths": paths, "n_samples": len(result.dataset.imu)}

    def cmd_simulate(self) -> PipelineResult:
        """Синтетическая последовательность в CSV формата EuRoC"""
        return self._run_stages("simulate", [("simulate", self._simulate_stage)])

    # train

    def _lambda(self, dataset: Dataset) -> np.ndarray:
        return resolve_lambda(self.config.loss, dataset.meta.noise, dataset.median_rate())

    def cmd_train(self, resume: bool = False) -> PipelineResult:
        """Обучение с записью лучшего чекпоинта, журнала метрик и состояния"""
        config = self.config
        state: Dict[str, Any] = {}

        def windows_stage() -> Dict[str, Any]:
            rng = np.random.default_rng(config.seed)
            state["splits"] = make_splits(self.dataset, config.data, config.net.window_len,
                                          config.loss.horizon_fractions, rng, self.scheme)
            return {name: len(windows) for name, windows in state["splits"].items()}

        def train_stage() -> Dict[str, Any]:
            trainer = Trainer(config.net, config.loss, config.train, self._lambda(self.dataset),
                              scheme=self.scheme, output_dir=config.output_dir)
            result = trainer.fit(state["splits"]["train"], state["splits"]["val"], resume=resume)
            return {
                "checkpoint": self._output_path(CHECKPOINT_FILE),
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "epochs_logged": len(result.metrics),
                "stopped_early": result.stopped_early,
            }

        return self._run_stages("train", [("load", self._load_stage), ("windows", windows_stage),
                                          ("train", train_stage)])

    def _load_stage(self) -> Dict[str, Any]:
        dataset = self.dataset
        return {"name": dataset.meta.name, "n_samples": len(dataset.imu), "duration": dataset.duration}

    # eval

    def _evaluation_split(self) -> Dataset:
        dataset = self.dataset
        bounds = split_bounds(len(dataset.imu), self.config.net.window_len, self.config.data)
        if bounds.test is None:
            self.logger.warning("⚠️ test_fraction = 0, metrics are computed on the whole sequence")
            return dataset
        return dataset.slice(*bounds.test)

    def _check_thresholds(self, reports: List[EvalReport]) -> None:
        eval_config = self.config.eval
        averages = {r.method: r for r in reports if r.sequence == "average"}
        report = averages.get("refined") or averages.get("raw")
        if report is None:
            return
        violations = []
        if eval_config.max_rel_trans_rmse is not None and report.rel_trans_rmse > eval_config.max_rel_trans_rmse:
            violations.append(f"rel_trans_rmse {report.rel_trans_rmse:.6g} > {eval_config.max_rel_trans_rmse}")
        if eval_config.max_rel_rot_rmse is not None and report.rel_rot_rmse > eval_config.max_rel_rot_rmse:
            violations.append(f"rel_rot_rmse {report.rel_rot_rmse:.6g} > {eval_config.max_rel_rot_rmse}")
        if violations:
            raise ThresholdViolation(f"[{report.method}] " + "; ".join(violations))

    def cmd_eval(self, checkpoint_path: Optional[str] = None) -> PipelineResult:
        """
        Метрики на тестовом сплите: сырые и, при наличии чекпоинта, уточненные

        Нарушение порогов регрессии делает команду неуспешной после записи отчета.
        """
        state: Dict[str, Any] = {}

        def metrics_stage() -> Dict[str, Any]:
            test = self._evaluation_split()
            reports = [evaluate(test, None, "raw", self.config.eval, self.scheme)]
            if checkpoint_path is not None:
                checkpoint = load_checkpoint(checkpoint_path)
                refined = refine_sequence(checkpoint, test.imu)
                reports.append(evaluate(test, refined, "refined", self.config.eval, self.scheme))
            methods = [r.method for r in reports]
            reports.extend(average_report(reports, method) for method in methods)
            state["reports"] = reports
            return {r.method: {"rel_trans_rmse": r.rel_trans_rmse, "rel_rot_rmse": r.rel_rot_rmse}
                    for r in reports if r.sequence == "average"}

        def report_stage() -> Dict[str, Any]:
            return {"paths": emit_report(state["reports"], self._output_path(REPORT_DIR))}

        def threshold_stage() -> Dict[str, Any]:
            self._check_thresholds(state["reports"])
            return {}

        return self._run_stages("eval", [("metrics", metrics_stage), ("report", report_stage),
                                         ("thresholds", threshold_stage)])

    # gradcheck

    def cmd_gradcheck(self) -> PipelineResult:
        """Таблица проверок градиентов конечными разностями"""
        from src.gradcheck import run_gradchecks, write_table

        def gradcheck_stage() -> Dict[str, Any]:
            results = run_gradchecks(self.config)
            path = write_table(results, self._output_path("gradcheck.csv"))
            failed = [r.name for r in results if not r.passed]
            if failed:
                raise ValueError(f"{len(failed)} gradient checks failed: {failed}")
            return {"path": path, "checks": len(results)}

        return self._run_stages("gradcheck", [("gradcheck", gradcheck_stage)])

    # predict

    def cmd_predict(self, checkpoint_path: str, horizon: Optional[float] = None) -> PipelineResult:
        """
        Уточненные измерения и траектория счисления пути

        Пишет refined_imu.csv (раскладка EuRoC) и trajectory.csv от первого
        состояния ground truth на горизонт horizon секунд (None - вся
        последовательность).
        """
        def predict_stage() -> Dict[str, Any]:
            dataset = self.dataset
            checkpoint = load_checkpoint(checkpoint_path)
            if horizon is not None:
                if horizon <= 0.0:
                    raise ValueError(f"Горизонт должен быть положительным: {horizon}")
                stop = int(np.searchsorted(dataset.imu.t, dataset.imu.t[0] + horizon, side="right"))
                # Сеть работает окнами window_len, короче не обрезаем
                stop = min(max(stop, checkpoint.config.window_len), len(dataset.imu))
                dataset = dataset.slice(0, stop)
            refined = refine_sequence(checkpoint, dataset.imu)
            states = dead_reckon(dataset, refined, None, self.scheme)

            out_dir = self._output_path(PREDICT_DIR)
            os.makedirs(out_dir, exist_ok=True)
            origin = dataset.meta.time_origin_ns
            imu_path = os.path.join(out_dir, "refined_imu.csv")
            imu_frame(dataset.imu.t, refined, origin).to_csv(imu_path, index=False)

            trajectory = pd.DataFrame(np.concatenate([states.p, states.q, states.v], axis=1),
                                      columns=TRAJECTORY_COLUMNS[1:])
            trajectory.insert(0, "timestamp_ns", to_nanoseconds(dataset.imu.t, origin))
            trajectory_path = os.path.join(out_dir, "trajectory.csv")
            trajectory.to_csv(trajectory_path, index=False)
            return {"paths": [imu_path, trajectory_path], "n_samples": len(dataset.imu)}

        return self._run_stages("predict", [("load", self._load_stage), ("predict", predict_stage)])
