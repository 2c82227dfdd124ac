# tests/services/test_runner.py

import json
import os
from unittest.mock import MagicMock, patch

import pytest

from src.config import ConfigError
from src.services.pipeline import PipelineResult
from src.services.runner import LOCK_FILE, file_lock, load_experiment_config, run_command


def write_config(tmp_path, document=None):
    document = document or {"data": {"simulation": {"duration": 5.0, "seed": 1}},
                            "output_dir": str(tmp_path / "out")}
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


def pipeline_result(success=True, errors=None):
    return PipelineResult(command="eval", success=success, total_stages=1, completed_stages=int(success),
                          total_execution_time=0.1, errors=errors or [])


class TestLoadExperimentConfig:
    """Тесты загрузки JSON эксперимента"""

    def test_loads_with_overrides_and_seed(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path), ["net.hidden=8"], seed=9)

        assert config.net.hidden == 8
        assert config.seed == 9
        assert config.data.simulation.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_experiment_config(str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError, match="Невалидный JSON"):
            load_experiment_config(str(path))

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON объектом"):
            load_experiment_config(str(path))

    def test_shipped_configs_are_valid(self):
        """Конфигурации из data/ проходят проверку"""
        data_dir = os.path.join(os.path.dirname(__file__), "..", "..", "data")
        for name in ("experiment_default.json", "experiment_tiny.json"):
            config = load_experiment_config(os.path.join(data_dir, name))
            assert config.data.simulation is not None


class TestFileLock:
    """Тесты файловой блокировки каталога результатов"""

    def test_second_holder_is_rejected(self, tmp_path):
        lock_path = str(tmp_path / "out" / LOCK_FILE)
        with file_lock(lock_path):
            with pytest.raises(RuntimeError, match="Could not acquire lock"):
                with file_lock(lock_path):
                    pass

    def test_lock_is_released(self, tmp_path):
        lock_path = str(tmp_path / LOCK_FILE)
        with file_lock(lock_path):
            pass
        with file_lock(lock_path):
            assert "PID" in open(lock_path, encoding="utf-8").read()


class TestRunCommand:
    """Тесты унифицированной точки входа"""

    def test_unknown_command(self, tmp_path):
        result = run_command("fit", write_config(tmp_path))
        assert not result["success"]
        assert "Unknown command" in result["error"]

    def test_config_error(self, tmp_path):
        path = write_config(tmp_path, {"data": {"simulation": {}}, "net": {"hiden": 4}})
        result = run_command("train", path)

        assert not result["success"]
        assert "net.hiden" in result["error"]

    @patch("src.services.runner.ExperimentPipeline")
    def test_dispatch_and_success(self, mock_pipeline_class, tmp_path):
        pipeline = MagicMock()
        pipeline.cmd_eval.return_value = pipeline_result()
        mock_pipeline_class.return_value = pipeline

        result = run_command("eval", write_config(tmp_path), checkpoint="best.json")

        assert result["success"]
        pipeline.cmd_eval.assert_called_once_with("best.json")
        assert os.path.exists(tmp_path / "out" / LOCK_FILE)

    @patch("src.services.runner.ExperimentPipeline")
    def test_train_resume(self, mock_pipeline_class, tmp_path):
        pipeline = MagicMock()
        pipeline.cmd_train.return_value = pipeline_result()
        mock_pipeline_class.return_value = pipeline

        run_command("train", write_config(tmp_path), resume=True)

        pipeline.cmd_train.assert_called_once_with(resume=True)

    @patch("src.services.runner.ExperimentPipeline")
    def test_failed_pipeline(self, mock_pipeline_class, tmp_path):
        pipeline = MagicMock()
        pipeline.cmd_simulate.return_value = pipeline_result(False, ["Stage 'simulate' failed: disk full"])
        mock_pipeline_class.return_value = pipeline

        result = run_command("simulate", write_config(tmp_path))

        assert not result["success"]
        assert result["error"] == "Stage 'simulate' failed: disk full"

    @patch("src.services.runner.ExperimentPipeline")
    def test_predict_without_checkpoint(self, mock_pipeline_class, tmp_path):
        result = run_command("predict", write_config(tmp_path))
        assert not result["success"]
        assert "--checkpoint" in result["error"]

    def test_output_dir_locked(self, tmp_path):
        """Занятый каталог результатов - понятная ошибка"""
        path = write_config(tmp_path)
        with file_lock(str(tmp_path / "out" / LOCK_FILE)):
            result = run_command("eval", path)

        assert not result["success"]
        assert "Could not acquire lock" in result["error"]
