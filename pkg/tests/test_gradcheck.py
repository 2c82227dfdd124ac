# tests/test_gradcheck.py

from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from src.config import build_experiment_config
from src.gradcheck import (
    TABLE_COLUMNS,
    TOLERANCE,
    CheckResult,
    format_table,
    main,
    numeric_gradient,
    numeric_jacobian,
    relative_error,
    run_gradchecks,
    write_table,
)


@pytest.fixture(scope="module")
def results():
    config = build_experiment_config({"data": {"simulation": {"duration": 1.0}},
                                      "loss": {"horizon_fractions": [0.5, 1.0]}, "seed": 2})
    return run_gradchecks(config)


class TestNumericHelpers:
    """Тесты конечных разностей"""

    def test_gradient_of_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        grad = numeric_gradient(lambda v: float(np.sum(v ** 2)), x.copy())
        assert np.allclose(grad, 2.0 * x, atol=1e-8)

    def test_input_is_restored(self):
        x = np.array([1.0, 2.0, 3.0])
        numeric_gradient(lambda v: float(np.sum(v)), x)
        assert x.tolist() == [1.0, 2.0, 3.0]

    def test_jacobian_layout(self):
        """Якобиан [выход, вход]"""
        matrix = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 4.0]])
        jac = numeric_jacobian(lambda v: matrix @ v, np.zeros(3))
        assert np.allclose(jac, matrix, atol=1e-8)

    def test_relative_error(self):
        assert relative_error([3.0, 4.0], [3.0, 4.0]) == 0.0
        assert relative_error([1.0, 0.0], [0.0, 0.0]) == pytest.approx(1.0)
        assert relative_error([0.0], [0.0]) == 0.0


class TestRunGradchecks:
    """Полный набор проверок на крошечной сети"""

    def test_all_checks_pass(self, results):
        failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
        assert failed == []

    def test_coverage(self, results):
        """Проверены обе схемы, все потери, каждая группа весов и сквозной градиент"""
        names = [r.name for r in results]

        assert "preint/euler/gamma_accel" in names
        assert "preint/midpoint/theta_omega" in names
        assert "loss/rotation_augmented" in names
        assert "loss/reg" in names
        assert "loss/multi_horizon_augmented" in names
        assert "net/head_W" in names
        assert "net/input" in names
        assert names[-1] == "end_to_end"
        assert all(r.tolerance == TOLERANCE for r in results)

    def test_deterministic(self, results):
        config = build_experiment_config({"data": {"simulation": {"duration": 1.0}},
                                          "loss": {"horizon_fractions": [0.5, 1.0]}, "seed": 2})
        again = run_gradchecks(config)
        assert [r.max_rel_error for r in again] == [r.max_rel_error for r in results]


class TestTable:
    """Тесты вывода таблицы"""

    def test_format(self):
        text = format_table([CheckResult("net/head_W", 1.2e-8, TOLERANCE, True, 24),
                             CheckResult("loss/reg", 0.5, TOLERANCE, False, 48)])
        lines = text.splitlines()

        assert len(lines) == 3
        assert "PASS" in lines[1]
        assert "FAIL" in lines[2]

    def test_write_csv(self, tmp_path):
        path = write_table([CheckResult("end_to_end", 3e-7, TOLERANCE, True, 120)],
                           str(tmp_path / "nested" / "gradcheck.csv"))
        frame = pd.read_csv(path)

        assert list(frame.columns) == TABLE_COLUMNS
        assert frame["n_entries"].tolist() == [120]


class TestMain:
    """Тесты точки входа"""

    @pytest.mark.parametrize("passed, code", [(True, 0), (False, 1)])
    @patch("src.gradcheck.run_gradchecks")
    @patch("src.services.runner.load_experiment_config")
    def test_exit_code(self, mock_load, mock_run, passed, code):
        mock_run.return_value = [CheckResult("end_to_end", 0.0, TOLERANCE, passed, 1)]

        with patch("sys.argv", ["gradcheck", "--config", "experiment.json"]):
            with pytest.raises(SystemExit) as exc_info:
                main()

        assert exc_info.value.code == code
        mock_load.assert_called_once_with("experiment.json")
