# tests/test_run.py

from unittest.mock import patch

import pytest

from src.run import build_parser, main


class TestParser:
    """Тесты разбора аргументов"""

    def test_overrides_accumulate(self):
        args = build_parser().parse_args(["train", "--config", "exp.json", "--set", "train.lr=0.01",
                                          "--set", "net.hidden=8", "--seed", "3", "--resume"])

        assert args.command == "train"
        assert args.overrides == ["train.lr=0.01", "net.hidden=8"]
        assert args.seed == 3
        assert args.resume

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fit", "--config", "exp.json"])

    def test_config_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval"])


class TestMain:
    """Тесты точки входа CLI"""

    @patch("src.run.run_command")
    def test_success(self, mock_run):
        mock_run.return_value = {"success": True, "command": "eval"}

        exit_code = main(["eval", "--config", "exp.json", "--checkpoint", "best.json"])

        assert exit_code == 0
        mock_run.assert_called_once_with("eval", "exp.json", overrides=[], seed=None,
                                         checkpoint="best.json", horizon=None, resume=False)

    @patch("src.run.run_command")
    def test_failure(self, mock_run):
        mock_run.return_value = {"success": False, "command": "train", "error": "Stage 'train' failed"}
        assert main(["train", "--config", "exp.json"]) == 1

    @patch("src.run.run_command", side_effect=Exception("Critical error"))
    def test_exception(self, mock_run):
        assert main(["simulate", "--config", "exp.json"]) == 1

    @patch("src.run.run_command")
    def test_predict_requires_checkpoint(self, mock_run):
        """predict без --checkpoint завершается до запуска команды"""
        assert main(["predict", "--config", "exp.json"]) == 1
        mock_run.assert_not_called()

    @patch("src.run.run_command")
    def test_predict_horizon(self, mock_run):
        mock_run.return_value = {"success": True, "command": "predict"}

        main(["predict", "--config", "exp.json", "--checkpoint", "best.json", "--horizon", "2.5"])

        assert mock_run.call_args.kwargs["horizon"] == 2.5
