# tests/services/learning/test_trainer.py

import math
import os
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from src.config import DataConfig, ImuIntrinsics, LossConfig, NetworkConfig, SinusoidTerm, TrainConfig, TrajectorySpec
from src.services.datasets.alignment import align_ground_truth
from src.services.datasets.simulator import simulate
from src.services.datasets.windows import make_splits
from src.services.evaluation.metrics import drift_curve, relative_pose_rmse
from src.services.learning.losses import LossBreakdown, resolve_lambda
from src.services.learning.refine_net import NetworkParams, load_checkpoint, refine_sequence
from src.services.learning.trainer import (
    CHECKPOINT_FILE,
    METRICS_COLUMNS,
    METRICS_FILE,
    STATE_FILE,
    AdamState,
    DivergenceError,
    NonFiniteGradientError,
    Trainer,
    TrainingError,
    adam_step,
    clip_gradients,
    train,
)


def tiny_data_config(duration=6.0, rate=100.0, intrinsics=None):
    intrinsics = intrinsics or ImuIntrinsics(sigma_g=1e-4, sigma_a=1e-3, initial_bg=(0.01, -0.01, 0.005),
                                             initial_ba=(0.1, -0.05, 0.08))
    spec = TrajectorySpec(
        duration=duration,
        imu_rate=rate,
        position_terms=[SinusoidTerm(amplitude=(1.0, 0.6, 0.2), frequency=(0.3, 0.2, 0.4), phase=(0.0, 1.0, 0.3))],
        attitude_terms=[SinusoidTerm(amplitude=(0.2, 0.1, 0.3), frequency=(0.25, 0.3, 0.2), phase=(0.4, 0.0, 1.0))],
        intrinsics=intrinsics,
        seed=1,
    )
    return DataConfig(simulation=spec, stride=10, val_fraction=0.2, test_fraction=0.25,
                      augmentation={"random_offset": False})


def build_splits(data, window_len, fractions):
    dataset = align_ground_truth(simulate(data.simulation).dataset)
    return dataset, make_splits(dataset, data, window_len, fractions, np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny_setup():
    data = tiny_data_config()
    net = NetworkConfig(n_layers=1, hidden=4, window_len=20)
    loss = LossConfig(horizon_fractions=[0.5, 1.0])
    dataset, splits = build_splits(data, net.window_len, loss.horizon_fractions)
    lam = resolve_lambda(loss, dataset.meta.noise, 100.0)
    return net, loss, lam, splits


def make_trainer(tiny_setup, output_dir=None, threads=1, **train_kwargs):
    net, loss, lam, _ = tiny_setup
    config = TrainConfig(**{"lr": 3e-3, "batch_size": 8, "max_epochs": 2, "seed": 4, **train_kwargs})
    return Trainer(net, loss, config, lam, output_dir=output_dir, threads=threads)


def single_group(value):
    return NetworkParams({"w": np.asarray(value, dtype=np.float64)})


class TestAdam:
    """Тесты шага оптимизатора"""

    def test_first_step_moves_by_lr_against_sign(self):
        """Первый шаг Adam равен -lr·sign(g) с точностью до eps"""
        params = single_group(np.zeros(4))
        grads = single_group([0.5, -2.0, 1e-3, -7.0])
        config = TrainConfig(lr=0.01, grad_clip=None)

        updated, state = adam_step(params, grads, AdamState.zeros(params), config)

        assert state.step == 1
        assert np.allclose(updated["w"], -0.01 * np.sign(grads["w"]), rtol=1e-4)

    def test_zero_gradient_keeps_params(self):
        """Нулевой градиент не меняет веса"""
        params = single_group([1.0, -1.0])
        updated, _ = adam_step(params, single_group(np.zeros(2)), AdamState.zeros(params), TrainConfig())
        assert np.array_equal(updated["w"], params["w"])

    def test_non_finite_gradient(self):
        """inf в градиенте - NonFiniteGradientError с именем группы"""
        params = single_group(np.zeros(2))
        with pytest.raises(NonFiniteGradientError) as exc_info:
            adam_step(params, single_group([np.inf, 0.0]), AdamState.zeros(params), TrainConfig())
        assert exc_info.value.group == "w"
        assert "group: w" in str(exc_info.value)

    def test_mismatched_gradient_shape(self):
        """Форма градиента не совпадает с весами - ошибка"""
        params = single_group(np.zeros(2))
        with pytest.raises(TrainingError, match="не согласован"):
            adam_step(params, single_group(np.zeros(3)), AdamState.zeros(params), TrainConfig())

    def test_clip_gradients(self):
        """Глобальная норма ограничивается сверху"""
        grads = single_group([3.0, 4.0])
        clipped, norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.allclose(clipped["w"], [0.6, 0.8])

        unchanged, _ = clip_gradients(grads, None)
        assert unchanged is grads


class TestTrainer:
    """Тесты цикла обучения"""

    def test_zero_epochs_logs_initial_model(self, tiny_setup, tmp_path):
        """max_epochs=0: только эпоха 0 и чекпоинт инициализированной сети"""
        _, _, _, splits = tiny_setup
        trainer = make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=0)

        result = trainer.fit(splits["train"], splits["val"])

        assert [row.epoch for row in result.metrics] == [0]
        assert result.best_epoch == 0
        assert result.metrics[0].ld == 0.0
        metrics = pd.read_csv(tmp_path / METRICS_FILE)
        assert list(metrics.columns) == METRICS_COLUMNS
        assert load_checkpoint(str(tmp_path / CHECKPOINT_FILE)).meta["epoch"] == 0
        assert os.path.exists(tmp_path / STATE_FILE)

    def test_same_seed_same_run(self, tiny_setup):
        """Повторный запуск с тем же seed дает те же веса и потери"""
        _, _, _, splits = tiny_setup
        first = make_trainer(tiny_setup, threads=2).fit(splits["train"], splits["val"])
        second = make_trainer(tiny_setup, threads=2).fit(splits["train"], splits["val"])

        assert [m.val_loss for m in first.metrics] == [m.val_loss for m in second.metrics]
        for name in first.checkpoint.params:
            assert np.array_equal(first.checkpoint.params[name], second.checkpoint.params[name])

    def test_best_checkpoint_tracks_minimum(self, tiny_setup):
        """Лучшая эпоха соответствует минимуму валидационной потери"""
        _, _, _, splits = tiny_setup
        result = make_trainer(tiny_setup, max_epochs=3).fit(splits["train"], splits["val"])

        losses = [m.val_loss for m in result.metrics]
        assert result.best_val_loss == min(losses)
        assert result.metrics[result.best_epoch].val_loss == result.best_val_loss
        assert result.checkpoint.meta["epoch"] == result.best_epoch

    def test_resume_continues_epochs(self, tiny_setup, tmp_path):
        """Возобновление продолжает нумерацию и повторяет непрерывный запуск"""
        _, _, _, splits = tiny_setup
        resumed_dir, straight_dir = tmp_path / "resumed", tmp_path / "straight"

        make_trainer(tiny_setup, output_dir=str(resumed_dir), max_epochs=2).fit(splits["train"], splits["val"])
        resumed = make_trainer(tiny_setup, output_dir=str(resumed_dir), max_epochs=4).fit(
            splits["train"], splits["val"], resume=True)
        straight = make_trainer(tiny_setup, output_dir=str(straight_dir), max_epochs=4).fit(
            splits["train"], splits["val"])

        logged = pd.read_csv(resumed_dir / METRICS_FILE)
        assert logged["epoch"].tolist() == [0, 1, 2, 3, 4]
        assert [m.epoch for m in resumed.metrics] == [3, 4]
        assert resumed.metrics[-1].val_loss == pytest.approx(straight.metrics[-1].val_loss, rel=1e-12)
        assert resumed.best_epoch == straight.best_epoch

    @pytest.mark.parametrize("changes", [{"lr": 1e-3}, {"seed": 5}])
    def test_resume_with_other_train_config(self, tiny_setup, tmp_path, changes):
        """Состояние с другим lr или seed не подхватывается"""
        _, _, _, splits = tiny_setup
        make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=1).fit(splits["train"], splits["val"])

        with pytest.raises(TrainingError, match=f"train.{next(iter(changes))}"):
            make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=2, **changes).fit(
                splits["train"], splits["val"], resume=True)

    def test_resume_with_other_network(self, tiny_setup, tmp_path):
        """Состояние сети другой формы не подхватывается"""
        _, loss, lam, splits = tiny_setup
        make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=1).fit(splits["train"], splits["val"])
        wider = Trainer(NetworkConfig(n_layers=1, hidden=6, window_len=20), loss,
                        TrainConfig(lr=3e-3, batch_size=8, max_epochs=2, seed=4), lam, output_dir=str(tmp_path))

        with pytest.raises(TrainingError, match="net"):
            wider.fit(splits["train"], splits["val"], resume=True)

    def test_checkpoint_reproduces_val_loss(self, tiny_setup, tmp_path):
        """Загруженный чекпоинт дает записанную в нем валидационную потерю"""
        _, _, _, splits = tiny_setup
        trainer = make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=2)
        trainer.fit(splits["train"], splits["val"])

        checkpoint = load_checkpoint(str(tmp_path / CHECKPOINT_FILE))
        recomputed = trainer.dataset_loss(checkpoint.params, checkpoint.normalizer, splits["val"])

        assert recomputed.total == pytest.approx(checkpoint.meta["val_loss"], abs=1e-9)

    def test_fresh_run_replaces_metrics(self, tiny_setup, tmp_path):
        """Новый запуск без resume начинает журнал заново"""
        _, _, _, splits = tiny_setup
        make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=1).fit(splits["train"], splits["val"])
        make_trainer(tiny_setup, output_dir=str(tmp_path), max_epochs=1).fit(splits["train"], splits["val"])
        assert pd.read_csv(tmp_path / METRICS_FILE)["epoch"].tolist() == [0, 1]

    def test_wrong_split_tags(self, tiny_setup):
        """Окна другого сплита в обучающем наборе - ошибка"""
        _, _, _, splits = tiny_setup
        trainer = make_trainer(tiny_setup)
        with pytest.raises(TrainingError, match="train"):
            trainer.fit(splits["val"], splits["val"])
        with pytest.raises(TrainingError, match="val"):
            trainer.fit(splits["train"], splits["train"])

    def test_empty_validation(self, tiny_setup):
        """Пустой валидационный набор - ошибка"""
        _, _, _, splits = tiny_setup
        with pytest.raises(TrainingError, match="непустые"):
            make_trainer(tiny_setup).fit(splits["train"], [])

    def test_divergence_is_reported(self, tiny_setup):
        """Нечисловая валидационная потеря останавливает обучение"""
        _, _, _, splits = tiny_setup
        finite = LossBreakdown(total=1.0, lq=0.25, lv=0.25, lp=0.25, ld=0.25, grad=np.zeros(0))
        nan = LossBreakdown(total=math.nan, lq=math.nan, lv=0.0, lp=0.0, ld=0.0, grad=np.zeros(0))

        with patch.object(Trainer, "dataset_loss", side_effect=[finite, finite, nan]):
            with pytest.raises(DivergenceError) as exc_info:
                make_trainer(tiny_setup).fit(splits["train"], splits["val"])
        assert exc_info.value.epoch == 1

    def test_cosine_schedule(self, tiny_setup):
        """Косинусное затухание начинается с lr и убывает"""
        trainer = make_trainer(tiny_setup, cosine_decay=True, max_epochs=10)
        rates = [trainer._learning_rate(epoch) for epoch in range(1, 11)]
        assert rates[0] == pytest.approx(3e-3)
        assert all(b < a for a, b in zip(rates, rates[1:]))

    def test_early_stop(self, tiny_setup):
        """Без улучшения валидации обучение останавливается по patience"""
        _, _, _, splits = tiny_setup
        flat = LossBreakdown(total=1.0, lq=0.25, lv=0.25, lp=0.25, ld=0.25, grad=np.zeros(0))
        with patch.object(Trainer, "dataset_loss", return_value=flat):
            result = make_trainer(tiny_setup, max_epochs=10, early_stop_patience=2).fit(
                splits["train"], splits["val"])
        assert result.stopped_early
        assert result.metrics[-1].epoch == 2


@pytest.mark.slow
class TestTrainingAcceptance:
    """Обучение на короткой синтетической последовательности"""

    def test_constant_bias_without_noise(self):
        """Без шума, только постоянные смещения: валидация падает в 10 раз за 50 эпох"""
        intrinsics = ImuIntrinsics(initial_bg=(0.01, -0.01, 0.005), initial_ba=(0.1, -0.05, 0.08))
        data = tiny_data_config(intrinsics=intrinsics)
        net = NetworkConfig(n_layers=1, hidden=4, window_len=20)
        # σ = 0 дает λ = 0, поэтому мертвая зона задается явно
        loss = LossConfig(horizon_fractions=[0.5, 1.0], lambda_reg=0.5)
        dataset, splits = build_splits(data, net.window_len, loss.horizon_fractions)
        lam = resolve_lambda(loss, dataset.meta.noise, 100.0)
        config = TrainConfig(lr=1e-2, batch_size=8, max_epochs=50, cosine_decay=True, seed=0)

        result = train(splits["train"], splits["val"], net, loss, config, lam)

        assert result.best_val_loss <= 0.1 * result.metrics[0].val_loss

    def test_training_corrects_biases(self, tmp_path):
        """Валидация и относительная ошибка на тесте падают не меньше чем на 30%, L_d остается малой"""
        intrinsics = ImuIntrinsics(sigma_g=2e-4, sigma_a=3e-3, sigma_bg_walk=1e-5, sigma_ba_walk=1e-4,
                                   initial_bg=(0.005, -0.004, 0.003), initial_ba=(0.08, -0.05, 0.06))
        data = tiny_data_config(duration=24.0, rate=200.0, intrinsics=intrinsics)
        net = NetworkConfig(n_layers=1, hidden=8, window_len=40)
        loss = LossConfig(horizon_fractions=[0.5, 1.0])
        dataset, splits = build_splits(data, net.window_len, loss.horizon_fractions)
        lam = resolve_lambda(loss, dataset.meta.noise, 200.0)
        config = TrainConfig(lr=3e-3, batch_size=16, max_epochs=40, seed=0)

        result = train(splits["train"], splits["val"], net, loss, config, lam, output_dir=str(tmp_path))

        assert result.metrics[0].ld == 0.0
        assert result.best_val_loss <= 0.7 * result.metrics[0].val_loss
        assert all(m.ld <= 0.05 * m.val_loss for m in result.metrics if m.epoch >= 10)

        test_start = splits["test"][0].start
        test_set = dataset.slice(test_start, len(dataset.imu), name="test")
        refined = refine_sequence(result.checkpoint, test_set.imu)
        raw_trans, raw_rot = relative_pose_rmse(test_set)
        refined_trans, refined_rot = relative_pose_rmse(test_set, refined)
        assert refined_trans <= 0.7 * raw_trans
        assert refined_rot <= 0.7 * raw_rot

        horizons = (0.1, 0.5, 1.0, 2.0)
        for raw_point, refined_point in zip(drift_curve(test_set, horizons=horizons),
                                            drift_curve(test_set, refined, horizons=horizons)):
            assert refined_point.pos_rmse < raw_point.pos_rmse
            assert refined_point.rot_rmse < raw_point.rot_rmse
