# tests/services/learning/test_refine_net.py

import json

import numpy as np
import pytest

from src.config import NetworkConfig
from src.services.inertial.imu_model import ImuSequence
from src.services.learning.refine_net import (
    CheckpointError,
    NetworkError,
    Normalizer,
    ShapeMismatchError,
    backward,
    forward,
    init_params,
    load_checkpoint,
    param_names,
    param_shapes,
    refine_sequence,
    save_checkpoint,
)


@pytest.fixture
def tiny_config():
    return NetworkConfig(n_layers=2, hidden=4, window_len=8, zero_init_head=False)


@pytest.fixture
def raw_window():
    rng = np.random.default_rng(2)
    return np.concatenate([rng.normal(scale=0.3, size=(8, 3)), rng.normal(loc=3.0, size=(8, 3))], axis=1)


def scalar_loss(params, window, normalizer, config, weights):
    refined, _ = forward(params, window, normalizer, config)
    return float(np.sum(weights * refined))


class TestParams:
    """Тесты инициализации параметров"""

    def test_names_and_shapes(self, tiny_config):
        """Имена в фиксированном порядке, формы согласованы со слоями"""
        names = param_names(tiny_config)
        shapes = param_shapes(tiny_config)

        assert names[0] == "l0_fwd_W"
        assert names[-2:] == ["head_W", "head_b"]
        assert shapes["l0_fwd_W"] == (16, 6)
        assert shapes["l1_bwd_W"] == (16, 8)
        assert shapes["head_W"] == (6, 8)

    def test_forget_bias_is_one(self, tiny_config):
        """Смещение forget-гейта инициализировано единицей"""
        params = init_params(tiny_config, np.random.default_rng(0))
        bias = params["l0_fwd_b"]
        assert np.all(bias[4:8] == 1.0)
        assert np.all(bias[:4] == 0.0)

    def test_same_seed_same_params(self, tiny_config):
        """Один seed - одинаковые веса"""
        first = init_params(tiny_config, np.random.default_rng(5))
        second = init_params(tiny_config, np.random.default_rng(5))
        assert all(np.array_equal(first[name], second[name]) for name in first)


class TestForward:
    """Тесты прямого прохода"""

    def test_zero_head_is_identity(self, raw_window):
        """С нулевой головой уточнение совпадает со входом"""
        config = NetworkConfig(n_layers=1, hidden=4, window_len=8)
        params = init_params(config, np.random.default_rng(0))

        refined, _ = forward(params, raw_window, Normalizer.identity(), config)

        assert refined.shape == (8, 6)
        assert np.array_equal(refined, raw_window)

    def test_batched_input(self, tiny_config, raw_window):
        """Батч [B, T, 6] обрабатывается как отдельные окна"""
        params = init_params(tiny_config, np.random.default_rng(1))
        batch = np.stack([raw_window, raw_window[::-1]])

        refined, _ = forward(params, batch, Normalizer.identity(), tiny_config)
        single, _ = forward(params, raw_window, Normalizer.identity(), tiny_config)

        assert refined.shape == (2, 8, 6)
        assert np.allclose(refined[0], single, atol=1e-14)

    def test_imu_sequence_input(self, tiny_config, raw_window):
        """ImuSequence принимается как окно"""
        params = init_params(tiny_config, np.random.default_rng(1))
        seq = ImuSequence(t=np.arange(8) * 0.005, omega=raw_window[:, :3], accel=raw_window[:, 3:])

        from_seq, _ = forward(params, seq, Normalizer.identity(), tiny_config)
        from_array, _ = forward(params, raw_window, Normalizer.identity(), tiny_config)

        assert np.array_equal(from_seq, from_array)

    def test_wrong_window_length(self, tiny_config):
        """Окно другой длины без variable_length - ошибка"""
        params = init_params(tiny_config, np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError, match="window_len"):
            forward(params, np.zeros((9, 6)), Normalizer.identity(), tiny_config)

    def test_variable_length_allowed(self, raw_window):
        """variable_length разрешает окна другой длины"""
        config = NetworkConfig(n_layers=1, hidden=4, window_len=8, variable_length=True, zero_init_head=False)
        params = init_params(config, np.random.default_rng(0))
        refined, _ = forward(params, raw_window[:5], Normalizer.identity(), config)
        assert refined.shape == (5, 6)

    def test_wrong_channel_count(self, tiny_config):
        """Вход не из 6 каналов - ошибка"""
        params = init_params(tiny_config, np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError):
            forward(params, np.zeros((8, 5)), Normalizer.identity(), tiny_config)

    def test_dt_channel_requires_steps(self, raw_window):
        """use_dt_channel требует dt для массивного входа"""
        config = NetworkConfig(n_layers=1, hidden=4, window_len=8, use_dt_channel=True)
        params = init_params(config, np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError, match="dt"):
            forward(params, raw_window, Normalizer.identity(7), config)

        refined, _ = forward(params, raw_window, Normalizer.identity(7), config, dt=np.full(8, 0.005))
        assert refined.shape == (8, 6)

    def test_normalizer_channel_mismatch(self, tiny_config, raw_window):
        """Нормализация должна соответствовать числу каналов входа"""
        params = init_params(tiny_config, np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError, match="Нормализация"):
            forward(params, raw_window, Normalizer.identity(7), tiny_config)

    def test_missing_parameter(self, tiny_config, raw_window):
        """Неполный набор параметров - ошибка"""
        params = init_params(tiny_config, np.random.default_rng(0))
        del params.arrays["head_b"]
        with pytest.raises(ShapeMismatchError, match="отсутствуют"):
            forward(params, raw_window, Normalizer.identity(), tiny_config)


class TestBackward:
    """Сверка обратного прохода с конечными разностями"""

    def test_gradients_match_finite_differences(self, tiny_config, raw_window):
        """∂L/∂θ и ∂L/∂u совпадают с центральной разностью"""
        rng = np.random.default_rng(9)
        params = init_params(tiny_config, rng)
        normalizer = Normalizer(mean=np.r_[np.zeros(3), np.full(3, 3.0)], std=np.r_[np.full(3, 0.3), np.ones(3)])
        weights = rng.normal(size=(8, 6))

        _, cache = forward(params, raw_window, normalizer, tiny_config)
        grads, input_grads = backward(params, cache, weights)

        h = 1e-6
        for name, index in (("head_W", (2, 5)), ("l0_fwd_U", (3, 1)), ("l1_bwd_W", (10, 7)), ("l0_bwd_b", (6,))):
            plus, minus = params.copy(), params.copy()
            plus.arrays[name][index] += h
            minus.arrays[name][index] -= h
            numeric = (scalar_loss(plus, raw_window, normalizer, tiny_config, weights)
                       - scalar_loss(minus, raw_window, normalizer, tiny_config, weights)) / (2 * h)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

        for index in ((0, 0), (4, 3), (7, 5)):
            plus, minus = raw_window.copy(), raw_window.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (scalar_loss(params, plus, normalizer, tiny_config, weights)
                       - scalar_loss(params, minus, normalizer, tiny_config, weights)) / (2 * h)
            assert input_grads[index] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_gradient_shape_mismatch(self, tiny_config, raw_window):
        """Градиент неправильной формы - ошибка"""
        params = init_params(tiny_config, np.random.default_rng(0))
        _, cache = forward(params, raw_window, Normalizer.identity(), tiny_config)
        with pytest.raises(ShapeMismatchError):
            backward(params, cache, np.zeros((7, 6)))


class TestNormalizer:
    """Тесты нормализации"""

    def test_fit_and_std_floor(self):
        """Статистика по каналам, нулевая СКО поднимается до минимума"""
        features = np.zeros((10, 4, 6))
        features[..., 0] = np.arange(40).reshape(10, 4)
        normalizer = Normalizer.fit(features)

        assert normalizer.mean[0] == pytest.approx(19.5)
        assert normalizer.std[1] > 0.0
        assert normalizer.channels == 6

    def test_empty_features(self):
        """Пустой набор - ошибка"""
        with pytest.raises(NetworkError):
            Normalizer.fit(np.zeros((0, 6)))


class TestCheckpoint:
    """Тесты сохранения и загрузки чекпоинта"""

    def test_round_trip_is_exact(self, tmp_path, tiny_config, raw_window):
        """Загруженная сеть дает побитово те же выходы"""
        params = init_params(tiny_config, np.random.default_rng(3))
        normalizer = Normalizer(mean=np.linspace(-1.0, 1.0, 6), std=np.linspace(0.1, 2.0, 6))
        path = str(tmp_path / "ckpt" / "best.json")

        save_checkpoint(path, params, normalizer, tiny_config, meta={"epoch": 4})
        loaded = load_checkpoint(path)

        assert loaded.config == tiny_config
        assert loaded.meta == {"epoch": 4}
        before, _ = forward(params, raw_window, normalizer, tiny_config)
        after, _ = forward(loaded.params, raw_window, loaded.normalizer, loaded.config)
        assert np.array_equal(before, after)

    def test_missing_file(self, tmp_path):
        """Отсутствующий файл - CheckpointError"""
        with pytest.raises(CheckpointError, match="не найден"):
            load_checkpoint(str(tmp_path / "absent.json"))

    def test_corrupted_file(self, tmp_path):
        """Невалидный JSON - CheckpointError"""
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CheckpointError, match="поврежден"):
            load_checkpoint(str(path))

    def test_unknown_version(self, tmp_path, tiny_config):
        """Неизвестная версия - CheckpointError"""
        path = tmp_path / "ckpt.json"
        save_checkpoint(str(path), init_params(tiny_config, np.random.default_rng(0)),
                        Normalizer.identity(), tiny_config)
        document = json.loads(path.read_text(encoding="utf-8"))
        document["version"] = 99
        path.write_text(json.dumps(document), encoding="utf-8")

        with pytest.raises(CheckpointError, match="версия"):
            load_checkpoint(str(path))

    def test_inconsistent_shapes(self, tmp_path, tiny_config):
        """Формы параметров не совпадают с конфигурацией - CheckpointError"""
        path = tmp_path / "ckpt.json"
        save_checkpoint(str(path), init_params(tiny_config, np.random.default_rng(0)),
                        Normalizer.identity(), tiny_config)
        document = json.loads(path.read_text(encoding="utf-8"))
        document["config"]["hidden"] = 5
        path.write_text(json.dumps(document), encoding="utf-8")

        with pytest.raises(CheckpointError, match="не согласован"):
            load_checkpoint(str(path))


class TestRefineSequence:
    """Тесты уточнения целой последовательности"""

    def make_checkpoint(self, tmp_path, config, seed=0):
        path = str(tmp_path / "ckpt.json")
        save_checkpoint(path, init_params(config, np.random.default_rng(seed)), Normalizer.identity(), config)
        return load_checkpoint(path)

    def test_identity_network_returns_raw(self, tmp_path):
        """Нулевая голова: уточненная последовательность равна сырой"""
        checkpoint = self.make_checkpoint(tmp_path, NetworkConfig(n_layers=1, hidden=4, window_len=8))
        rng = np.random.default_rng(0)
        seq = ImuSequence(t=np.arange(21) * 0.005, omega=rng.normal(size=(21, 3)), accel=rng.normal(size=(21, 3)))

        refined = refine_sequence(checkpoint, seq)

        assert refined.shape == (21, 6)
        assert np.array_equal(refined, seq.measurements)

    def test_last_window_aligned_to_end(self, tmp_path, tiny_config):
        """Хвост уточняется окном, выровненным по концу"""
        checkpoint = self.make_checkpoint(tmp_path, tiny_config, seed=4)
        rng = np.random.default_rng(1)
        seq = ImuSequence(t=np.arange(20) * 0.005, omega=rng.normal(size=(20, 3)), accel=rng.normal(size=(20, 3)))

        refined = refine_sequence(checkpoint, seq)
        tail, _ = forward(checkpoint.params, seq.measurements[12:], checkpoint.normalizer, tiny_config)

        assert np.allclose(refined[12:], tail, atol=1e-14)

    def test_short_sequence(self, tmp_path, tiny_config):
        """Последовательность короче окна - ошибка"""
        checkpoint = self.make_checkpoint(tmp_path, tiny_config)
        seq = ImuSequence(t=np.arange(5) * 0.005, omega=np.zeros((5, 3)), accel=np.zeros((5, 3)))
        with pytest.raises(ShapeMismatchError, match="короче"):
            refine_sequence(checkpoint, seq)
