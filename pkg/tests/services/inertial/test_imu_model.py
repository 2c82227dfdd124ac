# tests/services/inertial/test_imu_model.py

import numpy as np
import pytest

from src.config import GravityModel, ImuIntrinsics
from src.services.inertial.imu_model import (
    BiasState,
    ImuModelError,
    ImuSample,
    ImuSequence,
    ImuState,
    NonMonotonicTimestampsError,
    corrupt,
    corrupt_sequence,
    true_body_accel,
)
from src.services.inertial.so3_math import exp_so3


class TestImuSequence:
    """Тесты контейнера последовательности"""

    def test_round_trip_through_samples(self):
        """from_samples(to_samples()) сохраняет значения"""
        seq = ImuSequence(t=[0.0, 0.005, 0.01], omega=np.arange(9.0).reshape(3, 3),
                          accel=np.ones((3, 3)))
        rebuilt = ImuSequence.from_samples(seq.to_samples())
        assert np.array_equal(rebuilt.t, seq.t)
        assert np.array_equal(rebuilt.measurements, seq.measurements)

    def test_non_monotonic_timestamps_rejected(self):
        """Метки должны строго возрастать"""
        with pytest.raises(NonMonotonicTimestampsError):
            ImuSequence(t=[0.0, 0.01, 0.01], omega=np.zeros((3, 3)), accel=np.zeros((3, 3)))

    def test_length_mismatch_rejected(self):
        """Длины t, omega и accel должны совпадать"""
        with pytest.raises(ImuModelError, match="Длины не совпадают"):
            ImuSequence(t=[0.0, 0.01], omega=np.zeros((3, 3)), accel=np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        """nan в измерениях - ошибка"""
        omega = np.zeros((2, 3))
        omega[1, 0] = np.nan
        with pytest.raises(ImuModelError):
            ImuSequence(t=[0.0, 0.01], omega=omega, accel=np.zeros((2, 3)))

    def test_slice_and_with_measurements(self):
        """Срез и замена измерений не трогают исходник"""
        seq = ImuSequence(t=np.arange(5) * 0.01, omega=np.zeros((5, 3)), accel=np.zeros((5, 3)))
        part = seq.slice(1, 4)
        assert len(part) == 3
        assert part.t[0] == pytest.approx(0.01)

        replaced = seq.with_measurements(np.ones((5, 6)))
        assert np.all(replaced.omega == 1.0)
        assert np.all(seq.omega == 0.0)


class TestImuState:
    """Тесты состояния"""

    def test_defaults(self):
        """По умолчанию единичная ориентация и нулевые векторы"""
        state = ImuState()
        assert np.array_equal(state.q, [1.0, 0.0, 0.0, 0.0])
        assert np.array_equal(state.v, np.zeros(3))

    def test_quaternion_is_normalized(self):
        """Кватернион нормируется при создании"""
        state = ImuState(q=np.array([2.0, 0.0, 0.0, 0.0]))
        assert np.allclose(state.q, [1.0, 0.0, 0.0, 0.0])


class TestCorrupt:
    """Тесты модели измерений"""

    def test_noiseless_biased_measurement(self):
        """Без шума измерение равно истине плюс смещение"""
        intrinsics = ImuIntrinsics()
        bias = BiasState(bg=np.array([0.01, 0.0, -0.02]), ba=np.array([0.1, 0.2, 0.3]))
        sample, next_bias = corrupt([0.1, 0.2, 0.3], [0.0, 0.0, 9.8], intrinsics,
                                    np.random.default_rng(0), bias, dt=0.005)

        assert isinstance(sample, ImuSample)
        assert np.allclose(sample.omega, [0.11, 0.2, 0.28])
        assert np.allclose(sample.accel, [0.1, 0.2, 10.1])
        assert np.array_equal(next_bias.bg, bias.bg)

    def test_non_positive_dt_rejected(self):
        """dt <= 0 - ошибка"""
        with pytest.raises(ImuModelError, match="dt"):
            corrupt(np.zeros(3), np.zeros(3), ImuIntrinsics(), np.random.default_rng(0),
                    BiasState(np.zeros(3), np.zeros(3)), dt=0.0)

    def test_white_noise_scale(self):
        """СКО белого шума равно σ/√dt"""
        rate = 200.0
        t = np.arange(20000) / rate
        intrinsics = ImuIntrinsics(sigma_g=1e-3, sigma_a=2e-2)
        seq, _, _ = corrupt_sequence(t, np.zeros((len(t), 3)), np.zeros((len(t), 3)), intrinsics,
                                     np.random.default_rng(3))

        assert np.std(seq.omega) == pytest.approx(1e-3 * np.sqrt(rate), rel=0.03)
        assert np.std(seq.accel) == pytest.approx(2e-2 * np.sqrt(rate), rel=0.03)

    def test_bias_random_walk_variance(self):
        """Дисперсия смещения растет как σ_walk²·t"""
        rate, duration = 100.0, 5.0
        t = np.arange(int(duration * rate)) / rate
        intrinsics = ImuIntrinsics(sigma_bg_walk=1e-3)
        finals = []
        for seed in range(150):
            _, bg, _ = corrupt_sequence(t, np.zeros((len(t), 3)), np.zeros((len(t), 3)), intrinsics,
                                        np.random.default_rng(seed))
            finals.append(bg[-1])
        expected = (1e-3) ** 2 * (len(t) - 1) / rate
        assert np.var(np.array(finals)) == pytest.approx(expected, rel=0.25)

    def test_same_seed_same_sequence(self):
        """Один seed - одинаковые измерения"""
        t = np.arange(100) / 200.0
        intrinsics = ImuIntrinsics(sigma_g=1e-3, sigma_a=1e-2, sigma_bg_walk=1e-4)
        first, _, _ = corrupt_sequence(t, np.zeros((100, 3)), np.zeros((100, 3)), intrinsics,
                                       np.random.default_rng(5))
        second, _, _ = corrupt_sequence(t, np.zeros((100, 3)), np.zeros((100, 3)), intrinsics,
                                        np.random.default_rng(5))
        assert np.array_equal(first.measurements, second.measurements)

    def test_misalignment_applied_before_bias(self):
        """Матрица перекоса применяется к истинному значению"""
        scale = ((1.1, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
        intrinsics = ImuIntrinsics(gyro_misalignment=scale)
        bias = BiasState(bg=np.array([0.5, 0.0, 0.0]), ba=np.zeros(3))
        sample, _ = corrupt([1.0, 0.0, 0.0], np.zeros(3), intrinsics, np.random.default_rng(0), bias, dt=0.01)
        assert sample.omega[0] == pytest.approx(1.6)


class TestTrueBodyAccel:
    """Тесты удельной силы"""

    def test_static_level_reads_minus_gravity(self):
        """В покое при горизонтальной ориентации a = -g"""
        accel = true_body_accel([1.0, 0.0, 0.0, 0.0], np.zeros(3), GravityModel(g=(0.0, 0.0, -9.81)))
        assert np.allclose(accel, [0.0, 0.0, 9.81])

    def test_rotated_body(self):
        """Поворот на π/2 вокруг x переносит гравитацию на ось y"""
        q = exp_so3([np.pi / 2, 0.0, 0.0])
        accel = true_body_accel(q, np.zeros(3), GravityModel(g=(0.0, 0.0, -9.81)))
        assert np.allclose(accel, [0.0, 9.81, 0.0], atol=1e-12)
