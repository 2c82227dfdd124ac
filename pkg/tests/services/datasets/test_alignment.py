# tests/services/datasets/test_alignment.py

import numpy as np
import pytest

from src.services.datasets.alignment import align_ground_truth, derive_velocity
from src.services.datasets.base import (
    Dataset,
    DatasetError,
    EmptyOverlapError,
    GroundTruth,
    InsufficientDataError,
)
from src.services.inertial.imu_model import ImuSequence
from src.services.inertial.so3_math import exp_so3


def imu_on(t):
    t = np.asarray(t, dtype=np.float64)
    return ImuSequence(t=t, omega=np.zeros((len(t), 3)), accel=np.zeros((len(t), 3)))


class TestGroundTruth:
    """Тесты контейнера ground truth"""

    def test_quaternions_are_normalized(self):
        """Кватернионы нормируются при создании"""
        gt = GroundTruth(t=[0.0], q=[[2.0, 0.0, 0.0, 0.0]], p=[[0.0, 0.0, 0.0]])
        assert np.allclose(gt.q, [[1.0, 0.0, 0.0, 0.0]])

    def test_length_mismatch(self):
        """Разные длины полей - ошибка"""
        with pytest.raises(DatasetError, match="не совпадают"):
            GroundTruth(t=[0.0, 1.0], q=[[1.0, 0.0, 0.0, 0.0]], p=np.zeros((2, 3)))

    def test_state_requires_velocity(self):
        """Состояние без скоростей недоступно"""
        gt = GroundTruth(t=[0.0], q=[[1.0, 0.0, 0.0, 0.0]], p=[[0.0, 0.0, 0.0]])
        with pytest.raises(DatasetError, match="derive_velocity"):
            gt.state(0)

    def test_slice_requires_alignment(self):
        """Срез по индексам только для выровненного датасета"""
        gt = GroundTruth(t=[0.0, 1.0], q=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), p=np.zeros((2, 3)))
        dataset = Dataset(imu=imu_on([0.0, 0.5, 1.0]), gt=gt)
        with pytest.raises(DatasetError):
            dataset.slice(0, 2)


class TestDeriveVelocity:
    """Тесты оценки скорости по позициям"""

    def test_sinusoid_on_uniform_grid(self):
        """На равномерной сетке 100 Гц ошибка меньше 1e-4 м/с"""
        t = np.arange(500) / 100.0
        omega = 2.0 * np.pi * 0.3
        positions = np.stack([np.sin(omega * t), np.cos(omega * t), 0.5 * t], axis=1)
        expected = np.stack([omega * np.cos(omega * t), -omega * np.sin(omega * t), np.full_like(t, 0.5)], axis=1)

        velocity = derive_velocity(t, positions)

        assert np.max(np.abs(velocity - expected)) < 1e-4

    def test_non_uniform_grid_is_exact_for_linear_motion(self):
        """Линейное движение восстанавливается на неравномерной сетке"""
        t = np.array([0.0, 0.01, 0.025, 0.03, 0.05, 0.07])
        positions = np.outer(t, [1.0, -2.0, 0.5])
        assert np.allclose(derive_velocity(t, positions), [[1.0, -2.0, 0.5]] * len(t))

    def test_smoothing_keeps_shape(self):
        """Сглаживание не меняет форму результата"""
        t = np.arange(50) / 100.0
        velocity = derive_velocity(t, np.outer(t, [1.0, 0.0, 0.0]), smoothing=5)
        assert velocity.shape == (50, 3)
        assert np.allclose(velocity[:, 0], 1.0)

    def test_too_few_poses(self):
        """Меньше трех поз - ошибка"""
        with pytest.raises(InsufficientDataError):
            derive_velocity([0.0, 1.0], np.zeros((2, 3)))


class TestAlignGroundTruth:
    """Тесты пересэмплирования ground truth на метки IMU"""

    def test_interpolates_position_and_slerps_orientation(self):
        """Позиция линейно, ориентация по кратчайшей дуге"""
        gt = GroundTruth(t=[0.0, 1.0, 2.0],
                         q=exp_so3(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.2], [0.0, 0.0, 0.4]])),
                         p=[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [2.0, 4.0, 0.0]],
                         v=[[1.0, 2.0, 0.0]] * 3)
        dataset = Dataset(imu=imu_on([0.0, 0.5, 1.0, 1.5, 2.0]), gt=gt)

        aligned = align_ground_truth(dataset)

        assert aligned.is_aligned
        assert np.allclose(aligned.gt.p[1], [0.5, 1.0, 0.0])
        assert np.allclose(aligned.gt.q[3], exp_so3([0.0, 0.0, 0.3]), atol=1e-12)
        assert np.array_equal(aligned.gt.q[2], gt.q[1])

    def test_drops_imu_outside_ground_truth(self):
        """Отсчеты IMU вне интервала ground truth отбрасываются"""
        gt = GroundTruth(t=[1.0, 2.0], q=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), p=np.zeros((2, 3)),
                         v=np.zeros((2, 3)))
        dataset = Dataset(imu=imu_on(np.arange(0.0, 3.01, 0.5)), gt=gt)

        aligned = align_ground_truth(dataset)

        assert aligned.imu.t.tolist() == [1.0, 1.5, 2.0]

    def test_derives_missing_velocity(self):
        """Без скоростей они оцениваются по позициям"""
        t = np.arange(11) / 10.0
        gt = GroundTruth(t=t, q=np.tile([1.0, 0.0, 0.0, 0.0], (11, 1)), p=np.outer(t, [2.0, 0.0, 0.0]))
        aligned = align_ground_truth(Dataset(imu=imu_on(t), gt=gt))
        assert aligned.gt.has_velocity
        assert np.allclose(aligned.gt.v[:, 0], 2.0)

    def test_no_overlap(self):
        """Непересекающиеся интервалы - EmptyOverlapError"""
        gt = GroundTruth(t=[5.0, 6.0], q=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), p=np.zeros((2, 3)),
                         v=np.zeros((2, 3)))
        with pytest.raises(EmptyOverlapError):
            align_ground_truth(Dataset(imu=imu_on([0.0, 1.0]), gt=gt))

    def test_aligned_dataset_is_returned_as_is(self):
        """Уже выровненный датасет со скоростями не пересчитывается"""
        t = np.array([0.0, 0.1])
        gt = GroundTruth(t=t, q=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), p=np.zeros((2, 3)), v=np.zeros((2, 3)))
        dataset = Dataset(imu=imu_on(t), gt=gt)
        assert align_ground_truth(dataset) is dataset
