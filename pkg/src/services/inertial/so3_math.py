# /src/services/inertial/so3_math.py
"""
Кватернионы и примитивы SO(3)

Соглашение: кватернион Гамильтона, скаляр первым, массив [..., (w, x, y, z)].
Как ориентация кватернион q означает поворот из {I} в {G} (^G_I R = quat_to_rot(q)).
Перевод из JPL: q_hamilton = (q4, -q1, -q2, -q3) для JPL (q1, q2, q3, q4).

Все функции векторизованы по ведущим осям массивов.
"""

import numpy as np
import numpy.typing as npt

Quaternion = npt.NDArray[np.float64]
Vec3 = npt.NDArray[np.float64]
Matrix3 = npt.NDArray[np.float64]

IDENTITY_QUAT: Quaternion = np.array([1.0, 0.0, 0.0, 0.0])

# Порог переключения на ряд Тейлора для exp/log
SMALL_ANGLE = 1e-6
# Порог ряда Тейлора для коэффициентов якобианов SO(3)
JACOBIAN_SMALL_ANGLE = 1e-3


def quat_normalize(q: npt.ArrayLike) -> Quaternion:
    """Нормирует кватернион(ы) к единичной длине"""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q: npt.ArrayLike) -> Quaternion:
    """Выбирает представителя с w >= 0 (двойное покрытие)"""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_mul(a: npt.ArrayLike, b: npt.ArrayLike) -> Quaternion:
    """
    Произведение Гамильтона a ⊗ b с перенормировкой

    Args:
        a: Кватернион(ы) [..., 4]
        b: Кватернион(ы) [..., 4]

    Returns:
        Единичный кватернион a ⊗ b
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    product = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)
    return quat_normalize(product)


def quat_inv(q: npt.ArrayLike) -> Quaternion:
    """Обратный единичный кватернион (сопряжение)"""
    q = quat_normalize(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def exp_so3(v: npt.ArrayLike) -> Quaternion:
    """
    Экспонента: вектор вращения (ось·угол, рад) -> единичный кватернион

    При |v| < 1e-6 используется ряд Тейлора.

    Args:
        v: Вектор(ы) вращения [..., 3]

    Returns:
        Кватернион(ы) [..., 4]
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe_theta = np.where(small, 1.0, theta)

    half = 0.5 * theta
    w = np.where(small, 1.0 - theta * theta / 8.0, np.cos(half))
    scale = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe_theta)
    return quat_normalize(np.concatenate([w, v * scale], axis=-1))


def log_so3(q: npt.ArrayLike) -> Vec3:
    """
    Логарифм SO(3): единичный кватернион -> вектор вращения (рад), |v| <= π

    Перед вычислением кватернион приводится к полусфере w >= 0.

    Args:
        q: Кватернион(ы) [..., 4]

    Returns:
        Вектор(ы) вращения [..., 3]
    """
    q = quat_canonical(quat_normalize(q))
    w = q[..., :1]
    xyz = q[..., 1:]
    n = np.linalg.norm(xyz, axis=-1, keepdims=True)
    small = n < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)

    general = 2.0 * np.arctan2(n, w) / safe_n
    taylor = 2.0 / safe_w * (1.0 - n * n / (3.0 * safe_w * safe_w))
    return xyz * np.where(small, taylor, general)


def quat_to_rot(q: npt.ArrayLike) -> Matrix3:
    """Кватернион -> матрица поворота [..., 3, 3]"""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)


def quat_rotate(q: npt.ArrayLike, v: npt.ArrayLike) -> Vec3:
    """Поворот вектора: R(q)·v"""
    return np.einsum("...ij,...j->...i", quat_to_rot(q), np.asarray(v, dtype=np.float64))


def skew(v: npt.ArrayLike) -> Matrix3:
    """Кососимметричная матрица [v]×"""
    v = np.asarray(v, dtype=np.float64)
    zero = np.zeros(v.shape[:-1])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)


def right_jacobian(v: npt.ArrayLike) -> Matrix3:
    """
    Правый якобиан SO(3): Exp(v + δ) ≈ Exp(v)·Exp(Jr(v)·δ)

    Args:
        v: Вектор(ы) вращения [..., 3]

    Returns:
        Jr [..., 3, 3]
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    small = theta < JACOBIAN_SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta

    a = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * np.sin(0.5 * safe) ** 2 / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (safe - np.sin(safe)) / safe ** 3)
    k = skew(v)
    return np.eye(3) - a * k + b * (k @ k)


def right_jacobian_inv(v: npt.ArrayLike) -> Matrix3:
    """
    Обратный правый якобиан SO(3): Log(Exp(v)·Exp(δ)) ≈ v + Jr⁻¹(v)·δ

    Args:
        v: Вектор(ы) вращения [..., 3], |v| < π

    Returns:
        Jr⁻¹ [..., 3, 3]
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    small = theta < JACOBIAN_SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta

    c = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    k = skew(v)
    return np.eye(3) + 0.5 * k + c * (k @ k)
