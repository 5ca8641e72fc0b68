"""Rigid-transform and rotation helpers.

All rotations follow the extrinsic XYZ (roll-pitch-yaw) convention:
R_world_from_body = Rz(yaw) @ Ry(pitch) @ Rx(roll).
Homogeneous transforms are 4x4 numpy arrays.
"""

import numpy as np


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_matrix(rpy) -> np.ndarray:
    """World-from-body rotation for extrinsic roll-pitch-yaw angles."""
    r, p, y = rpy
    return rot_z(y) @ rot_y(p) @ rot_x(r)


def drot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def drot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def drot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rpy_matrix_derivatives(rpy):
    """Partial derivatives of the world-from-body rotation w.r.t. each angle.

    Returns a list [dR/droll, dR/dpitch, dR/dyaw] of 3x3 matrices.
    """
    r, p, y = rpy
    Rx, Ry, Rz = rot_x(r), rot_y(p), rot_z(y)
    return [Rz @ Ry @ drot_x(r), Rz @ drot_y(p) @ Rx, drot_z(y) @ Ry @ Rx]


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    k = axis / np.linalg.norm(axis)
    K = skew(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of skew for a (nearly) antisymmetric matrix."""
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def make_tf(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = np.asarray(t, dtype=float)
    return T


def tf_inverse(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def tf_point(T: np.ndarray, p) -> np.ndarray:
    return T[:3, :3] @ np.asarray(p, dtype=float) + T[:3, 3]
