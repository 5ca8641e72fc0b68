"""Reduced kinematic model of a legged manipulator.

The planning model is a floating trunk box with a serial arm on top; the four
legs are analytic 3-DOF chains (HAA about x, HFE/KFE about y) used only for
reachability queries, never as planning variables.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .transforms import (
    axis_angle,
    make_tf,
    rot_x,
    rot_y,
    rpy_matrix_derivatives,
    rpy_to_matrix,
    vee,
)

GIMBAL_PITCH_MARGIN = 1e-3


@dataclass(frozen=True)
class Configuration:
    """Planning state: base position, base Euler angles, arm joint angles."""

    base_pos: np.ndarray
    base_euler: np.ndarray
    arm_q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base_pos", np.asarray(self.base_pos, dtype=float))
        object.__setattr__(self, "base_euler", np.asarray(self.base_euler, dtype=float))
        object.__setattr__(self, "arm_q", np.asarray(self.arm_q, dtype=float))

    @property
    def dim(self) -> int:
        return 6 + len(self.arm_q)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.base_pos, self.base_euler, self.arm_q])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Configuration":
        v = np.asarray(v, dtype=float)
        return Configuration(v[:3], v[3:6], v[6:])


@dataclass(frozen=True)
class ArmJoint:
    """One revolute joint: fixed offset/rotation from parent, then rotation about axis."""

    origin: np.ndarray
    rpy: np.ndarray
    axis: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "rpy", np.asarray(self.rpy, dtype=float))
        ax = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", ax / np.linalg.norm(ax))


@dataclass(frozen=True)
class LegModel:
    """3-DOF leg: lateral hip link, then a planar two-link chain in the sagittal plane.

    link_lengths = [hip (lateral), upper, lower]; lateral_sign is +1 for left
    legs, -1 for right legs (direction of the hip link along base y).
    """

    hip_offset: np.ndarray
    link_lengths: tuple
    joint_limits: np.ndarray  # (3, 2) rows HAA, HFE, KFE
    lateral_sign: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hip_offset", np.asarray(self.hip_offset, dtype=float))
        object.__setattr__(self, "joint_limits", np.asarray(self.joint_limits, dtype=float))
        if any(l <= 0 for l in self.link_lengths):
            raise ValueError("leg link lengths must be strictly positive")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("leg joint limits must satisfy lower < upper")


@dataclass(frozen=True)
class FootState:
    """World-frame positions of the stance feet, ordered like model.legs."""

    positions_world: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "positions_world", np.asarray(self.positions_world, dtype=float)
        )


@dataclass(frozen=True)
class AttachedObject:
    parent_link: str
    pose_in_parent: np.ndarray  # 4x4
    shape: Optional[object] = None  # ConvexShape in object frame


@dataclass(frozen=True)
class KinematicModel:
    arm_joints: tuple
    arm_limits: np.ndarray  # (n_a, 2)
    base_box: np.ndarray  # half-extents
    ee_offset: np.ndarray  # 4x4 gripper frame in last-link frame
    legs: tuple
    collision_bodies: tuple = ()  # (link_id, ConvexShape in link frame)
    objects: dict = field(default_factory=dict)  # name -> AttachedObject
    exclude_pairs: frozenset = frozenset()

    def __post_init__(self):
        lim = np.asarray(self.arm_limits, dtype=float)
        object.__setattr__(self, "arm_limits", lim)
        object.__setattr__(self, "base_box", np.asarray(self.base_box, dtype=float))
        object.__setattr__(self, "ee_offset", np.asarray(self.ee_offset, dtype=float))
        if np.any(lim[:, 0] >= lim[:, 1]):
            raise ValueError("arm limits must satisfy lower < upper componentwise")
        links = set(self.link_ids())
        for link, _ in self.collision_bodies:
            if link not in links:
                raise ValueError(f"collision body references unknown link {link!r}")

    @property
    def n_arm(self) -> int:
        return len(self.arm_joints)

    @property
    def dim(self) -> int:
        return 6 + self.n_arm

    def link_ids(self):
        ids = ["base"]
        ids += [f"arm_{j + 1}" for j in range(len(self.arm_joints))]
        ids.append("ee")
        ids += list(self.objects)
        return ids


class UnknownLinkError(KeyError):
    pass


def base_rotation(q: Configuration) -> np.ndarray:
    """Base-from-world rotation (transpose of the world-from-base matrix)."""
    return rpy_to_matrix(q.base_euler).T


def check_gimbal(q: Configuration) -> None:
    if abs(q.base_euler[1]) >= np.pi / 2 - GIMBAL_PITCH_MARGIN:
        raise ValueError(f"pitch {q.base_euler[1]:.4f} too close to gimbal singularity")


def _arm_chain(model: KinematicModel, q: Configuration):
    """World transforms after each arm joint, plus world joint origins and axes."""
    T = make_tf(rpy_to_matrix(q.base_euler), q.base_pos)
    frames, origins, axes = [], [], []
    for j, joint in enumerate(model.arm_joints):
        T = T @ make_tf(rpy_to_matrix(joint.rpy), joint.origin)
        origins.append(T[:3, 3].copy())
        axes.append(T[:3, :3] @ joint.axis)
        T = T @ make_tf(axis_angle(joint.axis, q.arm_q[j]))
        frames.append(T)
    return frames, origins, axes


def fk_frame(model: KinematicModel, q: Configuration, link: str) -> np.ndarray:
    """World pose (4x4) of a link frame."""
    if len(q.arm_q) != model.n_arm:
        raise ValueError("configuration arm dimension does not match model")
    if link == "base":
        return make_tf(rpy_to_matrix(q.base_euler), q.base_pos)
    if link in model.objects:
        obj = model.objects[link]
        return fk_frame(model, q, obj.parent_link) @ obj.pose_in_parent
    frames, _, _ = _arm_chain(model, q)
    if link == "ee":
        return frames[-1] @ model.ee_offset
    if link.startswith("arm_"):
        idx = int(link[4:]) - 1
        if 0 <= idx < len(frames):
            return frames[idx]
    raise UnknownLinkError(link)


def _resolve_arm_index(model: KinematicModel, link: str):
    """Number of arm joints the link depends on (0 for base)."""
    if link == "base":
        return 0
    if link in model.objects:
        return _resolve_arm_index(model, model.objects[link].parent_link)
    if link == "ee":
        return model.n_arm
    if link.startswith("arm_"):
        idx = int(link[4:])
        if 1 <= idx <= model.n_arm:
            return idx
    raise UnknownLinkError(link)


def point_jacobian(
    model: KinematicModel, q: Configuration, link: str, p_world: np.ndarray,
    chain=None,
) -> np.ndarray:
    """3x(6+n_a) Jacobian of a world point rigidly attached to `link`.

    chain optionally passes a precomputed _arm_chain(model, q) to avoid
    re-running forward kinematics in tight per-pair loops.
    """
    n_dep = _resolve_arm_index(model, link)
    R = rpy_to_matrix(q.base_euler)
    dRs = rpy_matrix_derivatives(q.base_euler)
    p_b = R.T @ (np.asarray(p_world) - q.base_pos)
    J = np.zeros((3, model.dim))
    J[:, 0:3] = np.eye(3)
    for k in range(3):
        J[:, 3 + k] = dRs[k] @ p_b
    if n_dep > 0:
        _, origins, axes = chain if chain is not None else _arm_chain(model, q)
        for j in range(n_dep):
            J[:, 6 + j] = np.cross(axes[j], p_world - origins[j])
    return J


def fk_jacobian(model: KinematicModel, q: Configuration, link: str) -> np.ndarray:
    """6x(6+n_a) Jacobian of a link pose: position rows then angular-velocity rows.

    Orientation rows map parameter rates to world angular velocity, consistent
    with the extrinsic-XYZ Euler convention of base_euler.
    """
    T = fk_frame(model, q, link)
    p = T[:3, 3]
    n_dep = _resolve_arm_index(model, link)
    R = rpy_to_matrix(q.base_euler)
    dRs = rpy_matrix_derivatives(q.base_euler)
    J = np.zeros((6, model.dim))
    J[:3, :] = point_jacobian(model, q, link, p)
    for k in range(3):
        J[3:, 3 + k] = vee(dRs[k] @ R.T)
    if n_dep > 0:
        _, _, axes = _arm_chain(model, q)
        for j in range(n_dep):
            J[3:, 6 + j] = axes[j]
    return J


def attach_object(
    model: KinematicModel,
    grasp_link: str,
    object_pose_in_link: np.ndarray,
    shape=None,
    name: str = "object",
) -> KinematicModel:
    """Rigidly attach an object (and its collision shape) to a link."""
    if grasp_link not in model.link_ids():
        raise UnknownLinkError(grasp_link)
    objects = dict(model.objects)
    objects[name] = AttachedObject(grasp_link, np.asarray(object_pose_in_link, float), shape)
    bodies = list(model.collision_bodies)
    if shape is not None:
        bodies.append((name, shape))
    return replace(model, objects=objects, collision_bodies=tuple(bodies))


def detach_object(model: KinematicModel, name: str) -> KinematicModel:
    objects = dict(model.objects)
    objects.pop(name, None)
    bodies = tuple(b for b in model.collision_bodies if b[0] != name)
    return replace(model, objects=objects, collision_bodies=bodies)


# --- leg kinematics -------------------------------------------------------

def leg_fk(leg: LegModel, angles) -> np.ndarray:
    """Foot position in the base frame for HAA/HFE/KFE angles."""
    q1, q2, q3 = angles
    d, l2, l3 = leg.link_lengths
    sd = leg.lateral_sign * d
    planar = np.array(
        [-l2 * np.sin(q2) - l3 * np.sin(q2 + q3), sd, -l2 * np.cos(q2) - l3 * np.cos(q2 + q3)]
    )
    return leg.hip_offset + rot_x(q1) @ planar


def leg_ik_batch(leg: LegModel, feet_in_base: np.ndarray, allow_above: bool = True):
    """Vectorized closed-form leg IK (knee-bent-backward branch).

    feet_in_base: (..., 3) targets. Returns (angles (..., 3), ok (...,)) where
    infeasible entries have ok=False and unspecified angles. With
    allow_above=False only the foot-below-hip HAA branch is accepted and the
    hip-flexion angle is not allowed to wrap past +-pi; this is the natural
    stance convention used by reachability queries. With allow_above=True the
    full solution set of both HAA branches (with wrapping) is searched.
    """
    f = np.asarray(feet_in_base, dtype=float)
    d, l2, l3 = leg.link_lengths
    sd = leg.lateral_sign * d
    r = f - leg.hip_offset
    rx, ry, rz = r[..., 0], r[..., 1], r[..., 2]

    rho = np.hypot(ry, rz)
    reach_ok = rho >= abs(sd) - 1e-12
    rho_safe = np.maximum(rho, abs(sd) + 1e-15)
    psi = np.arccos(np.clip(sd / rho_safe, -1.0, 1.0))
    phi = np.arctan2(rz, ry)
    h = np.sqrt(np.maximum(rho_safe**2 - sd**2, 0.0))

    # the sagittal distance is branch-independent
    rr = rx**2 + h**2
    D = (rr - l2**2 - l3**2) / (2.0 * l2 * l3)
    reach_ok &= np.abs(D) <= 1.0
    q3 = np.arccos(np.clip(D, -1.0, 1.0))
    knee = np.arctan2(l3 * np.sin(q3), l2 + l3 * np.cos(q3))

    lim = leg.joint_limits

    def branch(zsign, wrap):
        # zsign is the sign of the foot z in the HAA-unrotated frame
        q1 = np.arctan2(np.sin(phi - zsign * psi), np.cos(phi - zsign * psi))
        q2 = np.arctan2(-rx, -zsign * h) - knee
        if wrap:
            q2 = np.arctan2(np.sin(q2), np.cos(q2))  # wrap into (-pi, pi]
        ok = reach_ok.copy()
        for qi, (lo, hi) in zip((q1, q2, q3), lim):
            ok &= (qi >= lo) & (qi <= hi)
        return np.stack([q1, q2, q3], axis=-1), ok

    # prefer the foot-below-hip branch, fall back to the other HAA branch
    ang_lo, ok_lo = branch(-1.0, wrap=allow_above)
    if not allow_above:
        return ang_lo, ok_lo
    ang_hi, ok_hi = branch(1.0, wrap=True)
    use_hi = ~ok_lo & ok_hi
    angles = np.where(use_hi[..., None], ang_hi, ang_lo)
    return angles, ok_lo | ok_hi


def leg_ik(leg: LegModel, foot_in_base) -> Optional[np.ndarray]:
    """Closed-form 3-DOF leg IK; returns None when the target is infeasible."""
    angles, ok = leg_ik_batch(leg, np.asarray(foot_in_base, dtype=float))
    return angles if bool(ok) else None


# --- default robot --------------------------------------------------------

def nominal_model(n_arm: int = 6) -> KinematicModel:
    """Desk-scale stand-in for a HyQReal-class quadruped with a 6-DOF arm.

    Geometry values are plausible configuration, not measured robot data.
    """
    joints = [
        ArmJoint(origin=(0.30, 0.0, 0.12), rpy=(0, 0, 0), axis=(0, 0, 1)),
        ArmJoint(origin=(0.0, 0.0, 0.10), rpy=(0, 0, 0), axis=(0, 1, 0)),
        ArmJoint(origin=(0.32, 0.0, 0.0), rpy=(0, 0, 0), axis=(0, 1, 0)),
        ArmJoint(origin=(0.26, 0.0, 0.0), rpy=(0, 0, 0), axis=(1, 0, 0)),
        ArmJoint(origin=(0.10, 0.0, 0.0), rpy=(0, 0, 0), axis=(0, 1, 0)),
        ArmJoint(origin=(0.06, 0.0, 0.0), rpy=(0, 0, 0), axis=(1, 0, 0)),
    ][:n_arm]
    limits = np.array(
        [
            [-2.9, 2.9],
            [-2.2, 2.2],
            [-2.5, 2.5],
            [-2.9, 2.9],
            [-2.2, 2.2],
            [-2.9, 2.9],
        ]
    )[:n_arm]
    leg_limits = np.array([[-0.55, 0.55], [-2.2, 2.2], [0.45, 2.4]])
    legs = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            legs.append(
                LegModel(
                    hip_offset=(0.44 * sx, 0.25 * sy, 0.0),
                    link_lengths=(0.10, 0.36, 0.38),
                    joint_limits=leg_limits,
                    lateral_sign=sy,
                )
            )
    return KinematicModel(
        arm_joints=tuple(joints),
        arm_limits=limits,
        base_box=np.array([0.45, 0.25, 0.12]),
        ee_offset=make_tf(t=(0.12, 0.0, 0.0)),
        legs=tuple(legs),
    )


def nominal_stance(model: KinematicModel, base_height: float = 0.5):
    """Nominal configuration (feet under the hips) and matching foot state."""
    feet = []
    for leg in model.legs:
        d = leg.link_lengths[0] * leg.lateral_sign
        feet.append([leg.hip_offset[0], leg.hip_offset[1] + d, 0.0])
    q = Configuration(
        base_pos=np.array([0.0, 0.0, base_height]),
        base_euler=np.zeros(3),
        arm_q=np.zeros(model.n_arm),
    )
    return q, FootState(np.array(feet))


def feet_in_base(q: Configuration, feet: FootState) -> np.ndarray:
    """World feet expressed in the base frame (frame-relation transform)."""
    r_bw = base_rotation(q)
    return (feet.positions_world - q.base_pos) @ r_bw.T
