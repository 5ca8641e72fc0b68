"""Reachable-region construction and reachability-margin oracle.

The reachable region is the set of base xy displacements (at fixed orientation
and height) for which every stance leg still admits an in-limits IK solution.
It is found by ray-casting with bisection refinement; the margin is the
minimum point-to-edge-line distance from the current base projection.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kinematics import KinematicModel, leg_ik_batch
from .transforms import rot_x, rot_y

DEFAULT_N_RAYS = 32
DEFAULT_STEP = 0.05
DEFAULT_MAX_LEN = 1.5
DEFAULT_TOL = 1e-3


class RegionError(RuntimeError):
    """Raised when the region cannot be computed (start pose infeasible)."""

    def __init__(self, message, query=None):
        super().__init__(message)
        self.query = query


@dataclass(frozen=True)
class RegionQuery:
    """Stance description: world z-axis in base frame plus feet in base frame.

    r_bw optionally pins the full base-from-world rotation; when absent a
    zero-yaw rotation consistent with ez_in_base is used (the margin is
    invariant to that choice).
    """

    ez_in_base: np.ndarray
    feet_in_base: np.ndarray
    r_bw: Optional[np.ndarray] = None

    def __post_init__(self):
        ez = np.asarray(self.ez_in_base, dtype=float)
        object.__setattr__(self, "ez_in_base", ez)
        object.__setattr__(self, "feet_in_base", np.asarray(self.feet_in_base, dtype=float))
        if abs(np.linalg.norm(ez) - 1.0) > 1e-9:
            raise ValueError("ez_in_base must be a unit vector")
        if self.feet_in_base.shape[0] < 3:
            raise ValueError("need at least 3 stance feet")
        if self.r_bw is None:
            object.__setattr__(self, "r_bw", rotation_from_ez(ez))

    def to_input_vector(self) -> np.ndarray:
        return np.concatenate([self.ez_in_base, self.feet_in_base.ravel()])

    @staticmethod
    def from_input_vector(x: np.ndarray) -> "RegionQuery":
        x = np.asarray(x, dtype=float)
        return RegionQuery(x[:3], x[3:].reshape(-1, 3))


def rotation_from_ez(ez) -> np.ndarray:
    """Zero-yaw base-from-world rotation whose world z-axis maps to ez."""
    ez = np.asarray(ez, dtype=float)
    roll = np.arctan2(ez[1], ez[2])
    pitch = np.arcsin(np.clip(-ez[0], -1.0, 1.0))
    return (rot_y(pitch) @ rot_x(roll)).T


@dataclass(frozen=True)
class EdgeLine:
    """Line a*x + b*y + c = 0 through one polygon edge."""

    a: float
    b: float
    c: float

    @staticmethod
    def from_points(p, q) -> "EdgeLine":
        dx, dy = q[0] - p[0], q[1] - p[1]
        a, b = -dy, dx
        return EdgeLine(a, b, -(a * p[0] + b * p[1]))


def edge_distance(edge: EdgeLine, base_xy) -> float:
    """Point-to-line distance |a x + b y + c| / sqrt(a^2 + b^2)."""
    nn = edge.a**2 + edge.b**2
    if nn < 1e-18:
        raise ValueError("degenerate edge line (a, b both ~ zero)")
    x, y = base_xy
    return abs(edge.a * x + edge.b * y + edge.c) / np.sqrt(nn)


@dataclass(frozen=True)
class ReachableRegion:
    """Closed polygon of feasible base xy positions, vertices ordered by angle."""

    vertices: np.ndarray  # (N_e, 2)

    def edges(self):
        v = self.vertices
        return [EdgeLine.from_points(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    def area(self) -> float:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def stance_feasible(model: KinematicModel, feet_in_base: np.ndarray) -> np.ndarray:
    """Vectorized all-legs IK feasibility; feet_in_base has shape (..., Nc, 3)."""
    feet_in_base = np.asarray(feet_in_base, dtype=float)
    ok = np.ones(feet_in_base.shape[:-2], dtype=bool)
    for i, leg in enumerate(model.legs):
        _, leg_ok = leg_ik_batch(leg, feet_in_base[..., i, :], allow_above=False)
        ok &= leg_ok
    return ok


def feasible(model: KinematicModel, query: RegionQuery, base_xy_offset) -> bool:
    """True iff all legs stay in limits with the base displaced by the world xy offset."""
    off = np.asarray(base_xy_offset, dtype=float)
    shift = query.r_bw @ np.array([off[0], off[1], 0.0])
    return bool(stance_feasible(model, query.feet_in_base - shift))


def _ray_directions(n_rays: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(n_rays) / n_rays
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def boundary_radii(
    model: KinematicModel,
    r_bw: np.ndarray,
    feet_in_base: np.ndarray,
    n_rays: int = DEFAULT_N_RAYS,
    step: float = DEFAULT_STEP,
    max_len: float = DEFAULT_MAX_LEN,
    tol: float = DEFAULT_TOL,
):
    """Batched ray-cast boundary search.

    r_bw: (S, 3, 3), feet_in_base: (S, Nc, 3). Returns (radii (S, n_rays),
    start_ok (S,)); rows with start_ok False are left at zero.
    """
    r_bw = np.asarray(r_bw, dtype=float)
    feet = np.asarray(feet_in_base, dtype=float)
    S = feet.shape[0]
    dirs3 = np.zeros((n_rays, 3))
    dirs3[:, :2] = _ray_directions(n_rays)
    # world-direction unit shifts expressed in the base frame, per query
    shift_unit = np.einsum("sij,rj->sri", r_bw, dirs3)  # (S, R, 3)

    def ok_at(radii):
        # radii: (S, R) -> feasibility of every (query, ray) displacement
        feet_eff = feet[:, None, :, :] - radii[:, :, None, None] * shift_unit[:, :, None, :]
        return stance_feasible(model, feet_eff)

    start_ok = stance_feasible(model, feet)

    lo = np.zeros((S, n_rays))
    hi = np.full((S, n_rays), np.inf)
    n_steps = int(np.ceil(max_len / step))
    for k in range(1, n_steps + 1):
        r = min(k * step, max_len)
        probe = np.full((S, n_rays), r)
        ok = ok_at(probe)
        undecided = np.isinf(hi)
        lo = np.where(undecided & ok, r, lo)
        hi = np.where(undecided & ~ok, r, hi)
    # rays feasible all the way out are clamped at max_len
    hi = np.where(np.isinf(hi), max_len, hi)
    open_ray = lo >= hi  # feasible at max_len: no bracket to refine

    while True:
        gap = hi - lo
        if np.max(np.where(open_ray, 0.0, gap)) <= tol:
            break
        mid = 0.5 * (lo + hi)
        ok = ok_at(mid)
        lo = np.where(~open_ray & ok, mid, lo)
        hi = np.where(~open_ray & ~ok, mid, hi)

    # report the inner bracket so returned vertices are themselves feasible
    radii = np.where(open_ray, max_len, lo)
    radii = np.where(start_ok[:, None], radii, 0.0)
    return radii, start_ok


def compute_region(
    model: KinematicModel,
    query: RegionQuery,
    n_rays: int = DEFAULT_N_RAYS,
    step: float = DEFAULT_STEP,
    max_len: float = DEFAULT_MAX_LEN,
    tol: float = DEFAULT_TOL,
) -> ReachableRegion:
    """Ray-cast the reachable region around the current base position."""
    if n_rays < 8:
        raise ValueError("n_rays must be at least 8")
    radii, start_ok = boundary_radii(
        model, query.r_bw[None], query.feet_in_base[None], n_rays, step, max_len, tol
    )
    if not start_ok[0]:
        raise RegionError("start configuration outside reachable region", query=query)
    verts = radii[0][:, None] * _ray_directions(n_rays)
    return ReachableRegion(vertices=verts)


def _min_edge_distance(radii: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Min distance from the origin to the polygon edge lines; radii (S, R)."""
    verts = radii[..., None] * dirs  # (S, R, 2)
    v2 = np.roll(verts, -1, axis=-2)
    d = v2 - verts
    seg_len = np.linalg.norm(d, axis=-1)
    cross = np.abs(d[..., 0] * verts[..., 1] - d[..., 1] * verts[..., 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(seg_len > 1e-12, cross / seg_len, np.inf)
    return np.min(dist, axis=-1)


def margin_oracle(
    model: KinematicModel,
    query: RegionQuery,
    n_rays: int = DEFAULT_N_RAYS,
    step: float = DEFAULT_STEP,
    max_len: float = DEFAULT_MAX_LEN,
    tol: float = DEFAULT_TOL,
) -> float:
    """Reachability margin: minimum distance to the region's edge lines."""
    region = compute_region(model, query, n_rays, step, max_len, tol)
    return float(min(edge_distance(e, (0.0, 0.0)) for e in region.edges()))


def margin_batch(
    model: KinematicModel,
    ez: np.ndarray,
    feet_in_base: np.ndarray,
    n_rays: int = DEFAULT_N_RAYS,
    step: float = DEFAULT_STEP,
    max_len: float = DEFAULT_MAX_LEN,
    tol: float = DEFAULT_TOL,
    chunk: int = 2048,
):
    """Vectorized margins for S stance queries.

    ez: (S, 3), feet_in_base: (S, Nc, 3). Returns (margins (S,), ok (S,));
    infeasible-start rows get margin 0 and ok False.
    """
    ez = np.asarray(ez, dtype=float)
    feet = np.asarray(feet_in_base, dtype=float)
    S = feet.shape[0]
    margins = np.zeros(S)
    all_ok = np.zeros(S, dtype=bool)
    dirs = _ray_directions(n_rays)
    for s0 in range(0, S, chunk):
        sl = slice(s0, min(s0 + chunk, S))
        r_bw = np.stack([rotation_from_ez(e) for e in ez[sl]])
        radii, ok = boundary_radii(model, r_bw, feet[sl], n_rays, step, max_len, tol)
        m = _min_edge_distance(radii, dirs)
        margins[sl] = np.where(ok, m, 0.0)
        all_ok[sl] = ok
    return margins, all_ok


def region_to_csv(region: ReachableRegion, path, center=(0.0, 0.0)) -> None:
    """Dump polygon vertices (absolute xy) as a two-column CSV."""
    cx, cy = center
    with open(path, "w", newline="") as f:
        f.write("x,y\n")
        for vx, vy in region.vertices:
            f.write(f"{vx + cx:.9g},{vy + cy:.9g}\n")
