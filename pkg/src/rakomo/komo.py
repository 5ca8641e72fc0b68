"""k-order Markov path optimization.

Each feature term couples at most k+1 consecutive waypoints, so the
Gauss-Newton normal matrix is banded; constraints are folded in with an
augmented-Lagrangian outer loop (squared-hinge penalty for inequalities) and
the inner steps use a banded Cholesky solve with Armijo backtracking.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solveh_banded

from .collision import default_pairs, pairwise_distances
from .kinematics import Configuration, KinematicModel, fk_frame, point_jacobian
from .surrogate import MlpModel, margin_estimate_at, margin_gradient_wrt_config


@dataclass
class Trajectory:
    """Waypoints q_0..q_N as an (N+1, dim) array."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2:
            raise ValueError("trajectory points must be (N+1, dim)")

    @property
    def n(self) -> int:
        return self.points.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def config(self, t: int) -> Configuration:
        return Configuration.from_vector(self.points[t])

    @property
    def configs(self):
        return [self.config(t) for t in range(self.n + 1)]

    @staticmethod
    def constant(q: Configuration, n: int) -> "Trajectory":
        return Trajectory(np.tile(q.to_vector(), (n + 1, 1)))


@dataclass(frozen=True)
class FeatureTerm:
    """Residual over a (order+1)-slice window, used as cost/eq/ineq.

    func maps the window array (order+1, dim) to (r, J) with J of shape
    (len(r), (order+1)*dim); columns outside the window never appear, which
    is what keeps the assembled system banded.
    """

    name: str
    kind: str  # "cost" | "eq" | "ineq"
    order: int
    time_slices: tuple
    func: Callable[[np.ndarray], tuple]
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cost", "eq", "ineq"):
            raise ValueError(f"unknown term kind {self.kind!r}")
        if self.order not in (0, 1, 2):
            raise ValueError("order must be 0, 1 or 2")
        if self.kind == "cost" and self.weight <= 0:
            raise ValueError("cost weight must be positive")
        object.__setattr__(self, "time_slices", tuple(self.time_slices))
        if any(t < self.order for t in self.time_slices):
            raise ValueError(f"term {self.name}: slice below its order window")


@dataclass(frozen=True)
class SolverParams:
    outer_max: int = 25
    inner_max: int = 60
    mu_init: float = 1.0
    mu_growth: float = 5.0
    mu_max: float = 1e5
    multiplier_clamp: float = 1e8
    armijo_c: float = 0.01
    shrink: float = 0.5
    max_shrinks: int = 12
    tol_step: float = 1e-4
    tol_con: float = 1e-3
    damping: float = 1e-8

    def __post_init__(self):
        if self.mu_growth <= 1:
            raise ValueError("mu_growth must exceed 1")
        for name in ("mu_init", "armijo_c", "shrink", "tol_step", "tol_con", "damping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class KktReport:
    cost: float = np.inf
    max_abs_h: float = 0.0
    max_pos_g: float = 0.0
    eq_multiplier_norm: float = 0.0
    ineq_multiplier_norm: float = 0.0
    outer_iterations: int = 0
    inner_iterations: int = 0
    wall_time: float = 0.0
    converged: bool = False
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "cost": float(self.cost),
            "max_abs_h": float(self.max_abs_h),
            "max_pos_g": float(self.max_pos_g),
            "eq_multiplier_norm": float(self.eq_multiplier_norm),
            "ineq_multiplier_norm": float(self.ineq_multiplier_norm),
            "outer_iterations": int(self.outer_iterations),
            "inner_iterations": int(self.inner_iterations),
            "wall_time": float(self.wall_time),
            "converged": bool(self.converged),
            "flags": list(self.flags),
        }


@dataclass
class AlState:
    """Augmented-Lagrangian penalty weight and per-occurrence multipliers."""

    mu: float
    lam_eq: dict = field(default_factory=dict)
    lam_ineq: dict = field(default_factory=dict)


def _evaluate(terms, X):
    """Residuals and window Jacobians for every (term, slice) occurrence."""
    out = []
    for ti, term in enumerate(terms):
        k = term.order
        for t in term.time_slices:
            window = X[t - k : t + 1]
            r, J = term.func(window)
            r = np.atleast_1d(np.asarray(r, dtype=float))
            J = np.atleast_2d(np.asarray(J, dtype=float))
            if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
                raise FloatingPointError(
                    f"non-finite residual/Jacobian in term {term.name!r} at slice {t}"
                )
            if J.shape != (len(r), (k + 1) * X.shape[1]):
                raise ValueError(
                    f"term {term.name!r} at slice {t}: Jacobian shape {J.shape} "
                    f"does not match window"
                )
            out.append((ti, term, t, r, J))
    return out


def _merit(occ, al: AlState) -> float:
    total = 0.0
    for ti, term, t, r, _ in occ:
        if term.kind == "cost":
            total += term.weight * (r @ r)
        elif term.kind == "eq":
            lam = al.lam_eq.get((ti, t), np.zeros(len(r)))
            total += lam @ r + al.mu * (r @ r)
        else:
            lam = al.lam_ineq.get((ti, t), np.zeros(len(r)))
            s = np.maximum(0.0, lam + 2.0 * al.mu * r)
            total += (s @ s - lam @ lam) / (4.0 * al.mu)
    return total


def assemble_gn_system(traj: Trajectory, terms, al: AlState):
    """Banded Gauss-Newton system of the AL merit function.

    Returns (ab, grad) with ab in the symmetric-banded upper layout used by
    scipy.linalg.solveh_banded; bandwidth follows the largest term order.
    """
    occ = _evaluate(terms, traj.points)
    k_max = max((term.order for term in terms), default=0)
    return _assemble(occ, traj.points.size, traj.dim, k_max, al)


def _assemble(occ, n, dim, k_max, al: AlState):
    u = (k_max + 1) * dim - 1  # superdiagonal count
    ab = np.zeros((u + 1, n))
    grad = np.zeros(n)
    for ti, term, t, r, J in occ:
        col0 = (t - term.order) * dim
        if term.kind == "cost":
            g_r = 2.0 * term.weight * r
            Jh = np.sqrt(2.0 * term.weight) * J
        elif term.kind == "eq":
            lam = al.lam_eq.get((ti, t), np.zeros(len(r)))
            g_r = lam + 2.0 * al.mu * r
            Jh = np.sqrt(2.0 * al.mu) * J
        else:
            lam = al.lam_ineq.get((ti, t), np.zeros(len(r)))
            s = lam + 2.0 * al.mu * r
            g_r = np.maximum(0.0, s)
            Jh = np.sqrt(2.0 * al.mu) * J[s > 0]
        w = J.shape[1]
        grad[col0 : col0 + w] += J.T @ g_r
        if Jh.size:
            Hl = Jh.T @ Jh
            for j in range(w):
                lo = max(0, j - u)
                ab[u + lo - j : u + 1, col0 + j] += Hl[lo : j + 1, j]
    return ab, grad


def band_to_dense(ab: np.ndarray) -> np.ndarray:
    """Expand the symmetric upper-banded layout into a full matrix."""
    u = ab.shape[0] - 1
    n = ab.shape[1]
    H = np.zeros((n, n))
    for j in range(n):
        for i in range(max(0, j - u), j + 1):
            H[i, j] = ab[u + i - j, j]
            H[j, i] = H[i, j]
    return H


def _constraint_stats(occ, al: AlState):
    max_h = 0.0
    max_g = 0.0
    for _, term, _, r, _ in occ:
        if term.kind == "eq":
            max_h = max(max_h, float(np.max(np.abs(r))))
        elif term.kind == "ineq":
            max_g = max(max_g, float(np.max(r)))
    return max_h, max_g


def _cost_value(occ) -> float:
    return sum(term.weight * (r @ r) for _, term, _, r, _ in occ if term.kind == "cost")


def solve(traj: Trajectory, terms, params: SolverParams = SolverParams()):
    """Augmented-Lagrangian outer loop over banded Gauss-Newton inner steps."""
    t0 = time.perf_counter()
    X = traj.points.copy()
    dim = traj.dim
    al = AlState(mu=params.mu_init)
    report = KktReport()
    last_step = np.inf

    k_max = max((term.order for term in terms), default=0)
    occ_cached = None
    damping = params.damping
    for outer in range(params.outer_max):
        report.outer_iterations = outer + 1
        for _ in range(params.inner_max):
            occ = occ_cached if occ_cached is not None else _evaluate(terms, X)
            occ_cached = None
            ab, grad = _assemble(occ, X.size, dim, k_max, al)
            merit0 = _merit(occ, al)

            step = None
            ab_d = ab.copy()
            for _ in range(12):
                ab_d[-1] = ab[-1] + damping
                try:
                    step = solveh_banded(ab_d, -grad)
                    break
                except np.linalg.LinAlgError:
                    damping *= 10.0
            if step is None:
                report.flags.append("cholesky_failure")
                break

            last_step = float(np.linalg.norm(step))
            if last_step < params.tol_step:
                break
            report.inner_iterations += 1

            slope = grad @ step
            alpha = 1.0
            accepted = False
            for _ in range(params.max_shrinks):
                X_try = X + alpha * step.reshape(X.shape)
                occ_try = _evaluate(terms, X_try)
                # small relative slack keeps the test meaningful when the AL
                # penalty makes the merit value large
                bound = merit0 + params.armijo_c * alpha * slope + 1e-12 * abs(merit0)
                if _merit(occ_try, al) <= bound:
                    X = X_try
                    occ_cached = occ_try
                    accepted = True
                    break
                alpha *= params.shrink
            if accepted:
                damping = max(params.damping, damping * 0.1)
            else:
                # Gauss-Newton model mismatch (e.g. a contact normal flipping
                # inside the step): shorten the step via damping and retry
                damping *= 100.0
                if damping > 1e6:
                    report.flags.append("line_search_failure")
                    break

        if occ_cached is not None:
            occ = occ_cached
        occ_cached = occ  # residuals do not depend on the AL state; reuse next round
        max_h, max_g = _constraint_stats(occ, al)
        if last_step < params.tol_step and max_h < params.tol_con and max_g < params.tol_con:
            report.converged = True
            break

        clamp = params.multiplier_clamp
        for ti, term, t, r, _ in occ:
            key = (ti, t)
            if term.kind == "eq":
                lam = al.lam_eq.get(key, np.zeros(len(r)))
                al.lam_eq[key] = np.clip(lam + 2.0 * al.mu * r, -clamp, clamp)
            elif term.kind == "ineq":
                lam = al.lam_ineq.get(key, np.zeros(len(r)))
                al.lam_ineq[key] = np.clip(lam + 2.0 * al.mu * r, 0.0, clamp)
        al.mu = min(al.mu * params.mu_growth, params.mu_max)

    if not report.converged and not report.flags:
        report.flags.append("iteration_cap")

    occ = _evaluate(terms, X)
    report.cost = _cost_value(occ)
    report.max_abs_h, report.max_pos_g = _constraint_stats(occ, al)
    report.eq_multiplier_norm = float(
        np.sqrt(sum(np.sum(v**2) for v in al.lam_eq.values()))
    )
    report.ineq_multiplier_norm = float(
        np.sqrt(sum(np.sum(v**2) for v in al.lam_ineq.values()))
    )
    report.wall_time = time.perf_counter() - t0
    return Trajectory(X), report


# --- feature constructors --------------------------------------------------

@dataclass(frozen=True)
class Weights:
    base_bias: float = 1.0
    arm_bias: float = 0.1  # bias ratio arm:base fixed at 1:10
    smoothness: float = 10.0
    margin: float = 5.0


def position_bias_feature(q0_vec: np.ndarray, n_arm: int, w: Weights):
    scale = np.concatenate(
        [np.full(6, np.sqrt(w.base_bias)), np.full(n_arm, np.sqrt(w.arm_bias))]
    )
    J = np.diag(scale)

    def func(window):
        return scale * (window[-1] - q0_vec), J

    return func


def smoothness_feature(dim: int, weight: float):
    s = np.sqrt(weight)
    J = s * np.hstack([np.eye(dim), -2.0 * np.eye(dim), np.eye(dim)])

    def func(window):
        return s * (window[2] - 2.0 * window[1] + window[0]), J

    return func


def margin_feature(kin: KinematicModel, mlp: MlpModel, feet, target: float):
    """Residual target - m_hat(q) with the exact chain-rule Jacobian.

    The margin only depends on the base pose, so arm columns are zero.
    """

    def func(window):
        q = Configuration.from_vector(window[-1])
        m = margin_estimate_at(mlp, q, feet)
        grad6 = margin_gradient_wrt_config(mlp, kin, q, feet)
        J = np.zeros((1, window.shape[-1]))
        J[0, :6] = -grad6
        return np.array([target - m]), J

    return func


def ee_target_feature(kin: KinematicModel, target: np.ndarray):
    target = np.asarray(target, dtype=float)

    def func(window):
        q = Configuration.from_vector(window[-1])
        p = fk_frame(kin, q, "ee")[:3, 3]
        J = point_jacobian(kin, q, "ee", p)
        return p - target, J

    return func


def arm_limit_feature(kin: KinematicModel):
    n_a = kin.n_arm
    dim = kin.dim
    lo = kin.arm_limits[:, 0]
    hi = kin.arm_limits[:, 1]
    J = np.zeros((2 * n_a, dim))
    J[:n_a, 6:] = np.eye(n_a)
    J[n_a:, 6:] = -np.eye(n_a)

    def func(window):
        qa = window[-1][6:]
        return np.concatenate([qa - hi, lo - qa]), J

    return func


def collision_feature(kin: KinematicModel, obstacles, clearance: float = 0.0,
                      far_threshold: float = 0.2):
    obstacles = list(obstacles)
    pairs = default_pairs(kin, obstacles)

    def func(window):
        q = Configuration.from_vector(window[-1])
        results = pairwise_distances(
            kin, q, obstacles, pairs, far_threshold=clearance + far_threshold
        )
        r = np.array([clearance - res.distance for _, res, _ in results])
        J = np.array([-grad for _, _, grad in results])
        return r, J

    return func


def build_problem(scenario, kin: KinematicModel, mlp: Optional[MlpModel] = None):
    """Assemble the initial guess and term list for one scenario.

    With mlp=None the margin cost and margin lower-bound terms are omitted
    (the baseline planner); everything else is identical.
    """
    n = scenario.n_waypoints
    q0 = scenario.initial
    q0_vec = q0.to_vector()
    dim = kin.dim
    w = scenario.weights
    all_t = tuple(range(n + 1))
    later_t = tuple(range(1, n + 1))

    terms = [
        FeatureTerm(
            "position_bias", "cost", 0, all_t,
            position_bias_feature(q0_vec, kin.n_arm, w),
        ),
        FeatureTerm(
            "smoothness", "cost", 2, tuple(range(2, n + 1)),
            smoothness_feature(dim, w.smoothness),
        ),
        FeatureTerm("arm_limits", "ineq", 0, later_t, arm_limit_feature(kin)),
    ]

    for name, t, target in scenario.ee_targets:
        terms.append(
            FeatureTerm(f"ee_{name}", "eq", 0, (t,), ee_target_feature(kin, target))
        )

    if scenario.obstacles:
        terms.append(
            FeatureTerm(
                "collision", "ineq", 0, later_t,
                collision_feature(kin, scenario.obstacles, scenario.clearance),
            )
        )

    if mlp is not None:
        feet = scenario.feet
        terms.append(
            FeatureTerm(
                "margin_cost", "cost", 0, all_t,
                margin_feature(kin, mlp, feet, scenario.eps_star),
                weight=w.margin,
            )
        )
        terms.append(
            FeatureTerm(
                "margin_floor", "ineq", 0, all_t,
                margin_feature(kin, mlp, feet, scenario.eps_lower),
            )
        )

    return Trajectory.constant(q0, n), terms
