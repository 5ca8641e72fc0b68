"""Scenario configs, waypoint interpolation, batch runs, and artifact export.

Scenario and robot descriptions are TOML; runs produce plot-ready CSV plus a
JSON report so results can be regenerated and compared byte-for-byte.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .collision import ConvexShape
from .kinematics import (
    ArmJoint,
    Configuration,
    FootState,
    KinematicModel,
    LegModel,
    base_rotation,
    feet_in_base,
)
from .komo import FeatureTerm, SolverParams, Trajectory, Weights, build_problem, solve
from .reachability import RegionError, RegionQuery, compute_region, margin_batch, region_to_csv
from .surrogate import MlpModel, load_model, margin_estimate_at
from .transforms import make_tf, rpy_to_matrix

SCHEMA_VERSION = 1

# published reference solve times (ms) for the two planner modes; logged in
# report.json for comparison, never asserted (hardware-bound)
REFERENCE_TIMINGS_MS = {"baseline": 104.0, "rakomo": 270.0}


class ScenarioError(ValueError):
    """Config file failed validation; message carries path + field."""


def _check_keys(table: dict, allowed, where: str):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(unknown)}")


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ScenarioError(f"{where}: missing required field {key!r}")
    return table[key]


def _vec(value, n, where):
    v = np.asarray(value, dtype=float)
    if v.shape != (n,):
        raise ScenarioError(f"{where}: expected {n} numbers, got shape {v.shape}")
    return v


def _shape_from_table(tab: dict, where: str, posed: bool) -> ConvexShape:
    allowed = {"kind", "swept_radius", "radius", "half_length", "half_extents",
               "vertices", "axis_from", "axis_to"}
    if posed:
        allowed |= {"name", "position", "rpy"}
    else:
        allowed |= {"link", "position", "rpy"}
    _check_keys(tab, allowed, where)
    kind = _require(tab, "kind", where)
    swept = float(tab.get("swept_radius", 0.0))
    pos = _vec(tab.get("position", (0.0, 0.0, 0.0)), 3, f"{where}.position")
    R = rpy_to_matrix(_vec(tab.get("rpy", (0.0, 0.0, 0.0)), 3, f"{where}.rpy"))
    pose = make_tf(R, pos)
    if kind == "sphere":
        return ConvexShape("sphere", pose=pose, radius=float(_require(tab, "radius", where)),
                           swept_radius=swept)
    if kind == "capsule":
        r = float(_require(tab, "radius", where))
        if "axis_from" in tab or "axis_to" in tab:
            a = _vec(_require(tab, "axis_from", where), 3, f"{where}.axis_from")
            b = _vec(_require(tab, "axis_to", where), 3, f"{where}.axis_to")
            axis = b - a
            ln = np.linalg.norm(axis)
            if ln < 1e-9:
                raise ScenarioError(f"{where}: capsule axis endpoints coincide")
            z = axis / ln
            # any frame whose z-axis lies along the segment
            ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            x = np.cross(ref, z)
            x /= np.linalg.norm(x)
            Rc = np.column_stack([x, np.cross(z, x), z])
            pose = make_tf(R @ Rc, pos + R @ (0.5 * (a + b)))
            return ConvexShape("capsule", pose=pose, radius=r, half_length=0.5 * ln,
                               swept_radius=swept)
        return ConvexShape("capsule", pose=pose, radius=r,
                           half_length=float(_require(tab, "half_length", where)),
                           swept_radius=swept)
    if kind == "box":
        return ConvexShape("box", pose=pose,
                           half_extents=_vec(_require(tab, "half_extents", where), 3,
                                             f"{where}.half_extents"),
                           swept_radius=swept)
    if kind == "hull":
        return ConvexShape("hull", pose=pose,
                           vertices=np.asarray(_require(tab, "vertices", where), dtype=float),
                           swept_radius=swept)
    raise ScenarioError(f"{where}: unknown shape kind {kind!r}")


def load_robot(path) -> KinematicModel:
    """Build a KinematicModel from a TOML robot description."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"robot config not found: {path}")
    with open(path, "rb") as f:
        data = tomllib.load(f)
    where = str(path)
    _check_keys(data, {"schema", "base", "arm", "legs", "collision", "exclude_pairs"}, where)
    if data.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"{where}: schema must be {SCHEMA_VERSION}")

    base = _require(data, "base", where)
    _check_keys(base, {"half_extents"}, f"{where}.base")
    base_box = _vec(_require(base, "half_extents", f"{where}.base"), 3,
                    f"{where}.base.half_extents")

    arm = _require(data, "arm", where)
    _check_keys(arm, {"joints", "ee_offset"}, f"{where}.arm")
    joints = []
    limits = []
    for i, jt in enumerate(_require(arm, "joints", f"{where}.arm")):
        jw = f"{where}.arm.joints[{i}]"
        _check_keys(jt, {"origin", "rpy", "axis", "limits"}, jw)
        joints.append(ArmJoint(
            origin=_vec(_require(jt, "origin", jw), 3, jw),
            rpy=_vec(jt.get("rpy", (0.0, 0.0, 0.0)), 3, jw),
            axis=_vec(_require(jt, "axis", jw), 3, jw),
        ))
        limits.append(_vec(_require(jt, "limits", jw), 2, jw))

    legs = []
    for i, lt in enumerate(_require(data, "legs", where)):
        lw = f"{where}.legs[{i}]"
        _check_keys(lt, {"hip_offset", "link_lengths", "joint_limits", "lateral_sign"}, lw)
        jl = np.asarray(_require(lt, "joint_limits", lw), dtype=float)
        if jl.shape != (3, 2):
            raise ScenarioError(f"{lw}.joint_limits: expected 3x2 table")
        legs.append(LegModel(
            hip_offset=_vec(_require(lt, "hip_offset", lw), 3, lw),
            link_lengths=_vec(_require(lt, "link_lengths", lw), 3, lw),
            joint_limits=jl,
            lateral_sign=float(_require(lt, "lateral_sign", lw)),
        ))

    bodies = []
    for i, ct in enumerate(data.get("collision", [])):
        cw = f"{where}.collision[{i}]"
        link = _require(ct, "link", cw)
        shape_tab = {k: v for k, v in ct.items() if k != "link"}
        bodies.append((link, _shape_from_table(shape_tab, cw, posed=False)))

    exclude = frozenset(frozenset(p) for p in data.get("exclude_pairs", []))
    return KinematicModel(
        arm_joints=tuple(joints),
        arm_limits=np.array(limits),
        base_box=base_box,
        ee_offset=make_tf(t=_vec(arm.get("ee_offset", (0.0, 0.0, 0.0)), 3,
                                 f"{where}.arm.ee_offset")),
        legs=tuple(legs),
        collision_bodies=tuple(bodies),
        exclude_pairs=exclude,
    )


@dataclass
class Scenario:
    name: str
    robot: KinematicModel
    robot_path: Path
    initial: Configuration
    feet: FootState
    obstacles: list
    obstacle_names: list
    ee_targets: list  # (name, slice, target xyz)
    n_waypoints: int = 15
    eps_star: float = 0.15
    eps_lower: float = 0.05
    clearance: float = 0.0
    mode: str = "rakomo"
    weights: Weights = field(default_factory=Weights)
    solver: SolverParams = field(default_factory=SolverParams)
    v_max: np.ndarray = None
    f_s: float = 250.0
    seed: int = 0
    model_path: Optional[Path] = None

    def __post_init__(self):
        if self.n_waypoints < 2:
            raise ScenarioError(f"{self.name}: n_waypoints must be at least 2")
        if self.eps_lower >= self.eps_star:
            raise ScenarioError(f"{self.name}: eps_lower must be below eps_star")
        if self.mode not in ("baseline", "rakomo"):
            raise ScenarioError(f"{self.name}: mode must be baseline or rakomo")
        for name, t, target in self.ee_targets:
            if not 0 < t <= self.n_waypoints:
                raise ScenarioError(
                    f"{self.name}: target {name!r} slice {t} outside 1..{self.n_waypoints}"
                )
            reach = _max_reach(self.robot)
            if np.linalg.norm(np.asarray(target) - self.initial.base_pos) > reach:
                raise ScenarioError(
                    f"{self.name}: target {name!r} beyond any possible reach ({reach:.2f} m)"
                )
        if self.v_max is None:
            self.v_max = np.concatenate(
                [np.full(3, 0.5), np.full(3, 0.8), np.full(self.robot.n_arm, 1.2)]
            )
        self.v_max = np.asarray(self.v_max, dtype=float)
        if self.v_max.shape != (self.robot.dim,) or np.any(self.v_max <= 0):
            raise ScenarioError(f"{self.name}: v_max must be {self.robot.dim} positive values")
        if self.f_s <= 0:
            raise ScenarioError(f"{self.name}: f_s must be positive")


def _max_reach(model: KinematicModel) -> float:
    # generous bound: arm span plus an allowance for base travel
    span = sum(np.linalg.norm(j.origin) for j in model.arm_joints)
    span += np.linalg.norm(model.ee_offset[:3, 3])
    return span + 2.0


_SCENARIO_KEYS = {
    "schema", "name", "robot", "mode", "n_waypoints", "eps_star", "eps_lower",
    "clearance", "seed", "surrogate_model", "initial", "weights", "solver",
    "interpolation", "targets", "obstacles",
}


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    with open(path, "rb") as f:
        data = tomllib.load(f)
    where = str(path)
    _check_keys(data, _SCENARIO_KEYS, where)
    if data.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"{where}: schema must be {SCHEMA_VERSION}")

    robot_path = (path.parent / _require(data, "robot", where)).resolve()
    robot = load_robot(robot_path)

    init = _require(data, "initial", where)
    _check_keys(init, {"base_pos", "base_euler", "arm_q", "feet"}, f"{where}.initial")
    q0 = Configuration(
        base_pos=_vec(_require(init, "base_pos", f"{where}.initial"), 3, f"{where}.initial"),
        base_euler=_vec(init.get("base_euler", (0.0, 0.0, 0.0)), 3, f"{where}.initial"),
        arm_q=_vec(init.get("arm_q", np.zeros(robot.n_arm)), robot.n_arm, f"{where}.initial"),
    )
    if "feet" in init:
        feet = FootState(np.asarray(init["feet"], dtype=float))
        if feet.positions_world.shape != (len(robot.legs), 3):
            raise ScenarioError(f"{where}.initial.feet: expected {len(robot.legs)}x3")
    else:
        hips = np.array([leg.hip_offset for leg in robot.legs])
        off = np.array([[0.0, leg.link_lengths[0] * leg.lateral_sign, 0.0]
                        for leg in robot.legs])
        feet = FootState(hips + off + [q0.base_pos[0], q0.base_pos[1], 0.0])

    wtab = data.get("weights", {})
    _check_keys(wtab, {"base_bias", "arm_bias", "smoothness", "margin"}, f"{where}.weights")
    weights = Weights(**{k: float(v) for k, v in wtab.items()})

    stab = data.get("solver", {})
    _check_keys(stab, set(SolverParams.__dataclass_fields__), f"{where}.solver")
    solver = SolverParams(**{k: type(getattr(SolverParams(), k))(v) for k, v in stab.items()})

    itab = data.get("interpolation", {})
    _check_keys(itab, {"f_s", "v_max"}, f"{where}.interpolation")
    f_s = float(itab.get("f_s", 250.0))
    v_max = None
    if "v_max" in itab:
        v_max = _vec(itab["v_max"], robot.dim, f"{where}.interpolation.v_max")

    targets = []
    for i, tt in enumerate(data.get("targets", [])):
        tw = f"{where}.targets[{i}]"
        _check_keys(tt, {"name", "slice", "position"}, tw)
        targets.append((
            tt.get("name", f"target_{i}"),
            int(_require(tt, "slice", tw)),
            _vec(_require(tt, "position", tw), 3, tw),
        ))

    obstacles = []
    obstacle_names = []
    for i, ot in enumerate(data.get("obstacles", [])):
        ow = f"{where}.obstacles[{i}]"
        obstacles.append(_shape_from_table(ot, ow, posed=True))
        obstacle_names.append(ot.get("name", f"obstacle_{i}"))

    model_path = None
    if "surrogate_model" in data:
        model_path = (path.parent / data["surrogate_model"]).resolve()

    return Scenario(
        name=data.get("name", path.stem),
        robot=robot,
        robot_path=robot_path,
        initial=q0,
        feet=feet,
        obstacles=obstacles,
        obstacle_names=obstacle_names,
        ee_targets=targets,
        n_waypoints=int(data.get("n_waypoints", 15)),
        eps_star=float(data.get("eps_star", 0.15)),
        eps_lower=float(data.get("eps_lower", 0.05)),
        clearance=float(data.get("clearance", 0.0)),
        mode=data.get("mode", "rakomo"),
        weights=weights,
        solver=solver,
        v_max=v_max,
        f_s=f_s,
        seed=int(data.get("seed", 0)),
        model_path=model_path,
    )


def interpolate(traj: Trajectory, v_max, f_s: float):
    """Densify waypoints at f_s Hz respecting per-dimension velocity limits.

    Per segment the sample count is max over dimensions of
    ceil(|dq_i| / v_max_i * f_s), at least 1; interpolation is linear.
    Returns (dense (M, dim), times (M,)).
    """
    v_max = np.asarray(v_max, dtype=float)
    if np.any(v_max <= 0) or f_s <= 0:
        raise ValueError("v_max and f_s must be positive")
    X = traj.points
    dense = [X[0]]
    for t in range(1, X.shape[0]):
        dq = X[t] - X[t - 1]
        count = max(1, int(np.max(np.ceil(np.abs(dq) / v_max * f_s))))
        for s in range(1, count + 1):
            dense.append(X[t - 1] + (s / count) * dq)
    dense = np.array(dense)
    times = np.arange(len(dense)) / f_s
    return dense, times


@dataclass
class RunArtifacts:
    scenario: Scenario
    planned: Trajectory
    dense: np.ndarray
    times: np.ndarray
    margin_oracle_trace: np.ndarray
    margin_oracle_ok: np.ndarray
    margin_surrogate_trace: Optional[np.ndarray]
    report: dict
    regions: list  # (sample index, ReachableRegion or None, base xy)


def run(scenario: Scenario, mlp: Optional[MlpModel] = None) -> RunArtifacts:
    """Plan, densify, and evaluate the oracle margin along the execution."""
    model = scenario.robot
    if scenario.mode == "rakomo" and mlp is None:
        if scenario.model_path is None:
            raise ScenarioError(
                f"{scenario.name}: rakomo mode needs a surrogate model "
                "(surrogate_model field or --model)"
            )
        mlp = load_model(scenario.model_path)

    traj0, terms = build_problem(scenario, model, mlp if scenario.mode == "rakomo" else None)
    # pin the first slice so execution starts exactly at the given configuration
    q0_vec = scenario.initial.to_vector()
    terms.append(FeatureTerm(
        "fix_start", "eq", 0, (0,),
        lambda window: (window[-1] - q0_vec, np.eye(len(q0_vec))),
    ))
    planned, report = solve(traj0, terms, scenario.solver)
    planned.points[0] = q0_vec  # snap away the residual constraint tolerance

    dense, times = interpolate(planned, scenario.v_max, scenario.f_s)

    feet = scenario.feet
    ez = np.zeros((len(dense), 3))
    fib = np.zeros((len(dense), len(model.legs), 3))
    for i, row in enumerate(dense):
        q = Configuration.from_vector(row)
        r_bw = base_rotation(q)
        ez[i] = r_bw @ np.array([0.0, 0.0, 1.0])
        fib[i] = feet_in_base(q, feet)
    margins, ok = margin_batch(model, ez, fib)

    sur_trace = None
    if scenario.mode == "rakomo":
        sur_trace = np.array([
            margin_estimate_at(mlp, Configuration.from_vector(row), feet) for row in dense
        ])

    regions = []
    for idx in (0, len(dense) // 2, len(dense) - 1):
        q = Configuration.from_vector(dense[idx])
        query = RegionQuery(ez_in_base=ez[idx], feet_in_base=fib[idx])
        try:
            region = compute_region(model, query)
        except RegionError:
            region = None
        regions.append((idx, region, q.base_pos[:2].copy()))

    rep = report.to_dict()
    rep.update({
        "scenario": scenario.name,
        "mode": scenario.mode,
        "n_waypoints": scenario.n_waypoints,
        "seed": scenario.seed,
        "min_margin_oracle": float(np.min(margins)),
        "min_margin_surrogate": (float(np.min(sur_trace)) if sur_trace is not None else None),
        "eps_star": scenario.eps_star,
        "eps_lower": scenario.eps_lower,
        "timing": {
            "solve_ms": rep["wall_time"] * 1e3,
            "reference_ms": REFERENCE_TIMINGS_MS[scenario.mode],
        },
    })
    del rep["wall_time"]

    return RunArtifacts(
        scenario=scenario,
        planned=planned,
        dense=dense,
        times=times,
        margin_oracle_trace=margins,
        margin_oracle_ok=ok,
        margin_surrogate_trace=sur_trace,
        report=rep,
        regions=regions,
    )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")


def export(artifacts: RunArtifacts, out_dir) -> list:
    """Write trajectory.csv, margin.csv, joints.csv, report.json, region_k.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = artifacts.scenario
    model = sc.robot
    written = []

    cols = (["time"]
            + [f"base_{c}" for c in "xyz"]
            + ["roll", "pitch", "yaw"]
            + [f"arm_{j + 1}" for j in range(model.n_arm)])
    rows = np.column_stack([artifacts.times, artifacts.dense])
    p = out / "trajectory.csv"
    _write_csv(p, cols, rows)
    written.append(p)

    sur = artifacts.margin_surrogate_trace
    if sur is None:
        sur = np.full(len(artifacts.times), np.nan)
    p = out / "margin.csv"
    _write_csv(p, ["time", "margin_oracle", "margin_surrogate"],
               np.column_stack([artifacts.times, artifacts.margin_oracle_trace, sur]))
    written.append(p)

    p = out / "joints.csv"
    _write_csv(p, ["time"] + [f"arm_{j + 1}" for j in range(model.n_arm)],
               np.column_stack([artifacts.times, artifacts.dense[:, 6:]]))
    written.append(p)

    p = out / "report.json"
    with open(p, "w") as f:
        json.dump(artifacts.report, f, indent=2, sort_keys=True)
        f.write("\n")
    written.append(p)

    for k, (idx, region, center) in enumerate(artifacts.regions):
        p = out / f"region_{k}.csv"
        if region is None:
            with open(p, "w", newline="") as f:
                f.write("x,y\n")
        else:
            region_to_csv(region, p, center=center)
        written.append(p)
    return written
