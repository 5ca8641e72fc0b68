import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from rakomo.komo import Trajectory
from rakomo.scenario import (
    ScenarioError,
    export,
    interpolate,
    load_robot,
    load_scenario,
    run,
)

SCEN_DIR = Path(__file__).resolve().parents[1] / "scenarios"


def _write_small(tmp_path, **overrides):
    """Tiny baseline scenario for fast end-to-end runs."""
    shutil.copy(SCEN_DIR / "robot.toml", tmp_path / "robot.toml")
    fields = {
        "mode": '"baseline"',
        "n_waypoints": 4,
        "target_pos": "[0.8, 0.0, 0.7]",
        "extra": "",
    }
    fields.update(overrides)
    text = f"""
schema = 1
name = "small"
robot = "robot.toml"
mode = {fields["mode"]}
n_waypoints = {fields["n_waypoints"]}
eps_star = 0.15
eps_lower = 0.05
seed = 0

[initial]
base_pos = [0.0, 0.0, 0.5]
base_euler = [0.0, 0.0, 0.0]
arm_q = [0.0, 0.5, -1.0, 0.0, 0.5, 0.0]

[interpolation]
f_s = 20.0

[[targets]]
name = "touch"
slice = {fields["n_waypoints"]}
position = {fields["target_pos"]}
{fields["extra"]}
"""
    p = tmp_path / "small.toml"
    p.write_text(text)
    return p


def test_load_shipped_scenario():
    sc = load_scenario(SCEN_DIR / "low_grasp.toml")
    assert sc.name == "low_grasp"
    assert sc.n_waypoints == 15
    assert sc.eps_star == 0.15 and sc.eps_lower == 0.05
    assert sc.mode == "rakomo"
    names = [t[0] for t in sc.ee_targets]
    assert names == ["grasp"]
    assert sc.obstacle_names == ["crate"]
    assert sc.feet.positions_world.shape == (4, 3)
    assert sc.v_max.shape == (sc.robot.dim,)


def test_unknown_field_rejected(tmp_path):
    p = _write_small(tmp_path, extra="frobnicate = 3")
    with pytest.raises(ScenarioError, match="unknown field"):
        load_scenario(p)


def test_missing_robot_file(tmp_path):
    p = _write_small(tmp_path)
    (tmp_path / "robot.toml").unlink()
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(p)


def test_bad_mode_rejected(tmp_path):
    p = _write_small(tmp_path, mode='"sideways"')
    with pytest.raises(ScenarioError, match="mode"):
        load_scenario(p)


def test_target_slice_out_of_range(tmp_path):
    p = _write_small(tmp_path, extra='[[targets]]\nname = "late"\nslice = 9\nposition = [0.5, 0.0, 0.5]')
    with pytest.raises(ScenarioError, match="slice"):
        load_scenario(p)


def test_target_beyond_reach(tmp_path):
    p = _write_small(tmp_path, target_pos="[9.0, 0.0, 0.5]")
    with pytest.raises(ScenarioError, match="reach"):
        load_scenario(p)


def test_eps_ordering_enforced(tmp_path):
    p = _write_small(tmp_path)
    text = p.read_text().replace("eps_lower = 0.05", "eps_lower = 0.2")
    p.write_text(text)
    with pytest.raises(ScenarioError, match="eps_lower"):
        load_scenario(p)


def test_robot_unknown_key_rejected(tmp_path):
    src = (SCEN_DIR / "robot.toml").read_text()
    bad = tmp_path / "robot.toml"
    bad.write_text(src + "\nwheels = 4\n")
    with pytest.raises(ScenarioError, match="unknown field"):
        load_robot(bad)


def test_robot_schema_checked(tmp_path):
    src = (SCEN_DIR / "robot.toml").read_text()
    bad = tmp_path / "robot.toml"
    bad.write_text(src.replace("schema = 1", "schema = 2", 1))
    with pytest.raises(ScenarioError, match="schema"):
        load_robot(bad)


def test_interpolate_respects_velocity_limits():
    rng = np.random.default_rng(2)
    X = np.cumsum(rng.normal(0, 0.2, (6, 4)), axis=0)
    v_max = np.array([0.5, 0.5, 0.3, 1.0])
    f_s = 50.0
    dense, times = interpolate(Trajectory(X), v_max, f_s)
    assert np.allclose(dense[0], X[0]) and np.allclose(dense[-1], X[-1])
    assert np.allclose(np.diff(times), 1.0 / f_s)
    steps = np.abs(np.diff(dense, axis=0))
    assert np.all(steps <= v_max / f_s + 1e-12)
    # every waypoint appears in the dense path
    for x in X:
        assert np.min(np.max(np.abs(dense - x), axis=1)) < 1e-12


def test_interpolate_validates_inputs():
    with pytest.raises(ValueError):
        interpolate(Trajectory(np.zeros((3, 2))), np.array([1.0, -1.0]), 100.0)
    with pytest.raises(ValueError):
        interpolate(Trajectory(np.zeros((3, 2))), np.ones(2), 0.0)


def test_run_and_export_small_scenario(tmp_path):
    sc = load_scenario(_write_small(tmp_path))
    art = run(sc)
    rep = art.report
    assert rep["converged"]
    assert rep["mode"] == "baseline"
    assert rep["min_margin_surrogate"] is None
    assert art.margin_oracle_trace.shape == art.times.shape
    assert np.all(art.margin_oracle_ok)
    # solved trajectory starts exactly at the initial configuration
    assert np.array_equal(art.planned.points[0], sc.initial.to_vector())
    # end-effector reaches the target
    from rakomo.kinematics import Configuration, fk_frame

    qf = Configuration.from_vector(art.planned.points[-1])
    ee = fk_frame(sc.robot, qf, "ee")[:3, 3]
    assert np.linalg.norm(ee - sc.ee_targets[0][2]) < 1e-3

    files = export(art, tmp_path / "out")
    names = {f.name for f in files}
    assert {"trajectory.csv", "margin.csv", "joints.csv", "report.json",
            "region_0.csv", "region_1.csv", "region_2.csv"} <= names
    with open(tmp_path / "out" / "report.json") as f:
        on_disk = json.load(f)
    assert on_disk["scenario"] == "small"
    lines = (tmp_path / "out" / "trajectory.csv").read_text().splitlines()
    assert len(lines) == len(art.times) + 1


def test_run_deterministic_modulo_timing(tmp_path):
    sc1 = load_scenario(_write_small(tmp_path))
    sc2 = load_scenario(_write_small(tmp_path))
    a1, a2 = run(sc1), run(sc2)
    assert np.array_equal(a1.planned.points, a2.planned.points)
    assert np.array_equal(a1.dense, a2.dense)
    assert np.array_equal(a1.margin_oracle_trace, a2.margin_oracle_trace)
    r1, r2 = dict(a1.report), dict(a2.report)
    r1.pop("timing"), r2.pop("timing")
    assert r1 == r2


def test_rakomo_mode_requires_model(tmp_path):
    p = _write_small(tmp_path, mode='"rakomo"')
    sc = load_scenario(p)
    with pytest.raises(ScenarioError, match="surrogate"):
        run(sc)
