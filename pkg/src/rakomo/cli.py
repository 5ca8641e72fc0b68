"""Command-line front-end: plan scenarios, train/evaluate the margin surrogate,
and dump reachable-region polygons."""

import sys
from pathlib import Path

import click
import numpy as np

from .kinematics import Configuration, FootState, base_rotation, feet_in_base
from .reachability import RegionError, RegionQuery, compute_region, margin_batch, region_to_csv
from .scenario import ScenarioError, export, load_robot, load_scenario, run
from .surrogate import (
    SampleRanges,
    TrainConfig,
    desk_train_config,
    infer_batch,
    load_model,
    sample_dataset,
    save_model,
    train,
)


@click.group()
def main():
    """Margin-aware path planning for a legged manipulator."""


@main.command()
@click.argument("scenario_file", type=click.Path())
@click.option("--mode", type=click.Choice(["baseline", "rakomo"]), default=None,
              help="Override the scenario's planner mode.")
@click.option("--out", "out_dir", type=click.Path(), default="out",
              help="Artifact output directory.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--model", "model_file", type=click.Path(), default=None,
              help="Surrogate model file (overrides the scenario's).")
def plan(scenario_file, mode, out_dir, seed, model_file):
    """Plan one scenario and write trajectory/margin/region artifacts."""
    try:
        sc = load_scenario(scenario_file)
        if mode is not None:
            sc.mode = mode
        if seed is not None:
            sc.seed = seed
        if model_file is not None:
            sc.model_path = Path(model_file)
        artifacts = run(sc)
        files = export(artifacts, out_dir)
    except (ScenarioError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    rep = artifacts.report
    click.echo(f"{sc.name} [{rep['mode']}]: cost {rep['cost']:.4f}, "
               f"min oracle margin {rep['min_margin_oracle']:.4f} m, "
               f"solve {rep['timing']['solve_ms']:.0f} ms")
    for f in files:
        click.echo(f"  wrote {f}")
    if not rep["converged"]:
        click.echo(f"solver did not converge: {rep['flags']}", err=True)
        sys.exit(2)


@main.command("train-surrogate")
@click.argument("robot_config", type=click.Path())
@click.option("--samples", type=int, default=100_000, help="Dataset size.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_file", type=click.Path(), default="surrogate.rakm1")
def train_surrogate(robot_config, samples, seed, out_file):
    """Sample the margin oracle and fit the MLP surrogate."""
    try:
        model = load_robot(robot_config)
    except ScenarioError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    cfg = desk_train_config(sample_count=samples, seed=seed)
    ranges = SampleRanges()
    click.echo(f"sampling {samples} stances ...")
    X, y = sample_dataset(model, cfg, ranges)
    click.echo(f"training {cfg.epochs} epochs on {len(X)} samples ...")
    mlp, rep = train(X, y, cfg, ranges=ranges)
    save_model(mlp, out_file)
    click.echo(f"val RMSE {rep.final_val_rmse:.5f} m -> {out_file}")


@main.command("eval-surrogate")
@click.argument("model_file", type=click.Path())
@click.argument("robot_config", type=click.Path())
@click.option("--points", type=int, default=2000, help="Held-out sample count.")
@click.option("--seed", type=int, default=12345)
def eval_surrogate(model_file, robot_config, points, seed):
    """Report surrogate RMSE against the oracle on fresh samples."""
    try:
        kin = load_robot(robot_config)
        mlp = load_model(model_file)
    except (ScenarioError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    cfg = TrainConfig(sample_count=points, seed=seed)
    X, y = sample_dataset(kin, cfg, mlp.ranges or SampleRanges())
    err = infer_batch(mlp, X) - y
    click.echo(f"{len(X)} points: RMSE {np.sqrt(np.mean(err**2)):.5f} m, "
               f"max |err| {np.max(np.abs(err)):.5f} m")


@main.command()
@click.argument("robot_config", type=click.Path())
@click.option("--pose", nargs=6, type=float, default=(0.0, 0.0, 0.5, 0.0, 0.0, 0.0),
              help="Base pose: x y z roll pitch yaw.")
@click.option("--out", "out_file", type=click.Path(), default="region.csv")
def region(robot_config, pose, out_file):
    """Dump the reachable-region polygon for a base pose over the nominal stance."""
    try:
        kin = load_robot(robot_config)
    except ScenarioError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    q = Configuration(base_pos=pose[:3], base_euler=pose[3:], arm_q=np.zeros(kin.n_arm))
    hips = np.array([leg.hip_offset for leg in kin.legs])
    off = np.array([[0.0, leg.link_lengths[0] * leg.lateral_sign, 0.0] for leg in kin.legs])
    feet = FootState(hips + off + [pose[0], pose[1], 0.0])
    r_bw = base_rotation(q)
    query = RegionQuery(
        ez_in_base=r_bw @ np.array([0.0, 0.0, 1.0]),
        feet_in_base=feet_in_base(q, feet),
    )
    try:
        reg = compute_region(kin, query)
    except RegionError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    region_to_csv(reg, out_file, center=pose[:2])
    margins, _ = margin_batch(kin, query.ez_in_base[None], query.feet_in_base[None])
    click.echo(f"margin {margins[0]:.4f} m, area {reg.area():.4f} m^2 -> {out_file}")


if __name__ == "__main__":
    main()
