import numpy as np
import pytest

from rakomo.kinematics import Configuration, FootState, nominal_model, nominal_stance
from rakomo.reachability import margin_batch
from rakomo.surrogate import (
    MlpModel,
    SampleRanges,
    TrainConfig,
    desk_train_config,
    infer,
    infer_batch,
    init_model,
    input_gradient,
    load_model,
    margin_estimate_at,
    margin_gradient_wrt_config,
    sample_dataset,
    save_model,
    train,
)

RNG = np.random.default_rng(7)


def _toy_model(input_dim=5, hidden=(16, 8), seed=3):
    return init_model(input_dim, hidden, np.random.default_rng(seed), ranges=SampleRanges())


def test_infer_batch_shape_and_scalar_agreement():
    m = _toy_model()
    X = RNG.normal(0, 1.0, (12, 5))
    out = infer_batch(m, X)
    assert out.shape == (12,)
    assert infer(m, X[3]) == pytest.approx(out[3])


def test_infer_rejects_wrong_dimension():
    m = _toy_model()
    with pytest.raises(ValueError, match="dim"):
        infer_batch(m, np.zeros((4, 7)))


def test_model_layer_chain_validation():
    with pytest.raises(ValueError):
        MlpModel(
            weights=(np.zeros((4, 3)), np.zeros((1, 5))),
            biases=(np.zeros(4), np.zeros(1)),
            norm_mean=np.zeros(3),
            norm_scale=np.ones(3),
        )


def test_input_gradient_matches_finite_difference():
    m = _toy_model(input_dim=8, hidden=(32, 16))
    eps = 1e-6
    worst = 0.0
    for _ in range(30):
        x = RNG.normal(0, 1.0, 8)
        g = input_gradient(m, x)
        fd = np.zeros(8)
        for k in range(8):
            xp, xm = x.copy(), x.copy()
            xp[k] += eps
            xm[k] -= eps
            fd[k] = (infer(m, xp) - infer(m, xm)) / (2 * eps)
        worst = max(worst, np.max(np.abs(g - fd)))
    assert worst < 1e-6


def test_config_gradient_matches_estimate_finite_difference():
    kin = nominal_model()
    q, feet = nominal_stance(kin, 0.5)
    m = init_model(3 + 3 * feet.positions_world.shape[0], (32, 16), np.random.default_rng(5))
    g = margin_gradient_wrt_config(m, kin, q, feet)

    eps = 1e-6
    vec = np.concatenate([q.base_pos, q.base_euler])
    fd = np.zeros(6)
    for k in range(6):
        for sign, out in ((1.0, "p"), (-1.0, "m")):
            v = vec.copy()
            v[k] += sign * eps
            qk = Configuration(v[:3], v[3:], q.arm_q)
            val = margin_estimate_at(m, qk, feet)
            if sign > 0:
                fp = val
            else:
                fm = val
        fd[k] = (fp - fm) / (2 * eps)
    assert np.max(np.abs(g - fd)) < 1e-6


def test_estimate_invariant_under_rigid_xy_translation():
    kin = nominal_model()
    q, feet = nominal_stance(kin, 0.52)
    m = init_model(15, (16, 8), np.random.default_rng(1))
    v0 = margin_estimate_at(m, q, feet)
    shift = np.array([0.7, -0.3, 0.0])
    q2 = Configuration(np.asarray(q.base_pos) + shift, q.base_euler, q.arm_q)
    feet2 = FootState(feet.positions_world + shift)
    assert margin_estimate_at(m, q2, feet2) == pytest.approx(v0, abs=1e-12)


def test_sample_dataset_deterministic_and_oracle_consistent():
    kin = nominal_model()
    cfg = TrainConfig(sample_count=64, seed=21)
    ranges = SampleRanges(foot_jitter=0.03, base_xy_delta=0.1)
    X1, y1 = sample_dataset(kin, cfg, ranges)
    X2, y2 = sample_dataset(kin, cfg, ranges)
    assert np.array_equal(X1, X2) and np.array_equal(y1, y2)
    assert X1.shape == (64, 15) and y1.shape == (64,)
    # labels are exactly the oracle margins of the encoded stances
    m, ok = margin_batch(kin, X1[:, :3], X1[:, 3:].reshape(64, -1, 3))
    assert np.all(ok)
    assert np.allclose(m, y1, atol=1e-12)


def test_sample_dataset_rejects_infeasible_ranges():
    kin = nominal_model()
    cfg = TrainConfig(sample_count=64, seed=0)
    with pytest.raises(RuntimeError, match="rejection"):
        sample_dataset(kin, cfg, SampleRanges(height_center=1.4, height_delta=0.01))


def test_training_fits_linear_target():
    # the network should drive a simple linear map well below the init error
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (4000, 6))
    w = np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.25])
    y = X @ w + 0.05
    cfg = TrainConfig(
        sample_count=4000, epochs=200, seed=4, hidden=(32, 16),
        optimizer="adam", learning_rate=3e-3, lr_decay=0.99,
    )
    model, rep = train(X, y, cfg)
    assert rep.final_val_rmse < 0.03
    assert rep.val_mse[-1] < rep.val_mse[0]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    cfg = desk_train_config(sample_count=123, seed=9)
    assert cfg.sample_count == 123 and cfg.seed == 9 and cfg.optimizer == "adam"


def test_save_load_roundtrip(tmp_path):
    m = _toy_model(input_dim=15, hidden=(24, 12), seed=8)
    path = tmp_path / "model.rakm1"
    save_model(m, path)
    m2 = load_model(path)
    for W, W2 in zip(m.weights, m2.weights):
        assert np.array_equal(W, W2)
    for b, b2 in zip(m.biases, m2.biases):
        assert np.array_equal(b, b2)
    assert np.array_equal(m.norm_mean, m2.norm_mean)
    assert np.array_equal(m.norm_scale, m2.norm_scale)
    assert m2.ranges == m.ranges
    X = RNG.normal(0, 1.0, (6, 15))
    assert np.array_equal(infer_batch(m, X), infer_batch(m2, X))


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.rakm1"
    path.write_bytes(b"NOPE!" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_model(path)
