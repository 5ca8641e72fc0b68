"""MLP surrogate of the reachability margin.

Covers the full pipeline: dataset generation from the numeric oracle, seeded
mini-batch training, forward inference, exact input gradients through the
ReLU network, and the chain rules mapping those gradients to base position
and orientation. Everything is plain numpy; the model is small enough that
no autodiff framework is warranted.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kinematics import Configuration, FootState, KinematicModel, check_gimbal
from .reachability import margin_batch, rotation_from_ez
from .transforms import rpy_matrix_derivatives, rpy_to_matrix

MAGIC = b"RAKM1"


@dataclass
class SampleRanges:
    """Uniform sampling ranges around the nominal stance."""

    height_center: float = 0.5
    height_delta: float = 0.12
    roll_pitch_delta: float = 0.2
    yaw_delta: float = 0.3
    foot_jitter: float = 0.08
    base_xy_delta: float = 0.5

    def to_dict(self):
        return {
            "height_center": self.height_center,
            "height_delta": self.height_delta,
            "roll_pitch_delta": self.roll_pitch_delta,
            "yaw_delta": self.yaw_delta,
            "foot_jitter": self.foot_jitter,
            "base_xy_delta": self.base_xy_delta,
        }

    @staticmethod
    def from_dict(d):
        return SampleRanges(**d)


@dataclass
class TrainConfig:
    sample_count: int = 100_000
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 60
    val_fraction: float = 0.1
    seed: int = 0
    hidden: tuple = (512, 256, 128)
    optimizer: str = "momentum"  # "momentum" or "adam"
    momentum: float = 0.9
    lr_decay: float = 1.0  # multiplicative, per epoch

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("validation fraction must be in (0, 1)")
        if min(self.sample_count, self.batch_size, self.epochs) <= 0 or self.learning_rate <= 0:
            raise ValueError("training config values must be positive")


def desk_train_config(sample_count: int = 100_000, seed: int = 0) -> TrainConfig:
    """Training setup validated to reach held-out RMSE below 0.01 m at desk scale."""
    return TrainConfig(
        sample_count=sample_count,
        seed=seed,
        epochs=150,
        optimizer="adam",
        hidden=(256, 128, 64),
        lr_decay=0.985,
    )


@dataclass(frozen=True)
class MlpModel:
    """ReLU MLP with input z-score normalization folded into the model."""

    weights: tuple  # layer weight matrices, each (out, in)
    biases: tuple
    norm_mean: np.ndarray
    norm_scale: np.ndarray
    ranges: Optional[SampleRanges] = None

    def __post_init__(self):
        for W, Wn in zip(self.weights[:-1], self.weights[1:]):
            if Wn.shape[1] != W.shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output dimension must be 1")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


@dataclass
class TrainReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    @property
    def final_val_rmse(self) -> float:
        return float(np.sqrt(self.val_mse[-1]))


def init_model(input_dim: int, hidden, rng, ranges=None) -> MlpModel:
    """He-initialized network with identity normalization."""
    dims = [input_dim, *hidden, 1]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / din), size=(dout, din)))
        biases.append(np.zeros(dout))
    return MlpModel(
        weights=tuple(weights),
        biases=tuple(biases),
        norm_mean=np.zeros(input_dim),
        norm_scale=np.ones(input_dim),
        ranges=ranges,
    )


def _forward(model: MlpModel, X: np.ndarray):
    """Returns (outputs (B,), pre-activations per hidden layer)."""
    a = (X - model.norm_mean) / model.norm_scale
    acts = [a]
    n = len(model.weights)
    for i in range(n - 1):
        z = a @ model.weights[i].T + model.biases[i]
        a = np.maximum(z, 0.0)
        acts.append(a)
    out = a @ model.weights[-1].T + model.biases[-1]
    return out[:, 0], acts


def infer_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != model.input_dim:
        raise ValueError(f"input dim {X.shape[-1]} != model dim {model.input_dim}")
    out, _ = _forward(model, np.atleast_2d(X))
    return out


def infer(model: MlpModel, x_r) -> float:
    """Margin estimate for one raw input vector."""
    return float(infer_batch(model, np.asarray(x_r, dtype=float)[None])[0])


def input_gradient(model: MlpModel, x_r) -> np.ndarray:
    """Exact gradient of the output w.r.t. the raw input (subgradient 0 at kinks)."""
    x = np.asarray(x_r, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != model dim {model.input_dim}")
    _, acts = _forward(model, x[None])
    g = model.weights[-1].copy()  # (1, last_hidden)
    for i in range(len(model.weights) - 2, -1, -1):
        active = (acts[i + 1][0] > 0.0).astype(float)
        g = (g * active) @ model.weights[i]
    return g[0] / model.norm_scale


def sample_dataset(
    model: KinematicModel,
    cfg: TrainConfig,
    ranges: SampleRanges = SampleRanges(),
    nominal_feet: Optional[np.ndarray] = None,
):
    """Draw margin samples around the nominal stance; infeasible draws are redrawn.

    Returns (X (S, 3+3*Nc), y (S,)). Deterministic for a given seed.
    """
    if nominal_feet is None:
        from .kinematics import nominal_stance

        _, fs = nominal_stance(model, ranges.height_center)
        nominal_feet = fs.positions_world
    nominal_feet = np.asarray(nominal_feet, dtype=float)
    nc = nominal_feet.shape[0]
    rng = np.random.default_rng(cfg.seed)
    want = cfg.sample_count
    xs, ys = [], []
    drawn = kept = 0
    while sum(len(y) for y in ys) < want:
        n = max(1024, want - sum(len(y) for y in ys))
        h = ranges.height_center + rng.uniform(-ranges.height_delta, ranges.height_delta, n)
        rp = rng.uniform(-ranges.roll_pitch_delta, ranges.roll_pitch_delta, (n, 2))
        yaw = rng.uniform(-ranges.yaw_delta, ranges.yaw_delta, n)
        jit = rng.uniform(-ranges.foot_jitter, ranges.foot_jitter, (n, nc, 2))
        feet_w = np.repeat(nominal_feet[None], n, axis=0)
        feet_w[:, :, :2] += jit
        euler = np.concatenate([rp, yaw[:, None]], axis=1)
        R = np.stack([rpy_to_matrix(e) for e in euler])  # world-from-base
        base = np.zeros((n, 3))
        base[:, :2] = rng.uniform(-ranges.base_xy_delta, ranges.base_xy_delta, (n, 2))
        base[:, 2] = h
        feet_b = np.einsum("sji,snj->sni", R, feet_w - base[:, None, :])
        ez = R[:, 2, :]  # R_bw @ z == third row of world-from-base
        m, ok = margin_batch(model, ez, feet_b)
        drawn += n
        kept += int(ok.sum())
        if drawn >= 4096 and kept < 0.1 * drawn:
            raise RuntimeError(
                f"rejection rate {(1 - kept / drawn):.0%} too high; sampling ranges "
                "leave the stance infeasible almost everywhere"
            )
        X = np.concatenate([ez, feet_b.reshape(n, -1)], axis=1)
        xs.append(X[ok])
        ys.append(m[ok])
    X = np.concatenate(xs)[:want]
    y = np.concatenate(ys)[:want]
    return X, y


def train(X: np.ndarray, y: np.ndarray, cfg: TrainConfig, ranges=None):
    """Seeded mini-batch MSE training; returns (MlpModel, TrainReport)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xtr, ytr, Xval, yval = X[tr_idx], y[tr_idx], X[val_idx], y[val_idx]

    mean = Xtr.mean(axis=0)
    scale = Xtr.std(axis=0)
    scale[scale < 1e-12] = 1.0

    model = init_model(X.shape[1], cfg.hidden, rng, ranges=ranges)
    model = MlpModel(model.weights, model.biases, mean, scale, ranges=ranges)
    Ws = [W.copy() for W in model.weights]
    bs = [b.copy() for b in model.biases]

    vel_W = [np.zeros_like(W) for W in Ws]
    vel_b = [np.zeros_like(b) for b in bs]
    if cfg.optimizer == "adam":
        mW = [np.zeros_like(W) for W in Ws]
        vW = [np.zeros_like(W) for W in Ws]
        mb = [np.zeros_like(b) for b in bs]
        vb = [np.zeros_like(b) for b in bs]
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        adam_t = 0

    Xn_tr = (Xtr - mean) / scale
    Xn_val = (Xval - mean) / scale
    report = TrainReport()

    def forward_raw(Xn):
        acts = [Xn]
        a = Xn
        for i in range(len(Ws) - 1):
            a = np.maximum(a @ Ws[i].T + bs[i], 0.0)
            acts.append(a)
        return a @ Ws[-1].T + bs[-1], acts

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay**epoch
        order = rng.permutation(len(Xn_tr))
        ep_loss = 0.0
        for s0 in range(0, len(order), cfg.batch_size):
            idx = order[s0 : s0 + cfg.batch_size]
            xb, yb = Xn_tr[idx], ytr[idx]
            out, acts = forward_raw(xb)
            resid = out[:, 0] - yb
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {s0 // cfg.batch_size}; "
                    "reduce the learning rate"
                )
            ep_loss += loss * len(idx)
            # backward
            grad = (2.0 / len(idx)) * resid[:, None]  # dL/dout
            gWs = [None] * len(Ws)
            gbs = [None] * len(bs)
            delta = grad
            for i in range(len(Ws) - 1, -1, -1):
                gWs[i] = delta.T @ acts[i]
                gbs[i] = delta.sum(axis=0)
                if i > 0:
                    delta = (delta @ Ws[i]) * (acts[i] > 0.0)
            if cfg.optimizer == "adam":
                adam_t += 1
                for i in range(len(Ws)):
                    mW[i] = beta1 * mW[i] + (1 - beta1) * gWs[i]
                    vW[i] = beta2 * vW[i] + (1 - beta2) * gWs[i] ** 2
                    mb[i] = beta1 * mb[i] + (1 - beta1) * gbs[i]
                    vb[i] = beta2 * vb[i] + (1 - beta2) * gbs[i] ** 2
                    c1 = 1 - beta1**adam_t
                    c2 = 1 - beta2**adam_t
                    Ws[i] -= lr * (mW[i] / c1) / (np.sqrt(vW[i] / c2) + eps)
                    bs[i] -= lr * (mb[i] / c1) / (np.sqrt(vb[i] / c2) + eps)
            else:
                for i in range(len(Ws)):
                    vel_W[i] = cfg.momentum * vel_W[i] - lr * gWs[i]
                    vel_b[i] = cfg.momentum * vel_b[i] - lr * gbs[i]
                    Ws[i] += vel_W[i]
                    bs[i] += vel_b[i]
        report.train_mse.append(ep_loss / len(Xn_tr))
        val_out, _ = forward_raw(Xn_val)
        report.val_mse.append(float(np.mean((val_out[:, 0] - yval) ** 2)))

    trained = MlpModel(tuple(Ws), tuple(bs), mean, scale, ranges=ranges)
    return trained, report


def margin_gradient_wrt_config(
    model: MlpModel, kin: KinematicModel, q: Configuration, feet: FootState
) -> np.ndarray:
    """d(margin estimate)/d(base_pos, base_euler) with feet fixed in the world."""
    check_gimbal(q)
    R = rpy_to_matrix(q.base_euler)  # world-from-base
    dRs = rpy_matrix_derivatives(q.base_euler)
    feet_w = feet.positions_world
    rel = feet_w - q.base_pos  # (Nc, 3)
    x = np.concatenate([R.T @ np.array([0.0, 0.0, 1.0]), (rel @ R).ravel()])
    g = input_gradient(model, x)
    g_e, g_f = g[:3], g[3:].reshape(-1, 3)

    grad = np.zeros(6)
    grad[:3] = -R @ g_f.sum(axis=0)
    ez = np.array([0.0, 0.0, 1.0])
    for k in range(3):
        dRT = dRs[k].T
        val = g_e @ (dRT @ ez)
        val += np.einsum("ni,ni->", g_f, rel @ dRs[k])
        grad[3 + k] = val
    return grad


def margin_estimate_at(model: MlpModel, q: Configuration, feet: FootState) -> float:
    """Surrogate margin at a configuration with world-fixed feet."""
    R = rpy_to_matrix(q.base_euler)
    rel = feet.positions_world - q.base_pos
    x = np.concatenate([R.T @ np.array([0.0, 0.0, 1.0]), (rel @ R).ravel()])
    return infer(model, x)


# --- serialization --------------------------------------------------------

def save_model(model: MlpModel, path) -> None:
    """Versioned binary layout: magic, JSON header, little-endian f64 blocks."""
    header = {
        "layers": [list(W.shape) for W in model.weights],
        "ranges": model.ranges.to_dict() if model.ranges is not None else None,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for W, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(model.norm_mean, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(model.norm_scale, dtype="<f8").tobytes())


def load_model(path) -> MlpModel:
    with open(path, "rb") as f:
        if f.read(5) != MAGIC:
            raise ValueError(f"{path}: not a margin-model file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        weights, biases = [], []
        for dout, din in header["layers"]:
            weights.append(np.frombuffer(f.read(8 * dout * din), dtype="<f8").reshape(dout, din).copy())
            biases.append(np.frombuffer(f.read(8 * dout), dtype="<f8").copy())
        din0 = header["layers"][0][1]
        mean = np.frombuffer(f.read(8 * din0), dtype="<f8").copy()
        scale = np.frombuffer(f.read(8 * din0), dtype="<f8").copy()
    ranges = SampleRanges.from_dict(header["ranges"]) if header["ranges"] else None
    return MlpModel(tuple(weights), tuple(biases), mean, scale, ranges=ranges)
