"""Per-point velocity regressor with a global mean-pool context branch.

The network is a tanh MLP applied to each point's feature row. After the
first hidden layer the mean of the encodings over the whole shape is
appended to every point's encoding, which gives the head access to
shape-level context such as the vessel radius. Dropout on hidden
activations doubles as a Monte Carlo committee at inference time.

Gradients are exact backpropagation in float64; training uses Adam with an
exponentially decaying step size.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .geometry import Shape
from .oracle import VelocityField, as_values


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_widths: tuple[int, ...] = (32, 32)
    dropout_rate: float = 0.1
    global_context: bool = True
    seed: int = 0
    input_scale: float = 1000.0  # features are in metres, the network sees mm
    output_scale: float = 0.1    # network output unit in m/s
    n_inputs: int = 9
    n_outputs: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive sizes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_shapes: int = 2
    learning_rate: float = 3e-4
    lr_decay: float = 0.9989
    direction_weight: float = 1.0
    seed: int = 0
    points_per_shape: int | None = None

    def __post_init__(self):
        if self.steps <= 0 or self.batch_shapes <= 0:
            raise ValueError("steps and batch_shapes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    fan_in = cfg.n_inputs
    for i, w in enumerate(cfg.hidden_widths):
        layout += [(f"W{i}", (fan_in, w)), (f"b{i}", (w,))]
        fan_in = 2 * w if (i == 0 and cfg.global_context) else w
    layout += [("Wout", (fan_in, cfg.n_outputs)), ("bout", (cfg.n_outputs,))]
    return layout


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    params: np.ndarray
    config: ModelConfig
    train_log: tuple[float, ...] = ()

    def __post_init__(self):
        if self.params.shape != (n_params(self.config),):
            raise ValueError("parameter vector does not match the config layout")
        self.params.setflags(write=False)

    def unpack(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        return _unpack(self.params if flat is None else flat, self.config)


def n_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_layout(cfg))


def _unpack(flat: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, s in param_layout(cfg):
        size = int(np.prod(s))
        out[name] = flat[off:off + size].reshape(s)
        off += size
    return out


def init_model(config: ModelConfig) -> SurrogateModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    rng = np.random.default_rng(config.seed)
    chunks = []
    fan_in = None
    for name, s in param_layout(config):
        if name.startswith("W"):
            fan_in = s[0]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(s))))
    return SurrogateModel(np.concatenate(chunks), config)


def _features(shape_or_features) -> np.ndarray:
    return np.asarray(getattr(shape_or_features, "features", shape_or_features), dtype=np.float64)


def _masks(cfg: ModelConfig, n: int, seed) -> list[np.ndarray] | None:
    if seed is None or cfg.dropout_rate == 0.0:
        return None
    rng = np.random.default_rng(seed)
    keep = 1.0 - cfg.dropout_rate
    return [(rng.random((n, w)) < keep) / keep for w in cfg.hidden_widths]


def _forward(p: dict, cfg: ModelConfig, X: np.ndarray, masks):
    n = len(X)
    a = X * cfg.input_scale
    cache = []
    for i in range(len(cfg.hidden_widths)):
        h = np.tanh(a @ p[f"W{i}"] + p[f"b{i}"])
        d = h if masks is None else h * masks[i]
        cache.append((a, h))
        if i == 0 and cfg.global_context:
            a = np.concatenate([d, np.broadcast_to(d.mean(axis=0), d.shape)], axis=1)
        else:
            a = d
    out = (a @ p["Wout"] + p["bout"]) * cfg.output_scale
    return out, (cache, a, masks, n)


def _backward(p: dict, cfg: ModelConfig, state, d_out: np.ndarray) -> dict[str, np.ndarray]:
    cache, a_last, masks, n = state
    g = {}
    dy = d_out * cfg.output_scale
    g["Wout"] = a_last.T @ dy
    g["bout"] = dy.sum(axis=0)
    da = dy @ p["Wout"].T
    for i in reversed(range(len(cfg.hidden_widths))):
        a_in, h = cache[i]
        if i == 0 and cfg.global_context:
            w = cfg.hidden_widths[0]
            da = da[:, :w] + da[:, w:].sum(axis=0) / n
        if masks is not None:
            da = da * masks[i]
        dz = da * (1.0 - h * h)
        g[f"W{i}"] = a_in.T @ dz
        g[f"b{i}"] = dz.sum(axis=0)
        da = dz @ p[f"W{i}"].T
    return g


def _flatten(g: dict, cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([g[name].ravel() for name, _ in param_layout(cfg)])


def forward(model: SurrogateModel, shape: Shape | np.ndarray, dropout_mask_seed=None) -> VelocityField:
    """Predicted velocity per point.

    With ``dropout_mask_seed`` set, hidden units are dropped with inverted
    scaling using masks drawn from that seed; otherwise inference is
    deterministic.
    """
    X = _features(shape)
    if X.ndim != 2 or X.shape[1] != model.config.n_inputs:
        raise ValueError(f"expected N x {model.config.n_inputs} features, got {X.shape}")
    out, _ = _forward(model.unpack(), model.config, X, _masks(model.config, len(X), dropout_mask_seed))
    return VelocityField(out, getattr(shape, "id", ""))


def loss_and_grad(pred, target, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Magnitude L1 plus ``beta`` times mean (1 - cosine), and its gradient in ``pred``.

    Pairs where either vector is zero have cosine 0.
    """
    yh = as_values(pred)
    y = as_values(target)
    n = len(y)
    mh = np.sqrt((yh**2).sum(axis=1))
    m = np.sqrt((y**2).sum(axis=1))
    diff = mh - m
    valid = (mh > 0) & (m > 0)
    safe_mh = np.where(mh > 0, mh, 1.0)
    denom = np.where(valid, safe_mh * np.where(m > 0, m, 1.0), 1.0)
    cos = np.where(valid, (yh * y).sum(axis=1) / denom, 0.0)
    value = float(np.mean(np.abs(diff)) + beta * np.mean(1.0 - cos))
    g_mag = (np.sign(diff) * (mh > 0) / safe_mh)[:, None] * yh
    g_cos = np.where(valid[:, None], y / denom[:, None] - (cos / safe_mh**2)[:, None] * yh, 0.0)
    grad = (g_mag - beta * g_cos) / n
    return value, grad


def loss(pred, target, beta: float = 1.0) -> float:
    return loss_and_grad(pred, target, beta)[0]


def _sample_seed(seed: int, step: int, shape_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step, zlib.crc32(shape_id.encode())])


def loss_gradient(model: SurrogateModel, features: np.ndarray, target, beta: float = 1.0,
                  dropout_mask_seed=None) -> tuple[float, np.ndarray]:
    """Loss of one shape and its gradient with respect to the flat parameter vector."""
    cfg = model.config
    p = model.unpack()
    X = _features(features)
    out, state = _forward(p, cfg, X, _masks(cfg, len(X), dropout_mask_seed))
    value, d_out = loss_and_grad(out, target, beta)
    return value, _flatten(_backward(p, cfg, state, d_out), cfg)


def train(model: SurrogateModel, samples: Sequence[tuple[Shape, VelocityField]],
          tcfg: TrainConfig = TrainConfig()) -> SurrogateModel:
    """Adam on minibatches of whole shapes, starting from ``model``'s parameters.

    Dropout masks and point subsets are keyed by (seed, step, shape id), so a
    duplicated sample contributes exactly the same gradient as the original.
    """
    if not samples:
        raise TrainingError("training needs at least one labeled sample")
    cfg = model.config
    theta = model.params.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    batch_rng = np.random.default_rng(tcfg.seed)
    bsize = min(tcfg.batch_shapes, len(samples))
    log = []
    for step in range(tcfg.steps):
        batch = batch_rng.choice(len(samples), size=bsize, replace=False)
        p = _unpack(theta, cfg)
        grad = np.zeros_like(theta)
        total = 0.0
        for j in batch:
            shape, target = samples[j]
            X = shape.features
            Y = as_values(target)
            sub_rng = np.random.default_rng(_sample_seed(tcfg.seed, step, shape.id))
            if tcfg.points_per_shape and tcfg.points_per_shape < len(X):
                idx = np.sort(sub_rng.choice(len(X), size=tcfg.points_per_shape, replace=False))
                X, Y = X[idx], Y[idx]
            mask_seed = sub_rng.integers(2**63) if cfg.dropout_rate > 0 else None
            out, state = _forward(p, cfg, X, _masks(cfg, len(X), mask_seed))
            # loss on velocities in units of output_scale
            value, d_out = loss_and_grad(out / cfg.output_scale, Y / cfg.output_scale,
                                         tcfg.direction_weight)
            d_out = d_out / cfg.output_scale
            if not np.isfinite(value) or not np.all(np.isfinite(d_out)):
                raise TrainingError(f"non-finite loss at step {step} on shape {shape.id!r}")
            grad += _flatten(_backward(p, cfg, state, d_out), cfg)
            total += value
        grad /= bsize
        lr = tcfg.learning_rate * tcfg.lr_decay**step
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad * grad
        mhat = m1 / (1 - b1 ** (step + 1))
        vhat = m2 / (1 - b2 ** (step + 1))
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        log.append(total / bsize)
    if not np.all(np.isfinite(theta)):
        raise TrainingError("parameters became non-finite during training")
    return SurrogateModel(theta, cfg, model.train_log + tuple(log))


def committee_predict(model: SurrogateModel, shape: Shape, members: int = 8, seed: int = 0) -> list[VelocityField]:
    """``members`` stochastic forward passes; member i uses mask seed (seed, i)."""
    return [forward(model, shape, dropout_mask_seed=(seed, i)) for i in range(members)]


def committee_variance(fields: Sequence[VelocityField]) -> np.ndarray:
    """Per-point trace of the unbiased 3x3 sample covariance across members."""
    if len(fields) < 2:
        return np.zeros(len(fields[0]))
    stack = np.stack([as_values(f) for f in fields])
    return stack.var(axis=0, ddof=1).sum(axis=1)
