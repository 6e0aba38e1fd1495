"""Flow matching over vectorized extended action chunks.

A time-conditioned velocity network is trained to regress the straight
transport direction between data and Gaussian noise along linear
interpolants. Conditioning comes from a compact task-context encoder;
a separate head predicts the sparse anchor increments from the same
embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .util import content_seed

SIGMA_FLOOR = 1e-8


class SamplingError(RuntimeError):
    """Integration produced a non-finite state; carries the step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at integration step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelSpec:
    """Shapes of the velocity field, context encoder, and anchor head."""

    chunk_len: int
    chunk_dim: int
    context_dim: int
    k_anchors: int
    hidden_width: int = 128
    hidden_layers: int = 3
    embed_dim: int = 32
    encoder_hidden: int = 64
    head_hidden: int = 64

    @property
    def flat_dim(self) -> int:
        return self.chunk_len * self.chunk_dim

    def to_dict(self) -> dict:
        return {
            "chunk_len": self.chunk_len,
            "chunk_dim": self.chunk_dim,
            "context_dim": self.context_dim,
            "k_anchors": self.k_anchors,
            "hidden_width": self.hidden_width,
            "hidden_layers": self.hidden_layers,
            "embed_dim": self.embed_dim,
            "encoder_hidden": self.encoder_hidden,
            "head_hidden": self.head_hidden,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ModelSpec":
        return ModelSpec(**obj)


def time_features(t) -> np.ndarray:
    """Scalar time plus a single sinusoidal pair, shape (B, 3)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return np.stack([t, np.sin(2.0 * np.pi * t), np.cos(2.0 * np.pi * t)], axis=1)


class VelocityFieldModel:
    """Velocity net v(z, t, H), context encoder, and anchor head.

    Normalization statistics are frozen after the dataset scan; flow
    matching runs in normalized coordinates while corridor quantities are
    read in raw units after decoding.
    """

    def __init__(self, spec: ModelSpec, store: dc.ParamStore,
                 norm_mean: np.ndarray, norm_std: np.ndarray):
        self.spec = spec
        self.store = store
        self.norm_mean = np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(norm_std, dtype=np.float64)
        if self.norm_mean.shape != (spec.flat_dim,) or self.norm_std.shape != (spec.flat_dim,):
            raise ValueError("normalization statistics must match the flat chunk dim")
        d = spec.flat_dim
        self._vel_arch = dc.MlpArch(
            (d + 3 + spec.embed_dim,) + (spec.hidden_width,) * spec.hidden_layers + (d,)
        )
        self._enc_arch = dc.MlpArch((spec.context_dim, spec.encoder_hidden, spec.embed_dim))
        self._head_arch = dc.MlpArch((spec.embed_dim, spec.head_hidden, spec.k_anchors * 3))

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "VelocityFieldModel":
        store = dc.ParamStore()
        d = spec.flat_dim
        model = cls(spec, store, np.zeros(d), np.ones(d))
        dc.mlp_init(store, "enc", model._enc_arch, rng)
        dc.mlp_init(store, "vel", model._vel_arch, rng)
        dc.mlp_init(store, "head", model._head_arch, rng)
        return model

    def set_normalization(self, x_raw: np.ndarray) -> None:
        """Freeze per-dimension statistics from the training matrix."""
        x = np.asarray(x_raw, dtype=np.float64)
        self.norm_mean = x.mean(axis=0)
        self.norm_std = np.maximum(x.std(axis=0), SIGMA_FLOOR)

    def normalize(self, x_raw: np.ndarray) -> np.ndarray:
        return (np.asarray(x_raw, dtype=np.float64) - self.norm_mean) / self.norm_std

    def denormalize(self, x_norm: np.ndarray) -> np.ndarray:
        return np.asarray(x_norm, dtype=np.float64) * self.norm_std + self.norm_mean

    def denormalize_value(self, x: dc.Value) -> dc.Value:
        return dc.add(dc.mul(x, dc.constant(self.norm_std)), dc.constant(self.norm_mean))

    def encode(self, tape: dc.Tape, ctx: np.ndarray) -> dc.Value:
        return dc.forward_mlp(tape, self.store, "enc", np.atleast_2d(ctx), self._enc_arch)

    def velocity(self, tape: dc.Tape, z, t, h: dc.Value) -> dc.Value:
        """v(z, t, H) on normalized coordinates; z and t enter as data."""
        z = dc._as_value(z)
        feats = dc.constant(time_features(t))
        inp = dc.concat([z, feats, h], axis=1)
        return dc.forward_mlp(tape, self.store, "vel", inp, self._vel_arch)

    def anchor_head(self, tape: dc.Tape, h: dc.Value) -> dc.Value:
        """Predicted anchor increments, shape (B, K, 3), raw units."""
        flat = dc.forward_mlp(tape, self.store, "head", h, self._head_arch)
        return dc.reshape(flat, (-1, self.spec.k_anchors, 3))

    def meta(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
        }

    @classmethod
    def from_meta(cls, meta: dict, store: dc.ParamStore) -> "VelocityFieldModel":
        spec = ModelSpec.from_dict(meta["spec"])
        return cls(spec, store,
                   np.asarray(meta["norm_mean"], dtype=np.float64),
                   np.asarray(meta["norm_std"], dtype=np.float64))


def interpolate(x, xi, t):
    """Linear interpolant (1 - t) x + t xi between data and noise."""
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if x.shape != xi.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xi.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if t_arr.ndim == 1 and x.ndim == 2:
        t_arr = t_arr[:, None]
    return (1.0 - t_arr) * x + t_arr * xi


def decode_estimate(z_t, t, v, chunk_len: int | None = None, chunk_dim: int | None = None):
    """One-step estimate z_t - t v of the clean sample; optionally
    reshaped row-major to (T, D)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if z_t.shape != v.shape:
        raise ValueError(f"shape mismatch: {z_t.shape} vs {v.shape}")
    x_hat = z_t - float(t) * v
    if chunk_len is not None and chunk_dim is not None:
        x_hat = x_hat.reshape(chunk_len, chunk_dim)
    return x_hat


def fm_draws(base_seed: int, x_raw: np.ndarray, ctx: np.ndarray):
    """Per-sample (t, xi) draws for flow matching.

    Each sample's draws derive from the base seed and the sample's own
    bytes, so duplicated samples receive identical draws and batch order
    does not matter.
    """
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
    b, d = x_raw.shape
    t = np.empty(b)
    xi = np.empty((b, d))
    for i in range(b):
        payload = x_raw[i].tobytes() + ctx[i].tobytes()
        rng_i = np.random.default_rng(content_seed(base_seed, payload))
        t[i] = rng_i.random()
        xi[i] = rng_i.standard_normal(d)
    return t, xi


def fm_parts(model: VelocityFieldModel, tape: dc.Tape, x_raw, ctx, t, xi):
    """Shared forward for the flow-matching objective.

    Returns (per-sample squared residuals (B,), velocity, interpolant,
    embedding, normalized data).
    """
    x_norm = model.normalize(np.atleast_2d(x_raw))
    z = interpolate(x_norm, xi, t)
    h = model.encode(tape, ctx)
    v = model.velocity(tape, z, t, h)
    target = xi - x_norm
    resid = dc.sub(v, dc.constant(target))
    per_sample = dc.reduce_sum(dc.square(resid), axis=1)
    return per_sample, v, z, h, x_norm


def fm_loss(model: VelocityFieldModel, x_raw, ctx, rng: np.random.Generator,
            backward: bool = True):
    """Mean squared velocity-regression error over a batch.

    Draws (t, xi) from the provided generator via fm_draws. When backward
    is set, gradients accumulate into the model's parameter store.
    Returns (loss, t, xi).
    """
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    if x_raw.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    base = int(rng.integers(0, 2**63))
    t, xi = fm_draws(base, x_raw, ctx)
    tape = dc.Tape()
    per_sample, _, _, _, _ = fm_parts(model, tape, x_raw, ctx, t, xi)
    loss = dc.mean(per_sample)
    if not np.isfinite(loss.data):
        raise dc.TrainingAbortError("fm")
    if backward:
        tape.backward(loss, model.store)
    return float(loss.data), t, xi


def euler_sample(model: VelocityFieldModel, ctx, steps: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Integrate the learned velocity field from noise down to t = 0.

    Explicit Euler with uniform step 1/steps, starting at z = xi drawn
    from the provided generator. Returns denormalized chunks shaped
    (B, T, D).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
    b = ctx.shape[0]
    d = model.spec.flat_dim
    z = rng.standard_normal((b, d))
    dt = 1.0 / steps
    for s in range(steps, 0, -1):
        t = np.full(b, s * dt)
        tape = dc.Tape()
        h = model.encode(tape, ctx)
        v = model.velocity(tape, z, t, h).data
        if not np.all(np.isfinite(v)):
            raise SamplingError(s)
        z = z - dt * v
    raw = model.denormalize(z)
    return raw.reshape(b, model.spec.chunk_len, model.spec.chunk_dim)


def predict_anchors(model: VelocityFieldModel, ctx) -> np.ndarray:
    """Anchor-head predictions for a context batch, shape (B, K, 3)."""
    tape = dc.Tape()
    h = model.encode(tape, np.atleast_2d(ctx))
    return model.anchor_head(tape, h).data
