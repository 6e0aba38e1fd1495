"""Minimal reverse-mode differentiation core.

Float64 throughout. A Tape records primitive operations in execution
order; backward walks the records in exact reverse order and accumulates
vector-Jacobian products. Parameters live in a ParamStore keyed by name,
with one gradient buffer per parameter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "corridorflow-ckpt-1"


class TapeConsumedError(RuntimeError):
    """Raised when backward is invoked twice on the same tape."""


class GradientAbortError(RuntimeError):
    """Raised when a non-finite gradient reaches the optimizer."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
        self.param_name = param_name


class TrainingAbortError(RuntimeError):
    """A loss term became non-finite; carries the offending component."""

    def __init__(self, component: str):
        super().__init__(f"non-finite value in loss component {component!r}")
        self.component = component


class ParamStore:
    """Named float64 parameter tensors plus matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy_grads(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.grads.items()}

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def names(self) -> list[str]:
        return sorted(self.params)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self._records: list[Value] = []
        self._consumed = False

    def _add(self, node: "Value") -> None:
        self._records.append(node)

    def backward(self, loss: "Value", store: ParamStore | None = None) -> None:
        """Accumulate d loss / d inputs through the recorded operations.

        Parameter gradients are added into store.grads. The tape is
        single-use; a second backward raises TapeConsumedError.
        """
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        if loss.tape is not self:
            raise ValueError("loss value does not belong to this tape")
        if loss.data.ndim != 0:
            raise ValueError("backward requires a scalar loss")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._records):
            if node.grad is None or node.vjp is None:
                continue
            parent_grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
        if store is not None:
            for node in self._records:
                if node.param_name is not None and node.grad is not None:
                    store.grads[node.param_name] += node.grad


class Value:
    """One node of the tape: a float64 array plus its backward closure."""

    __slots__ = ("data", "parents", "vjp", "grad", "tape", "param_name", "requires_grad")

    def __init__(self, data, tape: Tape | None, parents=(), vjp=None,
                 param_name: str | None = None, requires_grad: bool | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None
        self.param_name = param_name
        if requires_grad is None:
            requires_grad = param_name is not None or any(
                p.requires_grad for p in self.parents
            )
        self.requires_grad = requires_grad
        if tape is not None and (self.requires_grad or param_name is not None):
            tape._add(self)

    @property
    def shape(self):
        return self.data.shape


def constant(x) -> Value:
    """Wrap an array as a non-differentiated graph input."""
    return Value(x, tape=None, requires_grad=False)


def param(tape: Tape, store: ParamStore, name: str) -> Value:
    """Leaf node bound to a named parameter of the store."""
    return Value(store.params[name], tape=tape, param_name=name)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _tape_of(*vals: Value) -> Tape | None:
    for v in vals:
        if v.tape is not None:
            return v.tape
    return None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return Value(out, _tape_of(a, b), (a, b), vjp)


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return Value(out, _tape_of(a, b), (a, b), vjp)


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Value(out, _tape_of(a, b), (a, b), vjp)


def matmul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return Value(out, _tape_of(a, b), (a, b), vjp)


def tanh(a) -> Value:
    a = _as_value(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Value(out, a.tape, (a,), vjp)


def square(a) -> Value:
    a = _as_value(a)

    def vjp(g):
        return (g * 2.0 * a.data,)

    return Value(a.data * a.data, a.tape, (a,), vjp)


def hinge(a) -> Value:
    """Elementwise max(x, 0) with subgradient 0 at x == 0."""
    a = _as_value(a)
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return Value(out, a.tape, (a,), vjp)


def huber(a, beta: float) -> Value:
    """Smooth-l1 penalty on a nonnegative residual magnitude.

    0.5 * r**2 / beta on r <= beta, r - beta / 2 beyond; continuously
    differentiable at the switch.
    """
    a = _as_value(a)
    if beta <= 0:
        raise ValueError("huber threshold must be positive")
    r = a.data
    out = np.where(r <= beta, 0.5 * r * r / beta, r - 0.5 * beta)

    def vjp(g):
        return (g * np.minimum(r, beta) / beta,)

    return Value(out, a.tape, (a,), vjp)


def rownorm(a) -> Value:
    """Euclidean norm over the last axis; gradient defined as 0 at ||0||."""
    a = _as_value(a)
    out = np.linalg.norm(a.data, axis=-1)

    def vjp(g):
        safe = np.where(out == 0.0, 1.0, out)
        scale = np.where(out == 0.0, 0.0, g / safe)
        return (scale[..., None] * a.data,)

    return Value(out, a.tape, (a,), vjp)


def cumsum(a, axis: int) -> Value:
    a = _as_value(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        flipped = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (flipped,)

    return Value(out, a.tape, (a,), vjp)


def concat(vals, axis: int = -1) -> Value:
    vals = [_as_value(v) for v in vals]
    out = np.concatenate([v.data for v in vals], axis=axis)
    sizes = [v.data.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Value(out, _tape_of(*vals), tuple(vals), vjp)


def reshape(a, shape) -> Value:
    a = _as_value(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return Value(out, a.tape, (a,), vjp)


def gather_chunk_cols(a, row_idx: np.ndarray, chunk_len: int, dim: int,
                      col0: int, ncols: int) -> Value:
    """Per-sample gather of chunk rows and a column slice.

    a holds vectorized (row-major) chunks with shape (B, chunk_len * dim);
    row_idx is an integer (B, K) array of step indices. Returns the
    (B, K, ncols) slice a[b, row_idx[b, k], col0:col0+ncols].
    """
    a = _as_value(a)
    b, d = a.data.shape
    if d != chunk_len * dim:
        raise ValueError(f"flat dim {d} inconsistent with {chunk_len}x{dim}")
    idx = np.asarray(row_idx)
    if idx.ndim != 2 or idx.shape[0] != b:
        raise ValueError("row_idx must have shape (B, K)")
    if idx.min() < 0 or idx.max() >= chunk_len:
        raise ValueError("anchor index out of chunk range")
    rows = np.arange(b)[:, None]
    x3 = a.data.reshape(b, chunk_len, dim)
    out = x3[rows, idx, col0 : col0 + ncols]

    def vjp(g):
        gx = np.zeros((b, chunk_len, dim))
        np.add.at(gx, (rows, idx, slice(col0, col0 + ncols)), g)
        return (gx.reshape(b, d),)

    return Value(out, a.tape, (a,), vjp)


def reduce_sum(a, axis=None) -> Value:
    a = _as_value(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.expand_dims(g, axis).repeat(a.data.shape[axis], axis=axis),)

    return Value(out, a.tape, (a,), vjp)


def mean(a) -> Value:
    a = _as_value(a)
    size = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / size, a.data.shape).copy(),)

    return Value(a.data.mean(), a.tape, (a,), vjp)


def scale(a, s: float) -> Value:
    a = _as_value(a)

    def vjp(g):
        return (g * s,)

    return Value(a.data * s, a.tape, (a,), vjp)


# ---------------------------------------------------------------------------
# Dense network plumbing


@dataclass(frozen=True)
class MlpArch:
    """Layer widths [in, hidden..., out]; tanh between affine layers."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ValueError(f"bad layer sizes: {self.sizes}")


def mlp_init(store: ParamStore, prefix: str, arch: MlpArch, rng: np.random.Generator) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(arch.sizes, arch.sizes[1:])):
        store.add(f"{prefix}.w{i}", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def forward_mlp(tape: Tape, store: ParamStore, prefix: str, x, arch: MlpArch) -> Value:
    """Affine layers with tanh hidden activations and a linear output.

    x may be a Value or array of shape (B, sizes[0]) or (sizes[0],); a
    vector input yields a vector output.
    """
    v = _as_value(x)
    squeeze = v.data.ndim == 1
    if squeeze:
        v = reshape(v, (1, -1))
    if v.data.shape[1] != arch.sizes[0]:
        raise ValueError(
            f"input width {v.data.shape[1]} does not match arch {arch.sizes}"
        )
    n_layers = len(arch.sizes) - 1
    for i in range(n_layers):
        w = param(tape, store, f"{prefix}.w{i}")
        b = param(tape, store, f"{prefix}.b{i}")
        v = add(matmul(v, w), b)
        if i < n_layers - 1:
            v = tanh(v)
    if squeeze:
        v = reshape(v, (-1,))
    return v


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(state: AdamState, store: ParamStore) -> None:
    """One adaptive-moment update; zeroes gradients afterwards.

    Aborts (before mutating anything) if any gradient is non-finite,
    naming the offending parameter.
    """
    for name in store.names():
        if not np.all(np.isfinite(store.grads[name])):
            raise GradientAbortError(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in store.names():
        g = store.grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        store.params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    store.zero_grads()


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_coords: int

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst_param": self.worst_param,
            "worst_index": self.worst_index,
            "n_coords": self.n_coords,
        }


def grad_check(loss_and_grads, store: ParamStore, h: float = 1e-5,
               max_coords: int = 200, seed: int = 0,
               value_fn=None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_and_grads() must be a pure, repeatable function of store.params
    that returns the scalar loss and leaves gradients in store.grads.
    value_fn, when given, is a cheaper loss-only evaluation used for the
    difference quotients. Checks a seeded subsample of at least
    min(max_coords, n) coordinates; relative error is
    |a - n| / (|a| + |n| + 1e-12).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    store.zero_grads()
    loss_and_grads()
    analytic = store.copy_grads()
    store.zero_grads()
    evaluate = value_fn if value_fn is not None else loss_and_grads

    coords = []
    for name in store.names():
        for i in range(store.params[name].size):
            coords.append((name, i))
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in sorted(picked)]

    worst = (0.0, "", 0)
    for name, i in coords:
        flat = store.params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(evaluate())
        flat[i] = orig - h
        f_minus = float(evaluate())
        flat[i] = orig
        store.zero_grads()
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[i])
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        if rel > worst[0]:
            worst = (rel, name, i)
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords))


# ---------------------------------------------------------------------------
# Checkpointing


def save_checkpoint(path, store: ParamStore, opt: AdamState | None = None,
                    meta: dict | None = None, rng_state: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": {k: v.reshape(-1).tolist() for k, v in store.params.items()},
        "shapes": {k: list(v.shape) for k, v in store.params.items()},
        "opt": None,
        "rng_state": rng_state,
    }
    if opt is not None:
        payload["opt"] = {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step": opt.step,
            "m": {k: v.reshape(-1).tolist() for k, v in opt.m.items()},
            "v": {k: v.reshape(-1).tolist() for k, v in opt.v.items()},
        }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path) -> tuple[ParamStore, AdamState | None, dict, dict | None]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    store = ParamStore()
    for name, flat in payload["params"].items():
        shape = tuple(payload["shapes"][name])
        store.add(name, np.asarray(flat, dtype=np.float64).reshape(shape))
    opt = None
    if payload.get("opt"):
        o = payload["opt"]
        opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"],
                        eps=o["eps"], step=o["step"])
        for name in o["m"]:
            shape = tuple(payload["shapes"][name])
            opt.m[name] = np.asarray(o["m"][name], dtype=np.float64).reshape(shape)
            opt.v[name] = np.asarray(o["v"][name], dtype=np.float64).reshape(shape)
    return store, opt, payload.get("meta", {}), payload.get("rng_state")
