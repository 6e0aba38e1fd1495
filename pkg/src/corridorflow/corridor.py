"""Corridor regularization for generated action chunks.

Extended action chunks carry a realized-displacement field next to the
raw action columns. The regularizer gathers that field at K anchor
steps, compares it with ground-truth increment targets inside a
tolerance radius (the corridor), and adds a stage-weighted cumulative
consistency term once inside. Both terms are damped toward the noisy
end of the flow-matching time axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import flowmatch as fm
from .diffcore import TrainingAbortError

A_DIM = 4  # raw action columns: commanded delta (3) + gripper (1)
EXTRA_DIM = 3  # realized displacement field
CHUNK_DIM = A_DIM + EXTRA_DIM

PENALTIES = ("l1", "huber")
TARGET_MODES = ("delta", "pos")


@dataclass(frozen=True)
class CorridorConfig:
    """Loss-shaping switches; every ablation is expressible here."""

    alpha: float = 2.0
    lambda_anchor: float = 1.0
    lambda_corridor: float = 0.5
    penalty: str = "l1"
    huber_beta: float = 0.1
    enable_buffer: bool = True
    enable_consistency: bool = True
    extra_a: bool = True
    target_mode: str = "delta"
    anchor_method: str = "rdp_dp"
    anchor_target: str = "inter_anchor"
    k: int = 3

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lambda_anchor < 0 or self.lambda_corridor < 0:
            raise ValueError("loss weights must be >= 0")
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty: {self.penalty!r}")
        if self.huber_beta <= 0:
            raise ValueError("huber_beta must be positive")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target_mode: {self.target_mode!r}")
        if self.anchor_method not in ("rdp_dp", "uniform"):
            raise ValueError(f"unknown anchor_method: {self.anchor_method!r}")
        if self.anchor_target not in ("inter_anchor", "step_delta"):
            raise ValueError(f"unknown anchor_target: {self.anchor_target!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.extra_a and (self.enable_buffer or self.enable_consistency) \
                and self.lambda_corridor > 0:
            raise ValueError("corridor terms require the extended action space")

    def corridor_active(self) -> bool:
        return (
            self.extra_a
            and self.lambda_corridor > 0
            and (self.enable_buffer or self.enable_consistency)
        )


def extract_anchors_g(chunk, indices, a_dim: int = A_DIM) -> np.ndarray:
    """Gather the displacement-field rows of a (T, D) chunk at the anchor
    step indices; returns a (K, 3) matrix."""
    arr = np.asarray(chunk, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < a_dim + 3:
        raise ValueError(f"chunk must be (T, >={a_dim + 3})")
    idx = np.asarray(list(indices), dtype=int)
    if idx.size == 0:
        raise ValueError("need at least one anchor index")
    if idx.min() < 0 or idx.max() > arr.shape[0] - 1:
        raise ValueError("anchor index out of range")
    return arr[idx, a_dim : a_dim + 3]


def corridor_width(chunk_star, indices, delta_targets, alpha: float) -> float:
    """alpha times the largest gap between the ground-truth single-step
    displacement at each anchor and its increment target."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    anchors = extract_anchors_g(chunk_star, indices)
    targets = np.asarray(delta_targets, dtype=np.float64)
    if targets.shape != anchors.shape:
        raise ValueError("delta_targets shape mismatch")
    return float(alpha * np.max(np.linalg.norm(anchors - targets, axis=1)))


# ---------------------------------------------------------------------------
# Differentiable per-sample terms (batched; values of shape (B,))


def buffer_terms(anchors: dc.Value, targets: np.ndarray, widths: np.ndarray) -> dc.Value:
    """Mean hinge excess of anchor residual norms over the corridor radius.

    anchors: (B, K, 3) extracted from decoded chunks; targets (B, K, 3);
    widths (B,). Returns per-sample values (B,).
    """
    k = anchors.data.shape[1]
    resid = dc.rownorm(dc.sub(anchors, dc.constant(targets)))  # (B, K)
    excess = dc.hinge(dc.sub(resid, dc.constant(np.asarray(widths)[:, None])))
    return dc.scale(dc.reduce_sum(excess, axis=1), 1.0 / k)


def consistency_terms(anchors: dc.Value, targets: np.ndarray, weights: np.ndarray) -> dc.Value:
    """Stage-weighted squared gap between cumulative predicted and target
    increments; weights (K,) sum to one and grow with the stage index."""
    pred_cum = dc.cumsum(anchors, axis=1)  # (B, K, 3)
    tgt_cum = np.cumsum(np.asarray(targets, dtype=np.float64), axis=1)
    sq = dc.reduce_sum(dc.square(dc.sub(pred_cum, dc.constant(tgt_cum))), axis=2)  # (B, K)
    return dc.reduce_sum(dc.mul(sq, dc.constant(np.asarray(weights))), axis=1)


def anchor_penalty_terms(pred: dc.Value, targets: np.ndarray, penalty: str,
                         huber_beta: float) -> dc.Value:
    """Robust penalty on anchor-head residual norms, averaged over K.

    pred: (B, K, 3); targets (B, K, 3). Returns per-sample values (B,).
    """
    if penalty not in PENALTIES:
        raise ValueError(f"unknown penalty: {penalty!r}")
    k = pred.data.shape[1]
    resid = dc.rownorm(dc.sub(pred, dc.constant(targets)))  # (B, K)
    rho = resid if penalty == "l1" else dc.huber(resid, huber_beta)
    return dc.scale(dc.reduce_sum(rho, axis=1), 1.0 / k)


# ---------------------------------------------------------------------------
# Single-sample views matching the batched arithmetic exactly


def _gathered(decoded_chunk, spec) -> dc.Value:
    chunk = np.asarray(decoded_chunk, dtype=np.float64)
    return dc.constant(extract_anchors_g(chunk, spec.indices.indices)[None, :, :])


def buffer_loss(decoded_chunk, spec) -> float:
    """Corridor buffer value of one decoded chunk against its spec."""
    anchors = _gathered(decoded_chunk, spec)
    out = buffer_terms(anchors, spec.delta_targets[None, :, :],
                       np.array([spec.delta_width]))
    return float(out.data[0])


def consistency_loss(decoded_chunk, spec) -> float:
    """In-corridor consistency value of one decoded chunk."""
    anchors = _gathered(decoded_chunk, spec)
    out = consistency_terms(anchors, spec.delta_targets[None, :, :], spec.weights)
    return float(out.data[0])


def anchor_pred_loss(predicted, targets, penalty: str = "l1",
                     huber_beta: float = 0.1) -> float:
    """Robust anchor-head loss for a single (K, 3) prediction."""
    pred = dc.constant(np.asarray(predicted, dtype=np.float64)[None, :, :])
    tgt = np.asarray(targets, dtype=np.float64)[None, :, :]
    if pred.data.shape != tgt.shape:
        raise ValueError("prediction and target shapes differ")
    return float(anchor_penalty_terms(pred, tgt, penalty, huber_beta).data[0])


def corridor_term(decoded_chunk, spec, t: float, cfg: CorridorConfig) -> float:
    """Noise-weighted corridor value (1 - t) * (buffer + consistency) for
    a single decoded chunk."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    total = 0.0
    if cfg.enable_buffer:
        total += buffer_loss(decoded_chunk, spec)
    if cfg.enable_consistency:
        total += consistency_loss(decoded_chunk, spec)
    return (1.0 - t) * total


def noise_weight(t) -> np.ndarray:
    """Corridor damping w(t) = 1 - t."""
    return 1.0 - np.asarray(t, dtype=np.float64)


@dataclass(frozen=True)
class CorridorEval:
    """Diagnostic view of the corridor terms for one decoded chunk."""

    residuals: np.ndarray  # (K,) anchor residual norms, meters
    buffer_value: float
    consistency_value: float
    weight: float  # 1 - t
    active_mask: np.ndarray  # (K,) residual beyond the corridor radius


def corridor_eval(decoded_chunk, spec, t: float) -> CorridorEval:
    """Residual norms, loss values, and the active set at time t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    anchors = extract_anchors_g(np.asarray(decoded_chunk, dtype=np.float64),
                                spec.indices.indices)
    residuals = np.linalg.norm(anchors - spec.delta_targets, axis=1)
    return CorridorEval(
        residuals=residuals,
        buffer_value=buffer_loss(decoded_chunk, spec),
        consistency_value=consistency_loss(decoded_chunk, spec),
        weight=float(1.0 - t),
        active_mask=residuals > spec.delta_width,
    )


# ---------------------------------------------------------------------------
# Combined objective


@dataclass(frozen=True)
class PreparedBatch:
    """Loss inputs for a batch of chunks.

    x_raw holds the flattened chunks in the active action space; anchor
    supervision is carried alongside regardless of that space, since the
    anchor head reads only the context.
    """

    x_raw: np.ndarray  # (B, T * D)
    ctx: np.ndarray  # (B, C)
    anchor_idx: np.ndarray  # (B, K) int
    delta_targets: np.ndarray  # (B, K, 3)
    pos_targets: np.ndarray  # (B, K, 3)
    widths: np.ndarray  # (B,)
    weights: np.ndarray  # (K,)

    def __len__(self) -> int:
        return self.x_raw.shape[0]


def total_loss(model, batch: PreparedBatch, cfg: CorridorConfig,
               rng: np.random.Generator | None, backward: bool = True,
               frozen_draws: tuple | None = None):
    """Flow-matching loss plus anchor and corridor regularizers.

    Per sample one (t, xi) pair serves both the velocity regression and
    the corridor expectation. The decoded estimate is denormalized before
    anchor extraction so that residuals and widths share raw units.
    Gradients reach the velocity network, the context encoder, and (via
    the anchor loss only) the anchor head. With both weights at zero the
    computation reduces bit-for-bit to the plain flow-matching objective
    on the same generator stream.

    Returns (total, parts dict, (t, xi)).
    """
    cfg.validate()
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    if frozen_draws is not None:
        t, xi = frozen_draws
    else:
        if rng is None:
            raise ValueError("need an rng when draws are not frozen")
        base = int(rng.integers(0, 2**63))
        t, xi = fm.fm_draws(base, batch.x_raw, batch.ctx)

    tape = dc.Tape()
    per_fm, v, z, h, _ = fm.fm_parts(model, tape, batch.x_raw, batch.ctx, t, xi)
    loss_fm = dc.mean(per_fm)
    if not np.isfinite(loss_fm.data):
        raise TrainingAbortError("fm")
    total = loss_fm
    parts = {"fm": float(loss_fm.data), "anchor": 0.0, "corridor": 0.0}

    if cfg.lambda_anchor > 0:
        pred = model.anchor_head(tape, h)
        targets = batch.delta_targets if cfg.target_mode == "delta" else batch.pos_targets
        per_anchor = anchor_penalty_terms(pred, targets, cfg.penalty, cfg.huber_beta)
        loss_anchor = dc.mean(per_anchor)
        if not np.isfinite(loss_anchor.data):
            raise TrainingAbortError("anchor")
        parts["anchor"] = float(loss_anchor.data)
        total = dc.add(total, dc.scale(loss_anchor, cfg.lambda_anchor))

    if cfg.corridor_active():
        spec = model.spec
        if spec.chunk_dim < A_DIM + 3:
            raise ValueError("corridor terms need the extended action space")
        x_hat = dc.sub(dc.constant(z), dc.mul(dc.constant(t[:, None]), v))
        raw = model.denormalize_value(x_hat)
        anchors = dc.gather_chunk_cols(raw, batch.anchor_idx, spec.chunk_len,
                                       spec.chunk_dim, A_DIM, 3)
        per_corr = None
        if cfg.enable_buffer:
            per_corr = buffer_terms(anchors, batch.delta_targets, batch.widths)
        if cfg.enable_consistency:
            cons = consistency_terms(anchors, batch.delta_targets, batch.weights)
            per_corr = cons if per_corr is None else dc.add(per_corr, cons)
        weighted = dc.mul(per_corr, dc.constant(noise_weight(t)))
        loss_corr = dc.mean(weighted)
        if not np.isfinite(loss_corr.data):
            raise TrainingAbortError("corridor")
        parts["corridor"] = float(loss_corr.data)
        total = dc.add(total, dc.scale(loss_corr, cfg.lambda_corridor))

    if not np.isfinite(total.data):
        raise TrainingAbortError("total")
    parts["total"] = float(total.data)
    if backward:
        tape.backward(total, model.store)
    return float(total.data), parts, (t, xi)
