"""Training loop, evaluation metrics, and the ablation suite.

Runs are pure functions of (settings, dataset): episode-level splits,
parameter init, batch order, flow-matching draws, and evaluation noise
all derive from the mandatory master seed, so repeated runs produce
bit-identical metrics logs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import flowmatch as fm
from . import synthdata as sd
from .corridor import A_DIM, CHUNK_DIM, CorridorConfig, PreparedBatch, total_loss
from .util import splitmix64

ABLATION_VARIANTS = (
    "baseline-FM",
    "pos",
    "delta-pos",
    "extra-A",
    "merge",
    "merge+buf",
    "merge+cons",
    "full",
    "full-RDP",
)

ABLATION_CSV_HEADER = "variant,endpoint_error,violation_rate,anchor_mae,fm_val_loss"


@dataclass(frozen=True)
class TrainSettings:
    """Everything a training run depends on besides the dataset."""

    seed: int
    corridor: CorridorConfig = CorridorConfig()
    chunk_len: int = 16
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    eval_every: int = 200
    val_fraction: float = 0.1
    sampler_steps: int = 10
    hidden_width: int = 128
    hidden_layers: int = 3
    embed_dim: int = 32
    encoder_hidden: int = 64
    head_hidden: int = 64
    objective: str = "total"
    eval_max_records: int | None = None

    def validate(self) -> None:
        if self.seed is None:
            raise ValueError("a master seed is mandatory")
        self.corridor.validate()
        for name in ("chunk_len", "batch_size", "eval_every", "sampler_steps",
                     "hidden_width", "hidden_layers", "embed_dim",
                     "encoder_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lr <= 0 or self.eps_opt <= 0:
            raise ValueError("lr and eps_opt must be positive")
        if self.objective not in ("total", "fm"):
            raise ValueError(f"unknown objective: {self.objective!r}")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "corridor"}
        out["corridor"] = {k: getattr(self.corridor, k)
                          for k in self.corridor.__dataclass_fields__}
        return out


@dataclass
class PreparedDataset:
    """Dataset tensors with anchor supervision rebuilt for one config.

    Anchor ground truth derives from each record's stored chunk and
    start position, so any anchor method or target flavor is available
    from the same dataset file; when the settings match the file's build
    settings the rebuilt values equal the stored ones.
    """

    x_ext: np.ndarray  # (N, T * 7)
    x_act: np.ndarray  # (N, T * 4)
    ctx: np.ndarray  # (N, C)
    anchor_idx: np.ndarray  # (N, K)
    delta_targets: np.ndarray  # (N, K, 3)
    pos_targets: np.ndarray  # (N, K, 3)
    widths: np.ndarray  # (N,)
    weights: np.ndarray  # (K,)
    gt_disp: np.ndarray  # (N, 3)
    families: np.ndarray  # (N,) str
    episodes: np.ndarray  # (N,) uint64
    chunk_len: int

    def __len__(self) -> int:
        return self.x_ext.shape[0]

    def x_for(self, extra_a: bool) -> np.ndarray:
        return self.x_ext if extra_a else self.x_act

    def batch(self, sel: np.ndarray, extra_a: bool) -> PreparedBatch:
        return PreparedBatch(
            x_raw=self.x_for(extra_a)[sel],
            ctx=self.ctx[sel],
            anchor_idx=self.anchor_idx[sel],
            delta_targets=self.delta_targets[sel],
            pos_targets=self.pos_targets[sel],
            widths=self.widths[sel],
            weights=self.weights,
        )


def prepare_dataset(records, cfg: CorridorConfig, chunk_len: int | None = None) -> PreparedDataset:
    """Tensorize records and rebuild anchor supervision per the config."""
    if not records:
        raise ValueError("dataset is empty")
    t = records[0].chunk.shape[0] if chunk_len is None else int(chunk_len)
    n = len(records)
    k = cfg.k
    x_ext = np.empty((n, t * CHUNK_DIM))
    x_act = np.empty((n, t * A_DIM))
    ctx = np.empty((n, sd.CONTEXT_DIM))
    anchor_idx = np.empty((n, k), dtype=np.int64)
    delta_targets = np.empty((n, k, 3))
    pos_targets = np.empty((n, k, 3))
    widths = np.empty(n)
    gt_disp = np.empty((n, 3))
    families = np.empty(n, dtype=object)
    episodes = np.empty(n, dtype=np.uint64)
    for i, rec in enumerate(records):
        if rec.chunk.shape != (t, CHUNK_DIM):
            raise ValueError(
                f"record {i} chunk shape {rec.chunk.shape} != ({t}, {CHUNK_DIM})"
            )
        seg = sd.implied_segment(rec.chunk, rec.context.start_pos)
        spec = sd.build_anchor_spec(rec.chunk, seg, k, cfg.anchor_method,
                                    anchor_target=cfg.anchor_target)
        x_ext[i] = rec.chunk.reshape(-1)
        x_act[i] = rec.chunk[:, :A_DIM].reshape(-1)
        ctx[i] = rec.context.vector
        anchor_idx[i] = spec.indices.indices
        delta_targets[i] = spec.delta_targets
        pos_targets[i] = spec.pos_targets
        widths[i] = spec.delta_width
        gt_disp[i] = rec.chunk[:, A_DIM : A_DIM + 3].sum(axis=0)
        families[i] = rec.context.family
        episodes[i] = rec.seed
    return PreparedDataset(x_ext, x_act, ctx, anchor_idx, delta_targets,
                           pos_targets, widths, sd.stage_weights(k), gt_disp,
                           families, episodes, t)


def split_by_episode(data: PreparedDataset, val_fraction: float, seed: int):
    """Disjoint train/validation index sets, split on whole episodes so
    overlapping windows never leak across the boundary."""
    eps = np.unique(data.episodes)
    order = np.random.default_rng(seed).permutation(len(eps))
    n_val = max(1, int(round(val_fraction * len(eps))))
    if n_val >= len(eps):
        raise ValueError("validation split would consume every episode")
    val_eps = set(eps[order[:n_val]].tolist())
    mask = np.array([int(e) in val_eps for e in data.episodes])
    return np.flatnonzero(~mask), np.flatnonzero(mask)


@dataclass
class EvalReport:
    endpoint_error: float
    corridor_violation_rate: float
    anchor_mae: float
    fm_val_loss: float
    per_family: dict
    n_records: int

    def to_dict(self) -> dict:
        return {
            "endpoint_error": self.endpoint_error,
            "corridor_violation_rate": self.corridor_violation_rate,
            "anchor_mae": self.anchor_mae,
            "fm_val_loss": self.fm_val_loss,
            "per_family": self.per_family,
            "n_records": self.n_records,
        }


def evaluate(model: fm.VelocityFieldModel, data: PreparedDataset,
             subset: np.ndarray, sampler_steps: int, seed: int,
             target_mode: str = "delta",
             max_records: int | None = None) -> EvalReport:
    """Sample one chunk per record and score it against the dataset.

    Endpoint error compares the summed generated displacement columns
    with the ground-truth chunk displacement; a record counts as a
    corridor violation when any anchor residual exceeds its stored
    radius. Anchor error comes from the anchor head, the validation
    flow-matching loss from a seeded draw.
    """
    subset = np.asarray(subset)
    if max_records is not None and subset.size > max_records:
        subset = subset[:max_records]
    if subset.size == 0:
        raise ValueError("empty evaluation subset")
    extra_a = model.spec.chunk_dim == CHUNK_DIM
    gen = fm.euler_sample(model, data.ctx[subset], sampler_steps,
                          np.random.default_rng(seed))
    cols = slice(A_DIM, A_DIM + 3) if extra_a else slice(0, 3)
    b = subset.size
    deltas = gen[:, :, cols]
    implied = deltas.sum(axis=1)
    endpoint = np.linalg.norm(implied - data.gt_disp[subset], axis=1)

    idx = data.anchor_idx[subset]
    picked = deltas[np.arange(b)[:, None], idx, :]
    resid = np.linalg.norm(picked - data.delta_targets[subset], axis=2)
    violated = (resid > data.widths[subset][:, None]).any(axis=1)

    preds = fm.predict_anchors(model, data.ctx[subset])
    targets = data.delta_targets[subset] if target_mode == "delta" else data.pos_targets[subset]
    anchor_err = np.linalg.norm(preds - targets, axis=2).mean(axis=1)

    x = data.x_for(extra_a)[subset]
    fm_val, _, _ = fm.fm_loss(model, x, data.ctx[subset],
                              np.random.default_rng(splitmix64(seed, 1)),
                              backward=False)

    fams = data.families[subset]
    per_family = {}
    for fam in sorted(set(fams.tolist())):
        m = fams == fam
        per_family[fam] = {
            "endpoint_error": float(endpoint[m].mean()),
            "violation_rate": float(violated[m].mean()),
            "anchor_mae": float(anchor_err[m].mean()),
            "count": int(m.sum()),
        }
    return EvalReport(
        endpoint_error=float(endpoint.mean()),
        corridor_violation_rate=float(violated.mean()),
        anchor_mae=float(anchor_err.mean()),
        fm_val_loss=float(fm_val),
        per_family=per_family,
        n_records=int(b),
    )


@dataclass
class TrainResult:
    model: fm.VelocityFieldModel
    opt: dc.AdamState
    metrics: list
    settings: TrainSettings
    aborted: str | None = None
    rng_state: dict = field(default_factory=dict)

    def checkpoint_meta(self) -> dict:
        return {
            "model": self.model.meta(),
            "settings": self.settings.to_dict(),
            "step": self.opt.step,
            "aborted": self.aborted,
        }

    def save(self, path) -> None:
        dc.save_checkpoint(path, self.model.store, self.opt,
                           meta=self.checkpoint_meta(), rng_state=self.rng_state)


def load_model(path) -> tuple[fm.VelocityFieldModel, dc.AdamState | None, dict]:
    store, opt, meta, _ = dc.load_checkpoint(path)
    model = fm.VelocityFieldModel.from_meta(meta["model"], store)
    return model, opt, meta


def train(settings: TrainSettings, records=None,
          prepared: PreparedDataset | None = None) -> TrainResult:
    """Deterministic training run; returns the model and metrics lines.

    Metrics are recorded at step 0, every eval_every steps, and at the
    final step. A non-finite loss stops the run with the parameters from
    before the failing step retained and the aborted component noted.
    """
    settings.validate()
    cfg = settings.corridor
    if prepared is None:
        prepared = prepare_dataset(records, cfg, settings.chunk_len)
    data = prepared

    train_idx, val_idx = split_by_episode(data, settings.val_fraction,
                                          splitmix64(settings.seed, 0))
    extra_a = cfg.extra_a
    chunk_dim = CHUNK_DIM if extra_a else A_DIM
    spec = fm.ModelSpec(
        chunk_len=data.chunk_len,
        chunk_dim=chunk_dim,
        context_dim=data.ctx.shape[1],
        k_anchors=cfg.k,
        hidden_width=settings.hidden_width,
        hidden_layers=settings.hidden_layers,
        embed_dim=settings.embed_dim,
        encoder_hidden=settings.encoder_hidden,
        head_hidden=settings.head_hidden,
    )
    model = fm.VelocityFieldModel.init(spec, np.random.default_rng(splitmix64(settings.seed, 1)))
    model.set_normalization(data.x_for(extra_a)[train_idx])
    opt = dc.AdamState(lr=settings.lr, beta1=settings.beta1,
                       beta2=settings.beta2, eps=settings.eps_opt)
    rng_batch = np.random.default_rng(splitmix64(settings.seed, 2))
    rng_fm = np.random.default_rng(splitmix64(settings.seed, 3))
    eval_seed = splitmix64(settings.seed, 4)

    def run_loss(sel: np.ndarray, backward: bool):
        batch = data.batch(sel, extra_a)
        if settings.objective == "fm":
            loss, _, _ = fm.fm_loss(model, batch.x_raw, batch.ctx, rng_fm,
                                    backward=backward)
            parts = {"total": loss, "fm": loss, "anchor": 0.0, "corridor": 0.0}
        else:
            _, raw, _ = total_loss(model, batch, cfg, rng_fm, backward=backward)
            parts = {"total": raw["total"], "fm": raw["fm"],
                     "anchor": raw["anchor"], "corridor": raw["corridor"]}
        return parts

    def eval_line(step: int, parts: dict) -> dict:
        report = evaluate(model, data, val_idx, settings.sampler_steps,
                          eval_seed, cfg.target_mode,
                          max_records=settings.eval_max_records)
        return {"step": step, "train": parts, "eval": report.to_dict()}

    metrics: list = []
    aborted = None
    first_sel = rng_batch.integers(0, train_idx.size, settings.batch_size)
    parts0 = run_loss(train_idx[first_sel], backward=False)
    metrics.append(eval_line(0, parts0))

    for step in range(1, settings.steps + 1):
        sel = rng_batch.integers(0, train_idx.size, settings.batch_size)
        try:
            parts = run_loss(train_idx[sel], backward=True)
            dc.opt_step(opt, model.store)
        except (dc.TrainingAbortError, dc.GradientAbortError) as exc:
            aborted = getattr(exc, "component", None) or getattr(exc, "param_name", "")
            model.store.zero_grads()
            metrics.append({"step": step, "aborted": aborted})
            break
        if step % settings.eval_every == 0 or step == settings.steps:
            metrics.append(eval_line(step, parts))

    rng_state = {
        "batch": rng_batch.bit_generator.state,
        "fm": rng_fm.bit_generator.state,
    }
    return TrainResult(model, opt, metrics, settings, aborted, rng_state)


def metrics_to_jsonl(metrics: list) -> str:
    return "".join(json.dumps(line) + "\n" for line in metrics)


# ---------------------------------------------------------------------------
# Ablation suite


def variant_corridor(base: CorridorConfig, name: str) -> CorridorConfig:
    """Corridor flags for one named ablation row."""
    off = dict(lambda_corridor=0.0, enable_buffer=False, enable_consistency=False)
    table = {
        "baseline-FM": dict(extra_a=False, lambda_anchor=0.0, **off),
        "pos": dict(extra_a=False, target_mode="pos", **off),
        "delta-pos": dict(extra_a=False, target_mode="delta", **off),
        "extra-A": dict(extra_a=True, lambda_anchor=0.0, **off),
        "merge": dict(extra_a=True, **off),
        "merge+buf": dict(extra_a=True, enable_buffer=True, enable_consistency=False),
        "merge+cons": dict(extra_a=True, enable_buffer=False, enable_consistency=True),
        "full": dict(extra_a=True, enable_buffer=True, enable_consistency=True),
    }
    if name == "full-RDP":
        return replace(variant_corridor(base, "full"), anchor_method="uniform")
    if name not in table:
        raise ValueError(f"unknown ablation variant: {name!r}")
    return replace(base, **table[name])


def run_ablation_suite(base: TrainSettings, records) -> tuple[list, dict]:
    """Train every ablation variant with shared seeds.

    Returns (rows, results) where rows feed the CSV table and results
    maps variant names to TrainResult objects (or error strings for
    failed rows).
    """
    base.validate()
    prepared_cache: dict = {}
    rows = []
    results: dict = {}
    for name in ABLATION_VARIANTS:
        cfg = variant_corridor(base.corridor, name)
        settings = replace(base, corridor=cfg)
        cache_key = (cfg.k, cfg.anchor_method, cfg.anchor_target)
        if cache_key not in prepared_cache:
            prepared_cache[cache_key] = prepare_dataset(records, cfg, settings.chunk_len)
        try:
            result = train(settings, prepared=prepared_cache[cache_key])
            report = result.metrics[-1].get("eval") if result.metrics else None
            if report is None or result.aborted:
                raise dc.TrainingAbortError(result.aborted or "missing eval")
            rows.append({
                "variant": name,
                "endpoint_error": report["endpoint_error"],
                "violation_rate": report["corridor_violation_rate"],
                "anchor_mae": report["anchor_mae"],
                "fm_val_loss": report["fm_val_loss"],
            })
            results[name] = result
        except Exception as exc:  # keep remaining rows running
            rows.append({
                "variant": name,
                "endpoint_error": float("nan"),
                "violation_rate": float("nan"),
                "anchor_mae": float("nan"),
                "fm_val_loss": float("nan"),
                "error": str(exc),
            })
            results[name] = f"failed: {exc}"
    return rows, results


def ablation_rows_to_csv(rows: list) -> str:
    lines = [ABLATION_CSV_HEADER]
    for row in rows:
        lines.append(
            f"{row['variant']},{row['endpoint_error']},{row['violation_rate']},"
            f"{row['anchor_mae']},{row['fm_val_loss']}"
        )
    return "\n".join(lines) + "\n"
