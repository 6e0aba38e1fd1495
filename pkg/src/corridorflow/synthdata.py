"""Synthetic manipulation-like episodes and chunked training datasets.

Episodes are dense end-effector paths with a gripper channel, drawn from
three families: straight lines, circular arcs through a via point, and
two-segment minimum-jerk pick-and-place motions. Chunks are sliding
windows of per-step actions augmented with the realized displacement
field; anchor ground truth (indices, increment targets, corridor width,
stage weights) is derived per chunk.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .corridor import A_DIM, CHUNK_DIM, corridor_width
from .util import splitmix64

FAMILIES = ("line", "arc", "min_jerk_pick_place")

DATASET_FIELDS = (
    "context",
    "chunk",
    "anchor_indices",
    "delta_targets",
    "pos_targets",
    "delta_width",
    "seed",
)


class DatasetParseError(ValueError):
    """A dataset line is not valid JSON."""


class DatasetSchemaError(ValueError):
    """A dataset record is missing or mistypes a required field."""


@dataclass(frozen=True)
class TaskContext:
    """Compact task descriptor conditioning the generator.

    start_pos is the position at the start of the chunk window; goal and
    via describe the episode. The flat context vector concatenates
    start, goal, via (zeros when absent) and a family one-hot.
    """

    start_pos: np.ndarray
    goal_pos: np.ndarray
    via_pos: np.ndarray | None
    family: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family: {self.family!r}")
        if float(np.linalg.norm(self.goal_pos - self.start_pos)) <= 0.0:
            raise ValueError("goal must differ from start")

    @property
    def vector(self) -> np.ndarray:
        via = np.zeros(3) if self.via_pos is None else self.via_pos
        onehot = np.zeros(len(FAMILIES))
        onehot[FAMILIES.index(self.family)] = 1.0
        return np.concatenate([self.start_pos, self.goal_pos, via, onehot])


CONTEXT_DIM = 12


@dataclass(frozen=True)
class Episode:
    """Dense trajectory (n positions, n-1 steps) plus gripper channel."""

    positions: np.ndarray  # (n, 3)
    gripper: np.ndarray  # (n,)
    context: TaskContext
    dt: float

    @property
    def n_positions(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class GenParams:
    """Episode generator configuration.

    t_full counts trajectory positions. start/goal/via pin the geometry
    when given; otherwise geometry is sampled inside the workspace box
    and scaled to respect the per-step velocity bound.
    """

    t_full: int = 40
    dt: float = 0.05
    v_max: float = 0.5
    workspace: float = 0.3
    start: tuple | None = None
    goal: tuple | None = None
    via: tuple | None = None

    def validate(self) -> None:
        if self.t_full < 8:
            raise ValueError("t_full must be >= 8")
        if self.dt <= 0 or self.v_max <= 0 or self.workspace <= 0:
            raise ValueError("dt, v_max and workspace must be positive")


@dataclass(frozen=True)
class AnchorSpec:
    """Ground-truth anchor supervision for one chunk.

    delta_targets are inter-anchor displacements (chunk start to first
    anchor, then anchor to anchor); pos_targets are displacements from
    the chunk start. delta_width is the corridor radius; weights are the
    stage weights 2*tau / (K * (K + 1)).
    """

    indices: geometry.AnchorIndexSet
    delta_targets: np.ndarray  # (K, 3)
    pos_targets: np.ndarray  # (K, 3)
    delta_width: float
    weights: np.ndarray  # (K,)

    @property
    def k(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class DatasetRecord:
    context: TaskContext
    chunk: np.ndarray  # (T, CHUNK_DIM)
    spec: AnchorSpec
    seed: int


def stage_weights(k: int) -> np.ndarray:
    """Normalized, strictly increasing stage weights 2*tau / (K*(K+1))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tau = np.arange(1, k + 1, dtype=np.float64)
    return 2.0 * tau / (k * (k + 1))


def min_jerk_profile(u):
    """Smooth 0->1 profile 10u^3 - 15u^4 + 6u^5 with zero boundary rates."""
    u = np.asarray(u, dtype=np.float64)
    return 10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5


def _sample_point(rng: np.random.Generator, half: float) -> np.ndarray:
    return rng.uniform(-half, half, 3)


def _line_positions(start, goal, n):
    s = np.linspace(0.0, 1.0, n)
    return start[None, :] + s[:, None] * (goal - start)[None, :]


def _arc_positions(start, via, goal, n):
    u1 = via - start
    u2 = goal - start
    e1 = u1 / np.linalg.norm(u1)
    perp = u2 - (u2 @ e1) * e1
    if np.linalg.norm(perp) < 1e-9:
        raise ValueError("arc points are collinear")
    e2 = perp / np.linalg.norm(perp)

    def plane(p):
        rel = p - start
        return np.array([rel @ e1, rel @ e2])

    a2, b2, c2 = plane(start), plane(via), plane(goal)
    # Circumcenter from the two perpendicular-bisector equations.
    d = 2.0 * (b2[0] * c2[1] - c2[0] * b2[1])
    if abs(d) < 1e-12:
        raise ValueError("arc points are collinear")
    ux = (c2[1] * (b2 @ b2) - b2[1] * (c2 @ c2)) / d
    uy = (b2[0] * (c2 @ c2) - c2[0] * (b2 @ b2)) / d
    center = np.array([ux, uy])
    radius = np.linalg.norm(a2 - center)

    def angle(p2):
        rel = p2 - center
        return math.atan2(rel[1], rel[0])

    phi_a, phi_b, phi_c = angle(a2), angle(b2), angle(c2)
    ccw_total = (phi_c - phi_a) % (2.0 * math.pi)
    ccw_via = (phi_b - phi_a) % (2.0 * math.pi)
    if ccw_via <= ccw_total:
        delta = ccw_total
    else:
        delta = ccw_total - 2.0 * math.pi
    phis = phi_a + np.linspace(0.0, 1.0, n) * delta
    pts2 = center[None, :] + radius * np.stack([np.cos(phis), np.sin(phis)], axis=1)
    return start[None, :] + pts2[:, :1] * e1[None, :] + pts2[:, 1:2] * e2[None, :]


def _min_jerk_positions(start, via, goal, n):
    mid = (n - 1) // 2
    u1 = np.arange(mid + 1) / mid
    u2 = np.arange(n - mid) / (n - 1 - mid)
    leg1 = start[None, :] + min_jerk_profile(u1)[:, None] * (via - start)[None, :]
    leg2 = via[None, :] + min_jerk_profile(u2)[:, None] * (goal - via)[None, :]
    return np.concatenate([leg1, leg2[1:]], axis=0)


def gen_episode(family: str, rng_seed: int, params: GenParams) -> Episode:
    """Deterministic episode for (family, seed, params).

    Sampled geometry is shrunk toward the start point if needed so that
    every step satisfies ||p[k+1] - p[k]|| <= v_max * dt; explicitly
    pinned geometry violating the bound raises instead.
    """
    params.validate()
    if family not in FAMILIES:
        raise ValueError(f"unknown family: {family!r}")
    rng = np.random.default_rng(int(rng_seed))
    n = params.t_full
    half = params.workspace
    pinned = params.start is not None or params.goal is not None or params.via is not None

    start = np.asarray(params.start, dtype=np.float64) if params.start is not None \
        else _sample_point(rng, half)
    goal = np.asarray(params.goal, dtype=np.float64) if params.goal is not None else None
    via = np.asarray(params.via, dtype=np.float64) if params.via is not None else None

    if goal is None:
        while True:
            goal = _sample_point(rng, half)
            if np.linalg.norm(goal - start) > 0.2 * half:
                break
    if family != "line" and via is None:
        while True:
            via = _sample_point(rng, half)
            d1 = np.linalg.norm(via - start)
            d2 = np.linalg.norm(goal - via)
            chord = goal - start
            lat = np.linalg.norm(np.cross(chord, via - start)) / max(np.linalg.norm(chord), 1e-12)
            if d1 > 0.1 * half and d2 > 0.1 * half and lat > 0.05 * half:
                break

    if family == "line":
        positions = _line_positions(start, goal, n)
        via = None
    elif family == "arc":
        positions = _arc_positions(start, via, goal, n)
    else:
        positions = _min_jerk_positions(start, via, goal, n)

    bound = params.v_max * params.dt
    max_step = float(np.max(np.linalg.norm(np.diff(positions, axis=0), axis=1)))
    if max_step > bound:
        if pinned:
            raise ValueError(
                f"pinned geometry exceeds velocity bound: step {max_step:.4g} > {bound:.4g}"
            )
        factor = 0.9 * bound / max_step
        positions = start[None, :] + factor * (positions - start[None, :])
        goal = start + factor * (goal - start)
        if via is not None:
            via = start + factor * (via - start)

    gripper = np.zeros(n)
    if family == "min_jerk_pick_place":
        gripper[(n - 1) // 2 + 1 :] = 1.0

    ctx = TaskContext(
        start_pos=positions[0].copy(),
        goal_pos=goal.copy(),
        via_pos=None if via is None else via.copy(),
        family=family,
    )
    return Episode(positions=positions, gripper=gripper, context=ctx, dt=params.dt)


def chunk_episode(ep: Episode, chunk_len: int, noise_std: float,
                  rng: np.random.Generator, stride: int = 1):
    """Sliding-window extended action chunks from a dense episode.

    Each window of T steps yields a (T, 7) matrix: commanded deltas
    (true deltas plus Gaussian actuation noise), the gripper command,
    and the noise-free realized displacement field. The context of each
    chunk replaces start_pos with the window's first position.
    """
    t = int(chunk_len)
    n = ep.n_positions
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if t < 2:
        raise ValueError("chunk length must be >= 2")
    if t > n - 1:
        raise ValueError(f"chunk length {t} exceeds the {n - 1} available steps")
    deltas = np.diff(ep.positions, axis=0)
    out = []
    for s in range(0, n - t, stride):
        true = deltas[s : s + t]
        noise = rng.normal(0.0, noise_std, (t, 3)) if noise_std > 0 else np.zeros((t, 3))
        grip_cmd = ep.gripper[s + 1 : s + t + 1]
        chunk = np.concatenate([true + noise, grip_cmd[:, None], true], axis=1)
        ctx = replace(ep.context, start_pos=ep.positions[s].copy())
        out.append((ctx, chunk))
    return out


def implied_segment(chunk: np.ndarray, start_pos: np.ndarray) -> np.ndarray:
    """T+1 trajectory positions reconstructed from the displacement field."""
    deltas = chunk[:, A_DIM : A_DIM + 3]
    return np.concatenate(
        [start_pos[None, :], start_pos[None, :] + np.cumsum(deltas, axis=0)], axis=0
    )


def extract_step_deltas(chunk: np.ndarray, indices) -> np.ndarray:
    """Displacement-field rows at the anchor steps (the gather g)."""
    idx = np.asarray(list(indices), dtype=int)
    return chunk[idx, A_DIM : A_DIM + 3]


def build_anchor_spec(chunk: np.ndarray, traj_segment: np.ndarray, k: int,
                      method: str, target_mode: str = "delta",
                      anchor_target: str = "inter_anchor") -> AnchorSpec:
    """Anchor ground truth for one chunk.

    traj_segment holds the T+1 positions spanned by the chunk. Targets
    default to inter-anchor displacements p[t_k] - p[t_{k-1}] (with the
    chunk start as t_0); anchor_target="step_delta" instead uses the
    single-step displacement at each anchor, which collapses the corridor
    width to zero on clean data. The width follows
    alpha * max_k ||g(chunk)_k - target_k|| with alpha fixed by the
    caller via corridor_width (alpha = 2 here).
    """
    if target_mode not in ("delta", "pos"):
        raise ValueError(f"unknown target_mode: {target_mode!r}")
    if anchor_target not in ("inter_anchor", "step_delta"):
        raise ValueError(f"unknown anchor_target: {anchor_target!r}")
    t = chunk.shape[0]
    if chunk.shape != (t, CHUNK_DIM):
        raise ValueError(f"chunk must be (T, {CHUNK_DIM})")
    seg = np.asarray(traj_segment, dtype=np.float64)
    if seg.shape != (t + 1, 3):
        raise ValueError(f"traj_segment must have T+1={t + 1} points")
    if k < 1 or k > t - 1:
        raise ValueError(f"k={k} infeasible for chunk length {t}")
    if not np.allclose(np.diff(seg, axis=0), chunk[:, A_DIM : A_DIM + 3], atol=1e-9):
        raise ValueError("traj_segment inconsistent with the chunk displacement field")

    idx_set = geometry.select_anchor_indices(seg, k, method)
    idx = np.asarray(idx_set.indices, dtype=int)

    pos_targets = seg[idx] - seg[0]
    if anchor_target == "inter_anchor":
        prev = np.concatenate([[0], idx[:-1]])
        delta_targets = seg[idx] - seg[prev]
    else:
        delta_targets = extract_step_deltas(chunk, idx)

    width = corridor_width(chunk, idx, delta_targets, alpha=2.0)
    return AnchorSpec(
        indices=idx_set,
        delta_targets=delta_targets,
        pos_targets=pos_targets,
        delta_width=width,
        weights=stage_weights(k),
    )


# ---------------------------------------------------------------------------
# Dataset generation and persistence


def quantize_sig9(arr: np.ndarray) -> np.ndarray:
    """Round values to 9 significant decimal digits (dataset precision)."""
    flat = arr.reshape(-1)
    out = np.array([float(f"{v:.9g}") for v in flat])
    return out.reshape(arr.shape)


@dataclass(frozen=True)
class DatasetConfig:
    families: tuple = ("min_jerk_pick_place",)
    chunks: int = 4000
    chunk_len: int = 16
    k: int = 3
    anchor_method: str = "rdp_dp"
    anchor_target: str = "inter_anchor"
    noise_std: float = 0.002
    stride: int = 1
    gen: GenParams = GenParams()

    def validate(self) -> None:
        for fam in self.families:
            if fam not in FAMILIES:
                raise ValueError(f"unknown family: {fam!r}")
        if self.chunks < 1:
            raise ValueError("chunks must be >= 1")
        if self.anchor_method not in geometry.ANCHOR_METHODS:
            raise ValueError(f"unknown anchor method: {self.anchor_method!r}")
        if not 1 <= self.k <= self.chunk_len - 1:
            raise ValueError(f"k={self.k} infeasible for chunk length {self.chunk_len}")
        if self.chunk_len > self.gen.t_full - 1:
            raise ValueError("chunk_len exceeds episode steps")
        self.gen.validate()


def generate_dataset(cfg: DatasetConfig, master_seed: int) -> list[DatasetRecord]:
    """Pure function of (config, master seed): a list of chunk records.

    Episode seeds derive from the master seed by splitmix, families
    rotate round-robin, and chunk matrices are stored at 9 significant
    digits with anchor ground truth computed from the stored values.
    """
    cfg.validate()
    records: list[DatasetRecord] = []
    ep_index = 0
    while len(records) < cfg.chunks:
        ep_seed = splitmix64(master_seed, ep_index)
        family = cfg.families[ep_index % len(cfg.families)]
        ep = gen_episode(family, ep_seed, cfg.gen)
        noise_rng = np.random.default_rng(splitmix64(ep_seed, 1))
        for ctx, chunk in chunk_episode(ep, cfg.chunk_len, cfg.noise_std, noise_rng,
                                        stride=cfg.stride):
            chunk_q = quantize_sig9(chunk)
            seg = implied_segment(chunk_q, ctx.start_pos)
            spec = build_anchor_spec(chunk_q, seg, cfg.k, cfg.anchor_method,
                                     anchor_target=cfg.anchor_target)
            records.append(DatasetRecord(ctx, chunk_q, spec, ep_seed))
            if len(records) >= cfg.chunks:
                break
        ep_index += 1
    return records


def _context_to_json(ctx: TaskContext) -> dict:
    return {
        "start_pos": [float(v) for v in ctx.start_pos],
        "goal_pos": [float(v) for v in ctx.goal_pos],
        "via_pos": None if ctx.via_pos is None else [float(v) for v in ctx.via_pos],
        "family": ctx.family,
    }


def _context_from_json(obj: dict) -> TaskContext:
    return TaskContext(
        start_pos=np.asarray(obj["start_pos"], dtype=np.float64),
        goal_pos=np.asarray(obj["goal_pos"], dtype=np.float64),
        via_pos=None if obj["via_pos"] is None else np.asarray(obj["via_pos"], dtype=np.float64),
        family=obj["family"],
    )


def record_to_json(rec: DatasetRecord, extra: dict | None = None) -> str:
    obj = {
        "context": _context_to_json(rec.context),
        "chunk": [[float(f"{v:.9g}") for v in row] for row in rec.chunk],
        "anchor_indices": [int(i) for i in rec.spec.indices.indices],
        "delta_targets": [[float(v) for v in row] for row in rec.spec.delta_targets],
        "pos_targets": [[float(v) for v in row] for row in rec.spec.pos_targets],
        "delta_width": float(rec.spec.delta_width),
        "seed": int(rec.seed),
    }
    if extra:
        obj.update(extra)
    return json.dumps(obj)


def write_dataset(path, records, method_tag: str = "rdp_dp") -> None:
    """One JSON object per line; the chunk matrix is stored row-major at
    9 significant digits."""
    with io.open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(record_to_json(rec) + "\n")


def _record_from_obj(obj: dict, line_no: int, method_tag: str) -> DatasetRecord:
    for field_name in DATASET_FIELDS:
        if field_name not in obj:
            raise DatasetSchemaError(f"line {line_no}: missing field {field_name!r}")
    try:
        ctx = _context_from_json(obj["context"])
        chunk = np.asarray(obj["chunk"], dtype=np.float64)
        idx = geometry.AnchorIndexSet(tuple(int(i) for i in obj["anchor_indices"]), method_tag)
        delta_targets = np.asarray(obj["delta_targets"], dtype=np.float64)
        pos_targets = np.asarray(obj["pos_targets"], dtype=np.float64)
        width = float(obj["delta_width"])
        seed = int(obj["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetSchemaError(f"line {line_no}: {exc}") from exc
    if chunk.ndim != 2 or chunk.shape[1] != CHUNK_DIM:
        raise DatasetSchemaError(f"line {line_no}: chunk must be (T, {CHUNK_DIM})")
    spec = AnchorSpec(
        indices=idx,
        delta_targets=delta_targets,
        pos_targets=pos_targets,
        delta_width=width,
        weights=stage_weights(len(idx)),
    )
    return DatasetRecord(ctx, chunk, spec, seed)


def read_dataset(path, method_tag: str = "rdp_dp") -> list[DatasetRecord]:
    """Inverse of write_dataset. Raises DatasetParseError with the line
    number on malformed JSON and DatasetSchemaError on missing fields."""
    records = []
    with io.open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"line {line_no}: {exc}") from exc
            records.append(_record_from_obj(obj, line_no, method_tag))
    return records
