"""Polyline error metrics and sparse anchor selection.

A polyline is an ordered (N, 3) array of end-effector positions in meters.
Anchor selection picks K step indices whose piecewise-linear approximation
stays close to the dense path, either by a two-stage simplification
(recursive max-deviation pruning followed by an exact minimax dynamic
program) or by uniform interval sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RDP_BISECTION_ITERS = 12

ANCHOR_METHODS = ("rdp_dp", "uniform")


@dataclass(frozen=True)
class AnchorIndexSet:
    """Strictly increasing anchor step indices into a length-T chunk.

    Index 0 (the chunk start, zero elapsed displacement) is never an
    anchor; the terminal step index T-1 is eligible.
    """

    indices: tuple[int, ...]
    method_tag: str

    def __post_init__(self):
        if self.method_tag not in ANCHOR_METHODS:
            raise ValueError(f"unknown anchor method tag: {self.method_tag!r}")
        if len(self.indices) == 0:
            raise ValueError("anchor index set must not be empty")
        if self.indices[0] < 1:
            raise ValueError("anchor indices must be >= 1")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("anchor indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.indices)


def as_polyline(points) -> np.ndarray:
    """Validate and return points as a float64 (N, 3) array with N >= 2."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"polyline must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("polyline needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("polyline contains non-finite coordinates")
    return pts


def point_segment_distance(p, a, b) -> float:
    """Euclidean distance from point p to the closed segment [a, b].

    Degenerates to the point distance when a == b.
    """
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for arr in (p, a, b):
        if arr.shape != (3,):
            raise ValueError("points must be 3-vectors")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite coordinates")
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def segment_max_error(poly, i: int, j: int) -> float:
    """Worst-case deviation of the interior points of poly[i..j] from the
    chord between poly[i] and poly[j]. Zero when the chord spans adjacent
    points."""
    pts = as_polyline(poly)
    n = pts.shape[0]
    if not (0 <= i < j <= n - 1):
        raise ValueError(f"need 0 <= i < j <= {n - 1}, got i={i}, j={j}")
    return _chord_error(pts, i, j)


def _chord_error(pts: np.ndarray, i: int, j: int) -> float:
    if j - i < 2:
        return 0.0
    a = pts[i]
    b = pts[j]
    interior = pts[i + 1 : j]
    ab = b - a
    denom = float(ab @ ab)
    rel = interior - a
    if denom == 0.0:
        d = np.linalg.norm(rel, axis=1)
    else:
        t = np.clip(rel @ ab / denom, 0.0, 1.0)
        d = np.linalg.norm(rel - t[:, None] * ab, axis=1)
    return float(d.max())


def rdp_simplify(poly, epsilon: float) -> list[int]:
    """Recursive max-deviation simplification.

    Returns the sorted retained indices, always including both endpoints.
    Every chord between consecutive retained indices deviates from the
    dense path by at most epsilon; recursion splits at the point of
    largest deviation.
    """
    pts = as_polyline(poly)
    if epsilon < 0 or not math.isfinite(epsilon):
        raise ValueError("epsilon must be a finite value >= 0")
    n = pts.shape[0]
    keep = np.zeros(n, dtype=bool)
    keep[0] = True
    keep[n - 1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        a = pts[i]
        b = pts[j]
        interior = pts[i + 1 : j]
        ab = b - a
        denom = float(ab @ ab)
        rel = interior - a
        if denom == 0.0:
            d = np.linalg.norm(rel, axis=1)
        else:
            t = np.clip(rel @ ab / denom, 0.0, 1.0)
            d = np.linalg.norm(rel - t[:, None] * ab, axis=1)
        k = int(np.argmax(d))
        if float(d[k]) > epsilon:
            split = i + 1 + k
            keep[split] = True
            stack.append((i, split))
            stack.append((split, j))
    return [int(ix) for ix in np.flatnonzero(keep)]


def minimax_objective(poly, indices) -> float:
    """Worst chord error of the retention {0} | indices | {N-1}."""
    pts = as_polyline(poly)
    n = pts.shape[0]
    retained = sorted(set([0, n - 1]) | {int(i) for i in indices})
    if retained[0] < 0 or retained[-1] > n - 1:
        raise ValueError("indices out of range")
    worst = 0.0
    for a, b in zip(retained, retained[1:]):
        worst = max(worst, _chord_error(pts, a, b))
    return worst


def dp_minimax_select(poly, k: int, candidates=None) -> tuple[AnchorIndexSet, float]:
    """Select exactly k interior indices minimizing the worst chord error.

    Both endpoints are implicitly retained; the k selected indices lie
    strictly between them. The dynamic program evaluates
    dp[i][m] = min over j < i of max(dp[j][m-1], chord_error(j, i)) and the
    reported objective includes the closing chord from the last selected
    index to the final point. Ties are broken toward the lexicographically
    smallest index sequence. An optional candidate set restricts which
    interior indices may be selected.

    Returns (anchor set, objective value).
    """
    pts = as_polyline(poly)
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k + 2 > n:
        raise ValueError(f"k={k} infeasible for a polyline of {n} points")
    if candidates is None:
        cand = list(range(1, n - 1))
    else:
        cand = sorted({int(c) for c in candidates})
        if any(c < 1 or c > n - 2 for c in cand):
            raise ValueError("candidates must be interior indices")
        if len(cand) < k:
            raise ValueError(f"{len(cand)} candidates cannot supply k={k} anchors")

    m = len(cand)
    inf = math.inf

    # Chord errors between retained nodes; node 0 is the start, nodes
    # 1..m the candidates, node m+1 the final point.
    nodes = [0] + cand + [n - 1]
    err = np.full((m + 2, m + 2), inf)
    for a in range(m + 2):
        for b in range(a + 1, m + 2):
            err[a, b] = _chord_error(pts, nodes[a], nodes[b])

    # dp[c][r]: best worst-error covering the path up to candidate node
    # c + 1 using exactly r selected anchors, the r-th being that node.
    dp = np.full((m, k + 1), inf)
    for c in range(m):
        dp[c, 1] = err[0, c + 1]
        for r in range(2, min(k, c + 1) + 1):
            best = inf
            for j in range(c):
                prev = dp[j, r - 1]
                if prev >= best:
                    continue
                val = max(prev, err[j + 1, c + 1])
                if val < best:
                    best = val
            dp[c, r] = best

    objective = inf
    for c in range(m):
        if dp[c, k] < inf:
            objective = min(objective, max(dp[c, k], err[c + 1, m + 1]))
    objective = float(objective)

    # suffix[c][r]: best worst-error covering node c to the end using
    # exactly r further anchors after node c; drives the lexicographic
    # reconstruction below.
    suffix = np.full((m + 1, k + 1), inf)
    for c in range(m + 1):
        suffix[c, 0] = err[c, m + 1]
    for r in range(1, k + 1):
        for c in range(m + 1):
            best = inf
            for nxt in range(c + 1, m + 1):
                nxt_suffix = suffix[nxt, r - 1]
                if nxt_suffix >= best:
                    continue
                val = max(err[c, nxt], nxt_suffix)
                if val < best:
                    best = val
            suffix[c, r] = best

    # Greedy reconstruction: at each slot take the smallest node that
    # still admits a completion at the optimal objective.
    tol = 1e-12 * max(1.0, objective)
    chosen: list[int] = []
    at = 0
    for r in range(k, 0, -1):
        for nxt in range(at + 1, m + 2 - r):
            if max(err[at, nxt], suffix[nxt, r - 1]) <= objective + tol:
                chosen.append(cand[nxt - 1])
                at = nxt
                break
        else:
            raise AssertionError("minimax reconstruction failed")

    return AnchorIndexSet(tuple(chosen), "rdp_dp"), objective


def uniform_select(chunk_len: int, k: int) -> AnchorIndexSet:
    """Evenly spaced anchor indices round(m*T/k) - 1, clamped to [1, T-1]."""
    t = int(chunk_len)
    if k < 1 or k > t - 1:
        raise ValueError(f"k={k} infeasible for chunk length {t}")
    raw = [int(math.floor(m * t / k + 0.5)) - 1 for m in range(1, k + 1)]
    idx = sorted({min(t - 1, max(1, r)) for r in raw})
    if len(idx) != k:
        raise ValueError(f"uniform spacing collapses for T={t}, k={k}")
    return AnchorIndexSet(tuple(idx), "uniform")


def _rdp_count(pts: np.ndarray, epsilon: float) -> int:
    return len(rdp_simplify(pts, epsilon))


def _diameter(pts: np.ndarray) -> float:
    gaps = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((gaps * gaps).sum(axis=2)).max())


def select_anchor_indices(poly, k: int, method: str) -> AnchorIndexSet:
    """Anchor selection entry point used on chunk trajectory segments.

    For the two-stage method the simplification threshold is the smallest
    value retaining at most k + 2 points, found by bisection over
    [0, polyline diameter]; the minimax program then down-selects exactly
    k anchors from the retained interior points. When the simplification
    leaves k or fewer usable points the minimax program runs unrestricted.
    """
    pts = as_polyline(poly)
    n = pts.shape[0]
    if method == "uniform":
        return uniform_select(n - 1, k)
    if method != "rdp_dp":
        raise ValueError(f"unknown anchor method: {method!r}")
    if k + 2 > n:
        raise ValueError(f"k={k} infeasible for a polyline of {n} points")

    target = k + 2
    lo, hi = 0.0, _diameter(pts)
    if _rdp_count(pts, lo) <= target:
        eps = lo
    else:
        for _ in range(RDP_BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            if _rdp_count(pts, mid) <= target:
                hi = mid
            else:
                lo = mid
        eps = hi
    retained = rdp_simplify(pts, eps)
    candidates = [i for i in retained if 1 <= i <= n - 2]
    if len(candidates) <= k:
        chosen, _ = dp_minimax_select(pts, k)
    else:
        chosen, _ = dp_minimax_select(pts, k, candidates=candidates)
    return chosen
