"""Conditional hierarchical agglomerative clustering (Ward linkage).

Greedy bottom-up merging of embedding vectors: at each step the pair of
clusters whose merge least increases the within-cluster sum of squares is
fused, until the requested cluster count remains. The "conditional" part
is the guard used by prototype extraction: a class with fewer samples
than the requested count is not clustered at all, every sample stands
alone, so the output count is always min(requested, n).

Cluster means are maintained incrementally (exact weighted average, which
for Ward linkage reproduces the recompute-from-members costs), and ties
on merge cost are broken by the lexicographically smallest cluster-id
pair. Ids follow the dendrogram convention: input points are clusters
0..n-1 and the i-th merge creates id n+i.

A deliberately naive reference (`_ward_reference`, recompute everything
each step) ships here for equivalence testing only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Cluster",
    "ClusteringResult",
    "delta_ssq",
    "chac",
    "centroids",
    "kmeans",
    "merge_log_csv",
]


@dataclass(frozen=True)
class Cluster:
    """Member indices into the input plus their running mean."""

    members: tuple[int, ...]
    mean: np.ndarray

    def __post_init__(self):
        if not self.members:
            raise ValueError("a cluster needs at least one member")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusteringResult:
    clusters: tuple[Cluster, ...]
    merges: tuple[tuple[int, int, float], ...]  # (id_a, id_b, cost), id_a < id_b
    requested: int

    @property
    def achieved(self) -> int:
        return len(self.clusters)

    def partition(self) -> frozenset[frozenset[int]]:
        return frozenset(frozenset(c.members) for c in self.clusters)


def _pair_cost(size_a: float, mean_a: np.ndarray, size_b: float, mean_b: np.ndarray) -> float:
    gap = mean_a - mean_b
    return float(size_a * size_b / (size_a + size_b) * np.dot(gap, gap))


def delta_ssq(a: Cluster, b: Cluster) -> float:
    """Increase in within-cluster sum of squares if a and b were merged."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    return _pair_cost(a.size, a.mean, b.size, b.mean)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
        raise ValueError(f"points must be a nonempty (n, q) array, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain NaN or Inf")
    return pts


def _singletons(pts: np.ndarray, requested: int) -> ClusteringResult:
    clusters = tuple(Cluster((i,), pts[i].copy()) for i in range(len(pts)))
    return ClusteringResult(clusters, (), requested)


def chac(points, requested: int) -> ClusteringResult:
    """Ward-linkage agglomeration down to ``requested`` clusters.

    Fewer points than requested leaves every point alone (the conditional
    guard); the merge log records (id_a, id_b, cost) per step with
    non-decreasing costs.
    """
    pts = _as_points(points)
    if requested < 1:
        raise ValueError(f"requested cluster count must be >= 1, got {requested}")
    n = len(pts)
    if n <= requested:
        return _singletons(pts, requested)

    means = pts.copy()
    sizes = np.ones(n)
    alive = np.ones(n, dtype=bool)
    ids = list(range(n))
    members: list[list[int]] = [[i] for i in range(n)]

    # Full symmetric cost matrix; dead slots and the diagonal stay +inf.
    diff = means[:, None, :] - means[None, :, :]
    ssq = np.einsum("ijq,ijq->ij", diff, diff)
    cost = 0.5 * ssq  # singleton sizes: v_a v_b / (v_a + v_b) = 1/2
    np.fill_diagonal(cost, np.inf)

    merges: list[tuple[int, int, float]] = []
    next_id = n
    remaining = n
    while remaining > requested:
        m = cost.min()
        # Exact-tie candidates, resolved by smallest (min id, max id).
        cand = np.argwhere(cost == m)
        best = None
        for i, j in cand:
            if i >= j:
                continue
            key = (min(ids[i], ids[j]), max(ids[i], ids[j]))
            if best is None or key < best[0]:
                best = (key, int(i), int(j))
        (id_lo, id_hi), i, j = best
        merges.append((id_lo, id_hi, float(m)))

        merged_size = sizes[i] + sizes[j]
        means[i] = (sizes[i] * means[i] + sizes[j] * means[j]) / merged_size
        sizes[i] = merged_size
        members[i].extend(members[j])
        ids[i] = next_id
        next_id += 1
        alive[j] = False
        cost[j, :] = np.inf
        cost[:, j] = np.inf

        # Refresh slot i's costs against the survivors.
        others = np.flatnonzero(alive)
        others = others[others != i]
        gap = means[others] - means[i]
        pair = sizes[i] * sizes[others] / (sizes[i] + sizes[others])
        fresh = pair * np.einsum("kq,kq->k", gap, gap)
        cost[i, others] = fresh
        cost[others, i] = fresh
        remaining -= 1

    order = sorted(np.flatnonzero(alive), key=lambda s: min(members[s]))
    clusters = tuple(
        Cluster(tuple(sorted(members[s])), means[s].copy()) for s in order
    )
    return ClusteringResult(clusters, tuple(merges), requested)


def _ward_reference(points, requested: int) -> ClusteringResult:
    """O(n^3) oracle: recompute all means and pair costs from members at
    every step. Same tie-break contract as chac; testing only."""
    pts = _as_points(points)
    if requested < 1:
        raise ValueError(f"requested cluster count must be >= 1, got {requested}")
    n = len(pts)
    if n <= requested:
        return _singletons(pts, requested)

    groups: list[tuple[int, list[int]]] = [(i, [i]) for i in range(n)]
    merges: list[tuple[int, int, float]] = []
    next_id = n
    while len(groups) > requested:
        # fresh means from raw members every step, never carried over
        step_means = [pts[mem].mean(axis=0) for _, mem in groups]
        best = None
        for a in range(len(groups)):
            id_a, mem_a = groups[a]
            for b in range(a + 1, len(groups)):
                id_b, mem_b = groups[b]
                c = _pair_cost(len(mem_a), step_means[a], len(mem_b), step_means[b])
                key = (c, min(id_a, id_b), max(id_a, id_b))
                if best is None or key < best[0]:
                    best = (key, a, b)
        (c, id_lo, id_hi), a, b = best
        merges.append((id_lo, id_hi, c))
        merged = (next_id, groups[a][1] + groups[b][1])
        next_id += 1
        groups = [g for k, g in enumerate(groups) if k not in (a, b)] + [merged]
    groups.sort(key=lambda g: min(g[1]))
    clusters = tuple(
        Cluster(tuple(sorted(mem)), pts[mem].mean(axis=0)) for _, mem in groups
    )
    return ClusteringResult(clusters, tuple(merges), requested)


def centroids(result: ClusteringResult) -> np.ndarray:
    """Cluster means as an (achieved, q) array, in result order."""
    return np.vstack([c.mean for c in result.clusters])


def kmeans(points, requested: int, seed: int, max_iters: int = 100) -> ClusteringResult:
    """Lloyd's iteration with uniform-over-points init; same conditional
    guard as chac. Clusters that empty out are dropped from the result."""
    pts = _as_points(points)
    if requested < 1:
        raise ValueError(f"requested cluster count must be >= 1, got {requested}")
    n = len(pts)
    if n < requested:
        return _singletons(pts, requested)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 103]))
    cents = pts[rng.choice(n, size=requested, replace=False)].copy()
    assign = np.full(n, -1)
    for _ in range(max_iters):
        d2 = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(requested):
            mine = assign == k
            if np.any(mine):  # empty clusters keep their old centroid
                cents[k] = pts[mine].mean(axis=0)

    clusters = []
    for k in range(requested):
        mem = np.flatnonzero(assign == k)
        if mem.size:
            clusters.append(Cluster(tuple(int(i) for i in mem), pts[mem].mean(axis=0)))
    return ClusteringResult(tuple(clusters), (), requested)


def merge_log_csv(result: ClusteringResult) -> str:
    """Dendrogram audit: one line per merge."""
    lines = ["step,cluster_a,cluster_b,delta_ssq"]
    for step, (a, b, c) in enumerate(result.merges):
        lines.append(f"{step},{a},{b},{c!r}")
    return "\n".join(lines) + "\n"
