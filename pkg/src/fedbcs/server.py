"""Server side of a round: cluster uploaded prototypes, form mean
prototypes, and aggregate client parameters by sample count.

Clustering is the first-neighbor graph construction: link i and j iff
j = kappa(i), i = kappa(j), or kappa(i) = kappa(j), where kappa(i) is i's
nearest neighbor; the partition is the connected components. Nearest
neighbors use cosine distance by default since prototypes are
direction-meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AggregationError, ContractError


def _distance_matrix(points: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.linalg.norm(points, axis=1)
        norms = np.maximum(norms, 1e-12)
        unit = points / norms[:, None]
        return 1.0 - unit @ unit.T
    if metric == "euclidean":
        sq = (points ** 2).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
        return np.sqrt(np.maximum(d2, 0.0))
    raise ContractError(f"unknown metric {metric!r}")


def first_neighbors(points: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """kappa(i): index of i's nearest neighbor; ties go to the lowest index."""
    dist = _distance_matrix(points, metric)
    np.fill_diagonal(dist, np.inf)
    return dist.argmin(axis=1)  # argmin takes the first occurrence on ties


def _components(n: int, kappa: np.ndarray):
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for i in range(n):
        union(i, int(kappa[i]))  # covers j=kappa(i) and i=kappa(j)
        for j in range(i + 1, n):
            if kappa[i] == kappa[j]:
                union(i, j)
    groups: dict = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [sorted(members) for _, members in sorted(groups.items())]


def finch_cluster(points, metric: str = "cosine", levels: int = 1):
    """Partition of the first-neighbor graph, recursed `levels` times.

    Each extra level re-clusters the cluster means and merges memberships;
    the default is the first (finest) partition. Returns a list of sorted
    member-index lists, ordered by smallest member.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        pts = np.stack([np.asarray(p, dtype=np.float64) for p in points])
    n = pts.shape[0]
    if n == 0:
        raise ContractError("finch_cluster needs at least one point")
    if levels < 1:
        raise ContractError("levels must be >= 1")
    partition = [[i] for i in range(n)] if n == 1 else _components(n, first_neighbors(pts, metric))
    for _ in range(levels - 1):
        if len(partition) == 1:
            break
        reps = cluster_representatives(partition, pts)
        coarse = ([[0]] if len(partition) == 1
                  else _components(len(partition), first_neighbors(reps, metric)))
        merged = [sorted(i for c in group for i in partition[c]) for group in coarse]
        if len(merged) == len(partition):
            break  # no further merging possible
        partition = sorted(merged, key=lambda members: members[0])
    return partition


def cluster_representatives(partition, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([pts[members].mean(axis=0) for members in partition])


def mean_prototype(representatives) -> np.ndarray:
    reps = np.asarray(representatives, dtype=np.float64)
    if reps.shape[0] < 1:
        raise ContractError("mean_prototype needs at least one representative")
    return reps.mean(axis=0)


@dataclass
class AggregationWeights:
    values: np.ndarray  # per-client N_m / sum N

    @classmethod
    def from_sample_counts(cls, counts) -> "AggregationWeights":
        arr = np.asarray(counts, dtype=np.float64)
        if np.any(arr < 1):
            raise ContractError("every client needs at least one sample")
        return cls(arr / arr.sum())

    def __post_init__(self):
        total = float(np.sum(self.values))
        if abs(total - 1.0) > 1e-12 or np.any(np.asarray(self.values) < 0):
            raise ContractError("aggregation weights must be nonnegative and sum to 1")


def fedavg_aggregate(client_params, weights: AggregationWeights) -> dict:
    """Per-parameter weighted sum, reduced in ascending client order so the
    result is bit-reproducible."""
    if len(client_params) != len(weights.values):
        raise ContractError("one weight per client required")
    ids = set(client_params[0])
    for m, state in enumerate(client_params[1:], start=1):
        if set(state) != ids:
            raise AggregationError(f"client {m} parameter identifiers disagree")
    out = {}
    w = weights.values
    for name in sorted(ids):
        acc = w[0] * client_params[0][name]
        for m in range(1, len(client_params)):
            acc = acc + w[m] * client_params[m][name]
        # accumulation runs at f64 weight width; store in the param dtype
        out[name] = acc.astype(client_params[0][name].dtype, copy=False)
    return out


class GlobalPrototypeSet:
    """Cluster representatives and mean prototype per (pathway, class)."""

    def __init__(self):
        self.entries: dict = {}

    def add(self, pathway: str, class_id: int, representatives: np.ndarray) -> None:
        self.entries[(pathway, class_id)] = {
            "representatives": np.asarray(representatives, dtype=np.float64),
            "mean": mean_prototype(representatives),
        }

    def representatives(self, pathway: str, class_id: int):
        entry = self.entries.get((pathway, class_id))
        return None if entry is None else entry["representatives"]

    def mean(self, pathway: str, class_id: int):
        entry = self.entries.get((pathway, class_id))
        return None if entry is None else entry["mean"]

    def negative_representatives(self, pathway: str, class_id: int) -> list:
        """Same-pathway representatives of every other class."""
        out = []
        for (pw, k), entry in sorted(self.entries.items()):
            if pw == pathway and k != class_id:
                out.extend(entry["representatives"])
        return out

    def classes(self, pathway: str):
        return sorted(k for (pw, k) in self.entries if pw == pathway)

    def has(self, pathway: str, class_id: int) -> bool:
        return (pathway, class_id) in self.entries

    def to_record(self) -> list:
        return [{
            "pathway": pw,
            "class_id": k,
            "cluster_count": int(entry["representatives"].shape[0]),
            "mean": [float(v) for v in entry["mean"]],
        } for (pw, k), entry in sorted(self.entries.items())]


def cluster_uploads(uploads, class_count: int, metric: str = "cosine",
                    levels: int = 1) -> GlobalPrototypeSet:
    """FINCH per (pathway, class) over whatever the clients uploaded.

    Clients missing a class are simply excluded from that class's points.
    """
    out = GlobalPrototypeSet()
    for pathway in ("enc", "dec"):
        for k in range(class_count):
            points = [ps.get(pathway, k).vector for ps in uploads
                      if ps.get(pathway, k) is not None]
            if not points:
                continue
            partition = finch_cluster(points, metric=metric, levels=levels)
            out.add(pathway, k, cluster_representatives(partition, np.stack(points)))
    return out


def run_server_round(uploads, client_params, sample_counts, class_count: int,
                     metric: str = "cosine", levels: int = 1):
    """Aggregate parameters and cluster prototypes; returns both broadcast
    artifacts (global parameter state, global prototype set)."""
    if not client_params:
        raise ContractError("run_server_round needs at least one client")
    weights = AggregationWeights.from_sample_counts(sample_counts)
    global_params = fedavg_aggregate(client_params, weights)
    global_protos = cluster_uploads(uploads, class_count, metric=metric, levels=levels)
    return global_params, global_protos
