"""Anchor-based positional embeddings over the two-way shortest-path metric.

Every node gets one coordinate per anchor: the average of the directed
shortest-path lengths to and from that anchor.  Anchors are drawn once (from a
reference snapshot) and reused for every snapshot of a stream, so coordinates
stay comparable when the topology drifts.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import RoadSnapshot, Topology

# Value given to an unreachable/absent-anchor coordinate after standardization.
SENTINEL_Z = 4.0
# Multiple of the largest finite coordinate used when normalization is off.
SENTINEL_FACTOR = 3.0


def _topology(g) -> Topology:
    return g.topology if isinstance(g, RoadSnapshot) else g


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple[str, ...]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.anchors)


def select_anchors(graph, m: int = 16, seed: int = 0) -> AnchorSet:
    """Draw ``m`` distinct anchors uniformly without replacement.

    Candidates are sorted by id first so the draw does not depend on the
    order nodes happen to be stored in.
    """
    topo = _topology(graph)
    if m < 1:
        raise ValueError("need at least one anchor")
    if m > topo.num_nodes:
        raise ValueError(f"cannot draw {m} anchors from {topo.num_nodes} nodes")
    candidates = sorted(topo.node_ids)
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=m, replace=False)
    return AnchorSet(tuple(candidates[i] for i in picked), seed)


def _csr(n: int, src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    order = np.argsort(src, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst[order], w[order]


def dijkstra(n: int, indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray,
             source: int) -> np.ndarray:
    """Single-source shortest paths with a binary heap; ``inf`` when unreachable."""
    done = [False] * n
    d_list = [math.inf] * n
    d_list[source] = 0.0
    heap = [(0.0, source)]
    ptr = indptr.tolist()
    idx = indices.tolist()
    wts = weights.tolist()
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for k in range(ptr[u], ptr[u + 1]):
            v = idx[k]
            nd = d + wts[k]
            if nd < d_list[v]:
                d_list[v] = nd
                heapq.heappush(heap, (nd, v))
    return np.array(d_list)


class ShortestPaths:
    """Forward and reverse single-source searches over one topology."""

    def __init__(self, graph):
        topo = _topology(graph)
        self.topology = topo
        n = topo.num_nodes
        self.n = n
        self._fwd = _csr(n, topo.src, topo.dst, topo.length_array)
        self._rev = _csr(n, topo.dst, topo.src, topo.length_array)

    def from_node(self, i: int) -> np.ndarray:
        return dijkstra(self.n, *self._fwd, i)

    def to_node(self, i: int) -> np.ndarray:
        """sp(v, i) for every v, via a search on the reversed graph."""
        return dijkstra(self.n, *self._rev, i)

    def two_way_from(self, i: int) -> np.ndarray:
        return (self.from_node(i) + self.to_node(i)) / 2.0


def two_way_distance(graph, u: str, v: str) -> float:
    """``(sp(u, v) + sp(v, u)) / 2``; ``inf`` if either direction is unreachable."""
    topo = _topology(graph)
    for x in (u, v):
        if x not in topo.index:
            raise KeyError(f"unknown node {x!r}")
    if u == v:
        return 0.0
    sp = ShortestPaths(topo)
    i, j = topo.index[u], topo.index[v]
    return float((sp.from_node(i)[j] + sp.to_node(i)[j]) / 2.0)


class EmbeddingTable:
    """Raw per-node anchor coordinates (kilometres, ``inf`` where undefined)."""

    def __init__(self, node_ids: Sequence[str], anchors: Sequence[str], values: np.ndarray):
        self.node_ids = tuple(node_ids)
        self.anchors = tuple(anchors)
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.shape != (len(self.node_ids), len(self.anchors)):
            raise ValueError("embedding table shape does not match nodes x anchors")
        self._index = {v: i for i, v in enumerate(self.node_ids)}

    @property
    def m(self) -> int:
        return len(self.anchors)

    def __getitem__(self, v: str) -> np.ndarray:
        return self.values[self._index[v]]

    def reorder(self, node_ids: Sequence[str]) -> "EmbeddingTable":
        rows = [self._index[v] for v in node_ids]
        return EmbeddingTable(node_ids, self.anchors, self.values[rows])

    def with_sentinel(self, sentinel: float | None = None) -> np.ndarray:
        """Replace ``inf`` by ``sentinel`` (default: 3x the largest finite entry)."""
        out = self.values.copy()
        finite = np.isfinite(out)
        if sentinel is None:
            top = out[finite].max() if finite.any() else 1.0
            sentinel = SENTINEL_FACTOR * max(top, 1e-12)
        out[~finite] = sentinel
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id"] + [f"L_{i + 1}" for i in range(self.m)])
            for v, row in zip(self.node_ids, self.values):
                w.writerow([v] + [repr(float(x)) if math.isfinite(x) else "inf" for x in row])

    @classmethod
    def from_csv(cls, path, anchors: Sequence[str] | None = None) -> "EmbeddingTable":
        """Read ``node_id,L_1..L_m``; anchor ids are not stored in the file."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        m = len(rows[0]) - 1
        if anchors is None:
            anchors = [f"L_{i + 1}" for i in range(m)]
        elif len(anchors) != m:
            raise ValueError(f"file has {m} columns but {len(anchors)} anchors were given")
        body = rows[1:]
        nodes = [r[0] for r in body]
        vals = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float64).reshape(
            len(nodes), len(anchors))
        return cls(nodes, anchors, vals)


def compute_embeddings(graph, anchor_set: AnchorSet) -> EmbeddingTable:
    """One two-way shortest-path coordinate per anchor for every node.

    Anchors missing from ``graph`` (deleted in this snapshot) yield an all-``inf``
    column.  Uses two searches per anchor: forward from it, and forward on the
    reversed graph for distances into it.
    """
    if len(anchor_set) == 0:
        raise ValueError("empty anchor set")
    topo = _topology(graph)
    sp = ShortestPaths(topo)
    cols = []
    for a in anchor_set.anchors:
        if a in topo.index:
            cols.append(sp.two_way_from(topo.index[a]))
        else:
            cols.append(np.full(topo.num_nodes, np.inf))
    return EmbeddingTable(topo.node_ids, anchor_set.anchors, np.stack(cols, axis=1))


def normalize_embeddings(table, sentinel_value: float = SENTINEL_Z) -> np.ndarray:
    """Standardize each dimension over its finite entries.

    Non-finite entries are set to ``sentinel_value`` afterwards; a dimension
    with no finite entry becomes constant ``sentinel_value``.  Constant finite
    dimensions map to zero.
    """
    vals = table.values if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float64)
    out = np.empty_like(vals)
    for j in range(vals.shape[1]):
        col = vals[:, j]
        finite = np.isfinite(col)
        if not finite.any():
            out[:, j] = sentinel_value
            continue
        mu = col[finite].mean()
        sd = col[finite].std()
        z = col - mu
        if sd > 0:
            z = z / sd
        else:
            z = np.zeros_like(col)
        z[~finite] = sentinel_value
        out[:, j] = z
    return out


@dataclass(frozen=True)
class DistortionReport:
    expansion: float
    contraction: float
    distortion: float
    raw_expansion: float
    raw_contraction: float
    pairs: int
    p: float


def measure_distortion(graph, embeddings: EmbeddingTable | np.ndarray, p: float = 2.0,
                       num_pairs: int | None = None, seed: int = 0) -> DistortionReport:
    """Worst-case expansion/contraction of ``embeddings`` against the two-way metric.

    ``num_pairs=None`` uses every unordered node pair.  The reported
    ``expansion``/``contraction`` are after rescaling the embedding so that it
    never contracts; their product (the distortion) is scale free.
    """
    topo = _topology(graph)
    n = topo.num_nodes
    emb = embeddings.reorder(topo.node_ids).values if isinstance(embeddings, EmbeddingTable) \
        else np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != n:
        raise ValueError("one embedding row per node required")
    if num_pairs is None:
        iu, ju = np.triu_indices(n, k=1)
    else:
        if num_pairs < 2:
            raise ValueError("num_pairs must be at least 2")
        rng = np.random.default_rng(seed)
        iu = rng.integers(0, n, size=num_pairs)
        ju = rng.integers(0, n - 1, size=num_pairs)
        ju = ju + (ju >= iu)
    sp = ShortestPaths(topo)
    dx = np.empty(len(iu))
    for s in np.unique(iu):
        sel = iu == s
        two = sp.two_way_from(int(s))
        dx[sel] = two[ju[sel]]
    diff = np.abs(emb[iu] - emb[ju])
    if np.isinf(p):
        dy = diff.max(axis=1)
    else:
        dy = (diff ** p).sum(axis=1) ** (1.0 / p)
    ok = np.isfinite(dx) & np.isfinite(dy) & (dx > 0)
    if not ok.any():
        raise ValueError("no node pair at finite positive distance")
    dx, dy = dx[ok], dy[ok]
    with np.errstate(divide="ignore"):
        ratio = dy / dx
        raw_exp = float(ratio.max())
        raw_con = float((dx / dy).max()) if (dy > 0).all() else math.inf
    # scale so that min ratio becomes 1: contraction 1, expansion = max/min
    lo = float(ratio.min())
    expansion = raw_exp / lo if lo > 0 else math.inf
    return DistortionReport(expansion=expansion, contraction=1.0,
                            distortion=expansion, raw_expansion=raw_exp,
                            raw_contraction=raw_con, pairs=int(ok.sum()), p=float(p))


class PositionalEncoder:
    """Caches normalized (or sentinel-filled) features per distinct topology."""

    def __init__(self, anchor_set: AnchorSet, normalize: bool = True):
        self.anchor_set = anchor_set
        self.normalize = normalize
        self._cache: dict = {}

    @property
    def dim(self) -> int:
        return len(self.anchor_set)

    def __call__(self, graph) -> np.ndarray:
        topo = _topology(graph)
        key = topo.key()
        hit = self._cache.get(key)
        if hit is None:
            table = compute_embeddings(topo, self.anchor_set)
            feats = normalize_embeddings(table) if self.normalize else table.with_sentinel()
            hit = (table.node_ids, feats)
            self._cache[key] = hit
        ids, feats = hit
        if ids == topo.node_ids:
            return feats
        pos = {v: i for i, v in enumerate(ids)}
        return feats[[pos[v] for v in topo.node_ids]]


def save_embeddings(table: EmbeddingTable, path) -> None:
    table.to_csv(Path(path))


def load_embeddings(path, anchors: Sequence[str] | None = None) -> EmbeddingTable:
    return EmbeddingTable.from_csv(Path(path), anchors)
