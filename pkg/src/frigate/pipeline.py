"""Data ingestion, synthetic traffic, and robustness perturbations."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import shortest_path
import scipy.sparse as sp

from .graph import (GraphError, RoadSnapshot, RoadStream, Topology, haversine,
                    stream_from_arrays)

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed input file; message carries the file name and line number."""


@dataclass(frozen=True)
class BucketSpec:
    length: float = 300.0   # seconds
    origin: float = 0.0

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("bucket length must be positive")

    def bucket(self, time: float) -> int:
        return int(math.floor((time - self.origin) / self.length))


# ---------------------------------------------------------------- CSV I/O

def _rows(path, header: Sequence[str], optional: Sequence[str] = ()):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path.name}:1: empty file, expected header {','.join(header)}")
        need = list(header)
        if head[:len(need)] != need:
            raise DataError(f"{path.name}:1: expected header {','.join(header)}, got {','.join(head)}")
        cols = len(head)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(need) or len(row) > cols:
                raise DataError(f"{path.name}:{lineno}: expected {cols} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row] + [""] * (cols - len(row))


def read_topology(nodes_csv, edges_csv) -> Topology:
    coords = {}
    order = []
    for lineno, (v, lat, lon) in _rows(nodes_csv, ["node_id", "lat", "lon"]):
        try:
            coords[v] = (float(lat), float(lon))
        except ValueError:
            raise DataError(f"{Path(nodes_csv).name}:{lineno}: bad coordinate") from None
        if v in order:
            raise DataError(f"{Path(nodes_csv).name}:{lineno}: duplicate node {v!r}")
        order.append(v)
    edges, lengths = [], {}
    for lineno, row in _rows(edges_csv, ["src", "dst"]):
        u, v = row[0], row[1]
        if u not in coords or v not in coords:
            raise DataError(f"{Path(edges_csv).name}:{lineno}: edge ({u}, {v}) references an unknown node")
        edges.append((u, v))
        if len(row) > 2 and row[2] != "":
            try:
                lengths[(u, v)] = float(row[2])
            except ValueError:
                raise DataError(f"{Path(edges_csv).name}:{lineno}: bad length {row[2]!r}") from None
    try:
        return Topology(order, edges, lengths, coords)
    except GraphError as exc:
        raise DataError(f"{Path(edges_csv).name}: {exc}") from None


def ingest(nodes_csv, edges_csv, readings_csv, bucket_spec: BucketSpec | None = None,
           t_lo: int | None = None, t_hi: int | None = None, horizon: int = 12) -> RoadStream:
    """Build a stream with one snapshot per bucket.

    With ``bucket_spec=None`` the ``timestamp`` column already holds bucket
    indices.  Several records for one node in one bucket are summed; an empty
    ``value`` field or an absent record leaves the reading MISSING.
    """
    topo = read_topology(nodes_csv, edges_csv)
    name = Path(readings_csv).name
    acc: dict[tuple[int, int], float] = {}
    seen_t: set[int] = set()
    for lineno, (v, ts, val) in _rows(readings_csv, ["node_id", "timestamp", "value"]):
        if v not in topo.index:
            raise DataError(f"{name}:{lineno}: unknown node {v!r}")
        try:
            t = int(ts) if bucket_spec is None else bucket_spec.bucket(float(ts))
        except ValueError:
            raise DataError(f"{name}:{lineno}: bad timestamp {ts!r}") from None
        seen_t.add(t)
        if val == "":
            continue
        try:
            x = float(val)
        except ValueError:
            raise DataError(f"{name}:{lineno}: bad value {val!r}") from None
        key = (t, topo.index[v])
        acc[key] = acc.get(key, 0.0) + x
    lo = t_lo if t_lo is not None else (min(seen_t) if seen_t else 0)
    hi = t_hi if t_hi is not None else (max(seen_t) if seen_t else lo)
    T = hi - lo + 1
    if T < 1:
        raise DataError(f"{name}: empty time range [{lo}, {hi}]")
    values = np.zeros((T, topo.num_nodes))
    present = np.zeros((T, topo.num_nodes), dtype=bool)
    for (t, i), x in acc.items():
        if lo <= t <= hi:
            values[t - lo, i] = x
            present[t - lo, i] = True
    return stream_from_arrays(topo, values, present, range(lo, hi + 1), horizon)


def write_topology(topology: Topology, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if topology.coords is None:
        raise GraphError("exporting nodes.csv needs node coordinates")
    with open(out / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "lat", "lon"])
        for v in topology.node_ids:
            lat, lon = topology.coords[v]
            w.writerow([v, repr(lat), repr(lon)])
    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "length_km"])
        for (u, v) in topology.edges:
            w.writerow([u, v, repr(topology.lengths[(u, v)])])


def export(stream: RoadStream, out_dir) -> None:
    """Write ``nodes.csv``, ``edges.csv`` and ``readings.csv`` for a static stream.

    Every (node, bucket) gets a row; MISSING readings have an empty value.
    """
    if not stream.is_static():
        raise GraphError("export supports shared-topology streams only")
    topo = stream[0].topology
    write_topology(topo, out_dir)
    with open(Path(out_dir) / "readings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "timestamp", "value"])
        for s in stream:
            for v, x, p in zip(topo.node_ids, s.values, s.present):
                w.writerow([v, s.timestamp, repr(float(x)) if p else ""])


def bucketize(raw_csv, out_csv, spec: BucketSpec) -> int:
    """Re-key raw ``node_id,timestamp,value`` records (timestamps in seconds) to buckets."""
    sums: dict[tuple[str, int], float] = {}
    touched: set[tuple[str, int]] = set()
    for lineno, (v, ts, val) in _rows(raw_csv, ["node_id", "timestamp", "value"]):
        try:
            key = (v, spec.bucket(float(ts)))
            touched.add(key)
            if val != "":
                sums[key] = sums.get(key, 0.0) + float(val)
        except ValueError:
            raise DataError(f"{Path(raw_csv).name}:{lineno}: bad row") from None
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "timestamp", "value"])
        for v, t in sorted(touched, key=lambda k: (k[1], k[0])):
            x = sums.get((v, t))
            w.writerow([v, t, "" if x is None else repr(x)])
    return len(touched)


# ---------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    """Trip-simulation settings.

    Demand follows a two-peak daily profile
    ``base * (1 + a sin(2 pi tod) + b sin(4 pi tod))`` modulated by a per-day
    level and slow AR(1) fluctuations, globally and per origin/destination
    node.  ``num_trips`` fixes the total trip count exactly; otherwise each
    bucket draws a Poisson number of trips with mean ``trips_per_bucket``
    times the modulated profile.
    """
    num_nodes: int = 60
    graph_model: str = "grid"          # grid | er | path
    num_days: int = 7
    bucket_minutes: int = 5
    trips_per_bucket: float = 1000.0
    num_trips: int | None = None
    tidal_a: float = 0.6
    tidal_b: float = 0.3
    popularity_sigma: float = 0.5
    day_sigma: float = 0.2
    drift_sigma: float = 0.3
    node_drift_sigma: float = 0.15
    drift_buckets: float = 48.0
    one_way_fraction: float = 0.15
    arterial_every: int = 3
    arterial_speedup: float = 3.0
    diagonal_prob: float = 0.3
    # publish routing travel cost as edge length, so fast corridors are visible in the network
    travel_time_lengths: bool = True
    seed: int = 0
    max_retries: int = 50

    @property
    def buckets_per_day(self) -> int:
        return (24 * 60) // self.bucket_minutes

    @property
    def num_buckets(self) -> int:
        return self.num_days * self.buckets_per_day


@dataclass
class SyntheticData:
    stream: RoadStream           # ground truth, every reading present
    topology: Topology
    edge_flow: np.ndarray        # total trips over each edge, aligned with topology.edges
    popularity: np.ndarray


def _strongly_connected(n: int, src: np.ndarray, dst: np.ndarray) -> bool:
    from scipy.sparse.csgraph import connected_components
    a = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    k, _ = connected_components(a, directed=True, connection="strong")
    return k == 1


def _grid_shape(n: int) -> tuple[int, int]:
    rows = max(1, int(math.floor(math.sqrt(n))))
    return rows, int(math.ceil(n / rows))


def _grid_topology(n: int, rng: np.random.Generator, spec: SyntheticSpec) -> Topology:
    rows, cols = _grid_shape(n)
    lat0, lon0, step = 30.60, 104.00, 0.005
    pos = {}
    for k in range(n):
        r, c = divmod(k, cols)
        pos[k] = (r, c)
    coords = {f"n{k}": (lat0 + r * step + rng.normal(0, step * 0.15),
                        lon0 + c * step + rng.normal(0, step * 0.15)) for k, (r, c) in pos.items()}
    cell = {v: k for k, v in pos.items()}
    pairs = []
    for k, (r, c) in pos.items():
        for dr, dc in ((0, 1), (1, 0)):
            j = cell.get((r + dr, c + dc))
            if j is not None:
                pairs.append((k, j))
        for dr, dc in ((1, 1), (1, -1)):
            j = cell.get((r + dr, c + dc))
            if j is not None and rng.random() < spec.diagonal_prob:
                pairs.append((k, j))
    edges = []
    for a, b in pairs:
        if rng.random() < spec.one_way_fraction:
            edges.append((a, b) if rng.random() < 0.5 else (b, a))
        else:
            edges += [(a, b), (b, a)]
    return Topology([f"n{k}" for k in range(n)], [(f"n{a}", f"n{b}") for a, b in edges],
                    coords=coords)


def _er_topology(n: int, rng: np.random.Generator) -> Topology:
    p = min(1.0, 2.5 * math.log(max(n, 2)) / max(n, 2))
    lat0, lon0, span = 30.60, 104.00, 0.05
    coords = {f"n{k}": (lat0 + rng.random() * span, lon0 + rng.random() * span) for k in range(n)}
    mask = rng.random((n, n)) < p
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return Topology([f"n{k}" for k in range(n)],
                    [(f"n{a}", f"n{b}") for a, b in zip(src, dst)], coords=coords)


def _path_topology(n: int) -> Topology:
    coords = {f"n{k}": (30.60, 104.00 + 0.005 * k) for k in range(n)}
    edges = [(f"n{k}", f"n{k + 1}") for k in range(n - 1)] + \
            [(f"n{k + 1}", f"n{k}") for k in range(n - 1)]
    return Topology([f"n{k}" for k in range(n)], edges, coords=coords)


def make_topology(spec: SyntheticSpec, rng: np.random.Generator) -> Topology:
    for _ in range(spec.max_retries):
        if spec.graph_model == "grid":
            topo = _grid_topology(spec.num_nodes, rng, spec)
        elif spec.graph_model == "er":
            topo = _er_topology(spec.num_nodes, rng)
        elif spec.graph_model == "path":
            topo = _path_topology(spec.num_nodes)
        else:
            raise ValueError(f"unknown graph model {spec.graph_model!r}")
        if _strongly_connected(topo.num_nodes, topo.src, topo.dst):
            return topo
    raise GraphError(f"no strongly connected {spec.graph_model} graph after {spec.max_retries} tries")


def travel_cost(topology: Topology, spec: SyntheticSpec) -> np.ndarray:
    """Per-edge travel time in km at unit speed; arterial grid lines are faster.

    Arterials are every ``arterial_every``-th grid row and column, which is
    what concentrates flow onto a few corridors.
    """
    cost = topology.length_array.copy()
    if spec.graph_model != "grid" or spec.arterial_every < 1:
        return cost
    _, cols = _grid_shape(topology.num_nodes)
    r_s, c_s = np.divmod(topology.src, cols)
    r_d, c_d = np.divmod(topology.dst, cols)
    fast = ((r_s == r_d) & (r_s % spec.arterial_every == 0)) | \
           ((c_s == c_d) & (c_s % spec.arterial_every == 0))
    cost[fast] /= spec.arterial_speedup
    return cost


def route_incidence(topology: Topology, cost: np.ndarray | None = None):
    """Shortest-path node and edge incidence for every ordered pair (o, d), o != d.

    Routes minimize ``cost`` (default: edge length).  Returns
    ``(pairs, node_inc, edge_inc)`` where row ``p`` of the sparse incidence
    matrices marks the nodes (including both ends) and edges on the route of
    ``pairs[p]``.
    """
    n = topology.num_nodes
    cost = topology.length_array if cost is None else cost
    w = sp.csr_matrix((cost, (topology.src, topology.dst)), shape=(n, n))
    dist, pred = shortest_path(w, method="D", directed=True, return_predecessors=True)
    edge_id = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(topology.src, topology.dst))}
    pairs, n_rows, n_cols, e_rows, e_cols = [], [], [], [], []
    for o in range(n):
        for d in range(n):
            if o == d or not np.isfinite(dist[o, d]):
                continue
            p = len(pairs)
            pairs.append((o, d))
            v = d
            n_rows.append(p)
            n_cols.append(v)
            while v != o:
                u = pred[o, v]
                n_rows.append(p)
                n_cols.append(u)
                e_rows.append(p)
                e_cols.append(edge_id[(int(u), int(v))])
                v = u
    P = len(pairs)
    node_inc = sp.csr_matrix((np.ones(len(n_rows)), (n_rows, n_cols)), shape=(P, n))
    edge_inc = sp.csr_matrix((np.ones(len(e_rows)), (e_rows, e_cols)), shape=(P, topology.num_edges))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2), node_inc, edge_inc


def tidal_profile(tod: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.maximum(0.0, 1.0 + a * np.sin(2 * np.pi * tod) + b * np.sin(4 * np.pi * tod))


def _ar1(rng, T: int, width: int, sigma: float, tau: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros((T, width))
    rho = math.exp(-1.0 / max(tau, 1e-9))
    eps = rng.normal(0.0, sigma * math.sqrt(1 - rho ** 2), size=(T, width))
    out = np.empty((T, width))
    out[0] = rng.normal(0.0, sigma, size=width)
    for t in range(1, T):
        out[t] = rho * out[t - 1] + eps[t]
    return out


def simulate_trips(topology: Topology, spec: SyntheticSpec, rng: np.random.Generator,
                   num_buckets: int | None = None, cost: np.ndarray | None = None):
    """Per-bucket node transit counts (T, n), per-edge totals, and node popularity."""
    n = topology.num_nodes
    T = num_buckets if num_buckets is not None else spec.num_buckets
    bpd = spec.buckets_per_day
    if cost is None:
        cost = travel_cost(topology, spec)
    pairs, node_inc, edge_inc = route_incidence(topology, cost)
    popularity = rng.lognormal(0.0, spec.popularity_sigma, size=n)
    tod = (np.arange(T) % bpd) / bpd
    day = np.arange(T) // bpd
    day_level = rng.normal(0.0, spec.day_sigma, size=int(day.max()) + 1 if T else 1)
    glob = _ar1(rng, T, 1, spec.drift_sigma, spec.drift_buckets)[:, 0]
    node_drift = _ar1(rng, T, n, spec.node_drift_sigma, spec.drift_buckets)
    rate = spec.trips_per_bucket * tidal_profile(tod, spec.tidal_a, spec.tidal_b) \
        * np.exp(day_level[day] + glob)
    if spec.num_trips is not None:
        total = rate.sum()
        probs = rate / total if total > 0 else np.full(T, 1.0 / max(T, 1))
        per_bucket = rng.multinomial(spec.num_trips, probs) if T else np.zeros(0, dtype=int)
    else:
        per_bucket = rng.poisson(rate)
    weights = popularity[None, :] * np.exp(node_drift)          # (T, n)
    o, d = pairs[:, 0], pairs[:, 1]
    pair_counts = np.zeros((T, len(pairs)))
    for t in range(T):
        if per_bucket[t] == 0 or len(pairs) == 0:
            continue
        pw = weights[t, o] * weights[t, d]
        pair_counts[t] = rng.multinomial(per_bucket[t], pw / pw.sum())
    counts = np.asarray(node_inc.T @ pair_counts.T).T
    edge_flow = np.asarray(edge_inc.T @ pair_counts.sum(axis=0)).ravel()
    return counts, edge_flow, popularity


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Ground-truth stream of node transit counts from simulated shortest-path trips."""
    rng = np.random.default_rng(spec.seed)
    topo = make_topology(spec, rng)
    cost = travel_cost(topo, spec)
    if spec.travel_time_lengths:
        topo = Topology(topo.node_ids, topo.edges, cost.tolist(), topo.coords)
    counts, edge_flow, pop = simulate_trips(topo, spec, rng, cost=cost)
    T = counts.shape[0]
    stream = stream_from_arrays(topo, np.rint(counts), np.ones_like(counts, dtype=bool),
                                range(T))
    return SyntheticData(stream, topo, edge_flow, pop)


def gini(x: np.ndarray) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2 * (ranks * x).sum()) / (n * x.sum()) - (n + 1) / n)


def top_share(x: np.ndarray, frac: float = 0.1) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))[::-1]
    k = max(1, int(math.ceil(frac * len(x))))
    return float(x[:k].sum() / x.sum()) if x.sum() > 0 else 0.0


# ------------------------------------------------------------ perturbation

@dataclass(frozen=True)
class PerturbSpec:
    x: float = 10.0                   # total perturbation percent
    threshold_km: float | None = None # default: 2 x median edge length
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.x <= 100:
            raise ValueError("perturbation percent must be within [0, 100]")


@dataclass(frozen=True)
class PerturbPlan:
    dropped: tuple[tuple[str, str], ...]
    added: tuple[tuple[str, str, float], ...]
    requested: int

    def apply(self, topology: Topology) -> Topology:
        drop = set(self.dropped)
        edges = [e for e in topology.edges if e not in drop]
        lengths = {e: topology.lengths[e] for e in edges}
        for u, v, x in self.added:
            if u in topology.index and v in topology.index and (u, v) not in lengths:
                edges.append((u, v))
                lengths[(u, v)] = x
        return Topology(topology.node_ids, edges, lengths, topology.coords)


def plan_perturbation(topology: Topology, spec: PerturbSpec) -> PerturbPlan:
    """Choose edges to drop and an equal number of short new edges to add."""
    if topology.coords is None:
        raise GraphError("perturbation needs node coordinates")
    E = topology.num_edges
    k = int(math.floor(spec.x / 2.0 / 100.0 * E + 1e-9))
    if spec.x > 0 and k < 1:
        raise ValueError(f"{spec.x}% of {E} edges rounds to zero changes")
    rng = np.random.default_rng(spec.seed)
    drop_idx = rng.choice(E, size=k, replace=False) if k else np.zeros(0, dtype=int)
    dropped = tuple(topology.edges[i] for i in sorted(drop_idx))
    threshold = spec.threshold_km
    if threshold is None:
        threshold = 2.0 * float(np.median(topology.length_array))
    linked = {frozenset(e) for e in topology.edges}
    ids = topology.node_ids
    cands = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if frozenset((ids[i], ids[j])) in linked:
                continue
            if haversine(topology.coords[ids[i]], topology.coords[ids[j]]) <= threshold:
                cands.append((ids[i], ids[j]))
    n_add = min(k, len(cands))
    if n_add < k:
        warnings.warn(f"only {n_add} candidate pairs within {threshold:.3f} km; "
                      f"adding {n_add} of {k} edges")
    pick = rng.choice(len(cands), size=n_add, replace=False) if n_add else np.zeros(0, dtype=int)
    lengths = rng.choice(topology.length_array, size=n_add, replace=True)
    flips = rng.random(n_add) < 0.5
    added = []
    for c, x, f in zip(pick, lengths, flips):
        u, v = cands[c]
        added.append((v, u, float(x)) if f else (u, v, float(x)))
    return PerturbPlan(dropped, tuple(added), k)


def perturb_topology(stream: RoadStream, spec: PerturbSpec) -> RoadStream:
    """Apply one fixed drop/add perturbation to every snapshot."""
    if spec.x == 0:
        return stream
    plan = plan_perturbation(stream[0].topology, spec)
    log.info("perturbation: dropped %d, added %d edges", len(plan.dropped), len(plan.added))
    cache: dict[int, Topology] = {}

    def fn(s: RoadSnapshot) -> RoadSnapshot:
        key = id(s.topology)
        if key not in cache:
            cache[key] = plan.apply(s.topology)
        return RoadSnapshot(cache[key], s.timestamp, values=s.values, present=s.present)

    return stream.map(fn)


def drop_snapshots(window: Sequence[RoadSnapshot] | RoadStream, fraction: float,
                   seed: int = 0) -> list[RoadSnapshot]:
    """Remove ``floor(fraction * len(window))`` snapshots chosen uniformly at random."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    snaps = list(window)
    k = int(math.floor(fraction * len(snaps) + 1e-9))
    if k >= len(snaps):
        raise ValueError("every snapshot would be dropped")
    if k == 0:
        return snaps
    rng = np.random.default_rng(seed)
    gone = set(rng.choice(len(snaps), size=k, replace=False).tolist())
    return [s for i, s in enumerate(snaps) if i not in gone]
