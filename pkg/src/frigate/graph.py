"""Road-network snapshots and streams.

A :class:`Topology` holds the structural part of a snapshot (nodes, directed
edges, edge lengths, optional coordinates).  A :class:`RoadSnapshot` pairs a
topology with one timestamp of sensor readings.  Consecutive snapshots usually
share the same ``Topology`` object, which lets downstream code cache anything
that depends on structure only (positional embeddings, gate inputs).
"""
from __future__ import annotations

import math
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0


class _Missing:
    """Marker for an absent sensor reading."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MISSING"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


class GraphError(ValueError):
    """Raised for malformed graph data."""


class EmptyWindowError(ValueError):
    """Raised when a time slice selects no snapshots."""


def haversine(p1: Sequence[float], p2: Sequence[float]) -> float:
    """Great-circle distance in kilometres between two ``(lat, lon)`` points in degrees."""
    for lat, lon in (p1, p2):
        if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
            raise GraphError(f"coordinate out of range: ({lat}, {lon})")
    lat1, lon1 = map(math.radians, p1)
    lat2, lon2 = map(math.radians, p2)
    a = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


class Topology:
    """Immutable directed road graph.

    Node ids are opaque strings.  Their order in ``node_ids`` defines the dense
    index used by every numeric kernel; permuting that order must not change
    any model output.
    """

    __slots__ = ("node_ids", "edges", "lengths", "coords", "index",
                 "src", "dst", "length_array", "_key")

    def __init__(self, node_ids: Iterable[str], edges: Iterable[tuple[str, str]],
                 lengths: Mapping[tuple[str, str], float] | Sequence[float] | None = None,
                 coords: Mapping[str, tuple[float, float]] | None = None):
        node_ids = tuple(str(v) for v in node_ids)
        index = {v: i for i, v in enumerate(node_ids)}
        if len(index) != len(node_ids):
            raise GraphError("duplicate node ids")
        edges = tuple((str(u), str(v)) for u, v in edges)
        if len(set(edges)) != len(edges):
            raise GraphError("duplicate edges")
        for u, v in edges:
            if u not in index or v not in index:
                raise GraphError(f"edge ({u}, {v}) has an endpoint outside the node set")
            if u == v:
                raise GraphError(f"self loop on {u}")
        if coords is not None:
            coords = {str(k): (float(c[0]), float(c[1])) for k, c in coords.items()}
            missing = [v for v in node_ids if v not in coords]
            if missing:
                raise GraphError(f"no coordinates for nodes {missing[:5]}")
        if lengths is None:
            if coords is None:
                raise GraphError("edge lengths require either explicit values or coordinates")
            vals = [haversine(coords[u], coords[v]) for u, v in edges]
        elif isinstance(lengths, Mapping):
            vals = []
            for e in edges:
                if e in lengths:
                    vals.append(float(lengths[e]))
                elif coords is not None:
                    vals.append(haversine(coords[e[0]], coords[e[1]]))
                else:
                    raise GraphError(f"no length for edge {e}")
        else:
            vals = [float(x) for x in lengths]
            if len(vals) != len(edges):
                raise GraphError("lengths and edges differ in size")
        for e, x in zip(edges, vals):
            if not (math.isfinite(x) and x > 0):
                raise GraphError(f"edge {e} has non-positive or non-finite length {x}")

        self.node_ids = node_ids
        self.edges = edges
        self.lengths = dict(zip(edges, vals))
        self.coords = coords
        self.index = index
        self.src = np.array([index[u] for u, _ in edges], dtype=np.int64)
        self.dst = np.array([index[v] for _, v in edges], dtype=np.int64)
        self.length_array = np.array(vals, dtype=np.float64)
        self._key = None

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def key(self) -> tuple:
        """Hashable structural identity, independent of node ordering."""
        if self._key is None:
            self._key = (frozenset(self.node_ids),
                         frozenset((u, v, self.lengths[(u, v)]) for u, v in self.edges))
        return self._key

    def neighbors_out(self, v: str) -> set[str]:
        i = self._lookup(v)
        return {self.node_ids[j] for j in self.dst[self.src == i]}

    def neighbors_in(self, v: str) -> set[str]:
        i = self._lookup(v)
        return {self.node_ids[j] for j in self.src[self.dst == i]}

    def _lookup(self, v: str) -> int:
        try:
            return self.index[v]
        except KeyError:
            raise KeyError(f"unknown node {v!r}") from None

    def permuted(self, order: Sequence[str]) -> "Topology":
        """Same graph with nodes (and edges) listed in a different order."""
        if sorted(order) != sorted(self.node_ids):
            raise GraphError("order must be a permutation of the node ids")
        rank = {v: i for i, v in enumerate(order)}
        edges = sorted(self.edges, key=lambda e: (rank[e[0]], rank[e[1]]))
        return Topology(order, edges, {e: self.lengths[e] for e in edges}, self.coords)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        a[self.src, self.dst] = True
        return a

    def __eq__(self, other) -> bool:
        return isinstance(other, Topology) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        return f"Topology(nodes={self.num_nodes}, edges={self.num_edges})"


class RoadSnapshot:
    """A topology plus one timestamp of per-node readings.

    ``readings`` may be a mapping from node id to a float or :data:`MISSING`;
    nodes absent from the mapping are MISSING.  Internally the readings live in
    two aligned arrays, ``values`` (0.0 where missing) and ``present``.
    """

    __slots__ = ("topology", "timestamp", "values", "present")

    def __init__(self, topology: Topology, timestamp: int,
                 readings: Mapping[str, float] | None = None, *,
                 values: np.ndarray | None = None, present: np.ndarray | None = None):
        self.topology = topology
        self.timestamp = int(timestamp)
        n = topology.num_nodes
        if values is not None:
            values = np.asarray(values, dtype=np.float64)
            present = np.asarray(present, dtype=bool)
            if values.shape != (n,) or present.shape != (n,):
                raise GraphError("values/present must have one entry per node")
            values = np.where(present, values, 0.0)
        else:
            values = np.zeros(n)
            present = np.zeros(n, dtype=bool)
            for v, x in (readings or {}).items():
                if v not in topology.index:
                    raise GraphError(f"reading for unknown node {v!r}")
                if x is MISSING or x is None:
                    continue
                i = topology.index[v]
                values[i] = float(x)
                present[i] = True
        values.flags.writeable = False
        present.flags.writeable = False
        self.values = values
        self.present = present

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self.topology.node_ids

    @property
    def edges(self):
        return self.topology.edges

    @property
    def readings(self) -> dict:
        return {v: (float(x) if p else MISSING)
                for v, x, p in zip(self.topology.node_ids, self.values, self.present)}

    def reading(self, v: str):
        i = self.topology._lookup(v)
        return float(self.values[i]) if self.present[i] else MISSING

    def neighbors_out(self, v: str) -> set[str]:
        return self.topology.neighbors_out(v)

    def neighbors_in(self, v: str) -> set[str]:
        return self.topology.neighbors_in(v)

    def with_readings(self, values: np.ndarray, present: np.ndarray) -> "RoadSnapshot":
        return RoadSnapshot(self.topology, self.timestamp, values=values, present=present)

    def with_topology(self, topology: Topology) -> "RoadSnapshot":
        """Re-attach readings (by node id) to another topology over the same node set."""
        order = np.array([self.topology.index[v] for v in topology.node_ids])
        return RoadSnapshot(topology, self.timestamp,
                            values=self.values[order], present=self.present[order])

    def __repr__(self) -> str:
        return (f"RoadSnapshot(t={self.timestamp}, nodes={self.topology.num_nodes}, "
                f"sensed={int(self.present.sum())})")


class RoadStream(Sequence):
    """Chronologically ordered snapshots."""

    def __init__(self, snapshots: Iterable[RoadSnapshot], horizon: int = 12):
        snapshots = tuple(snapshots)
        ts = [s.timestamp for s in snapshots]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise GraphError("snapshot timestamps must be strictly increasing")
        if horizon < 1:
            raise GraphError("horizon must be positive")
        self.snapshots = snapshots
        self.horizon = int(horizon)
        self._pos = {t: i for i, t in enumerate(ts)}

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return RoadStream(self.snapshots[i], self.horizon)
        return self.snapshots[i]

    def __iter__(self) -> Iterator[RoadSnapshot]:
        return iter(self.snapshots)

    @property
    def timestamps(self) -> list[int]:
        return [s.timestamp for s in self.snapshots]

    def at(self, t: int) -> RoadSnapshot:
        try:
            return self.snapshots[self._pos[t]]
        except KeyError:
            raise KeyError(f"no snapshot at t={t}") from None

    def has(self, t: int) -> bool:
        return t in self._pos

    def slice(self, t_lo: int, t_hi: int) -> "RoadStream":
        """Snapshots with ``t_lo <= t <= t_hi``."""
        if t_lo > t_hi:
            raise ValueError(f"t_lo={t_lo} > t_hi={t_hi}")
        out = [s for s in self.snapshots if t_lo <= s.timestamp <= t_hi]
        if not out:
            raise EmptyWindowError(f"no snapshots in [{t_lo}, {t_hi}]")
        return RoadStream(out, self.horizon)

    def map(self, fn) -> "RoadStream":
        return RoadStream((fn(s) for s in self.snapshots), self.horizon)

    def is_static(self) -> bool:
        """True when every snapshot shares one topology object."""
        return all(s.topology is self.snapshots[0].topology for s in self.snapshots)

    def value_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """``(values, present)`` arrays of shape (T, n) for a static stream."""
        if not self.is_static():
            raise GraphError("value_matrix requires a shared topology")
        return (np.stack([s.values for s in self.snapshots]),
                np.stack([s.present for s in self.snapshots]))

    def __repr__(self) -> str:
        if not self.snapshots:
            return "RoadStream([])"
        return (f"RoadStream(T={len(self)}, t=[{self.snapshots[0].timestamp}, "
                f"{self.snapshots[-1].timestamp}], horizon={self.horizon})")


def neighbors_out(snapshot: RoadSnapshot, v: str) -> set[str]:
    return snapshot.neighbors_out(v)


def neighbors_in(snapshot: RoadSnapshot, v: str) -> set[str]:
    return snapshot.neighbors_in(v)


def slice_stream(stream: RoadStream, t_lo: int, t_hi: int) -> RoadStream:
    return stream.slice(t_lo, t_hi)


def stream_from_arrays(topology: Topology, values: np.ndarray, present: np.ndarray,
                       timestamps: Sequence[int] | None = None, horizon: int = 12) -> RoadStream:
    """Build a static-topology stream from (T, n) arrays."""
    values = np.asarray(values, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if timestamps is None:
        timestamps = range(values.shape[0])
    return RoadStream((RoadSnapshot(topology, t, values=v, present=p)
                       for t, v, p in zip(timestamps, values, present)), horizon)


def permute_stream(stream: RoadStream, order: Sequence[str]) -> RoadStream:
    """Relabel node order in every snapshot; topology objects stay shared."""
    cache: dict[int, Topology] = {}

    def fn(s: RoadSnapshot) -> RoadSnapshot:
        key = id(s.topology)
        if key not in cache:
            cache[key] = s.topology.permuted(order)
        return s.with_topology(cache[key])

    return stream.map(fn)
