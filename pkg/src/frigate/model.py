"""Encoder/decoder over per-snapshot GNN outputs, plus the neighbourhood-moments prior.

The encoder runs one shared LSTM cell over the node's GNN states, one step per
input snapshot.  The decoder is a second LSTM cell that feeds its own previous
prediction back in.  Both prediction heads see a projection of the moments of
the observed readings around the target node.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from .gnn import GatedGNN, GnnConfig, GraphTensors, gnn_parameter_count
from .graph import RoadSnapshot, RoadStream, Topology
from .positional import AnchorSet, PositionalEncoder

NUM_TIME_FEATURES = 4


@dataclass
class FrigateConfig:
    horizon: int = 12
    gnn: GnnConfig = field(default_factory=GnnConfig)
    enc_hidden: int = 64
    dec_hidden: int = 64
    mlp_hidden: int = 64
    d_moments: int = 16
    num_moments: int = 4
    no_moments: bool = False
    normalize_positions: bool = True
    buckets_per_day: int = 288
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.gnn, dict):
            self.gnn = GnnConfig(**self.gnn)
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.enc_hidden != self.dec_hidden:
            raise ValueError("encoder and decoder state widths must match "
                             "(the decoder starts from the final encoder state)")
        if not 1 <= self.num_moments <= 4:
            raise ValueError("num_moments must be between 1 and 4")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrigateConfig":
        return cls(**d)


def mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.ReLU(), nn.Linear(hidden, n_out))


def lstm_cell(n_in: int, hidden: int) -> nn.LSTMCell:
    cell = nn.LSTMCell(n_in, hidden)
    with torch.no_grad():
        cell.bias_ih[hidden:2 * hidden].fill_(1.0)
        cell.bias_hh[hidden:2 * hidden].zero_()
    return cell


def time_features(t, buckets_per_day: int) -> np.ndarray:
    """sin/cos of time-of-day and day-of-week phase for bucket indices ``t``."""
    t = np.asarray(t, dtype=np.float64)
    tod = np.mod(t, buckets_per_day) / buckets_per_day
    dow = np.mod(np.floor(t / buckets_per_day), 7) / 7.0
    return np.stack([np.sin(2 * np.pi * tod), np.cos(2 * np.pi * tod),
                     np.sin(2 * np.pi * dow), np.cos(2 * np.pi * dow)], axis=-1)


def moments_from_power_sums(s: np.ndarray) -> np.ndarray:
    """(..., 5) power sums (count, sum x, ..., sum x^4) -> (mean, std, skew, excess kurtosis).

    Empty sets give zeros; zero variance gives zero skew and kurtosis.
    """
    s = np.asarray(s, dtype=np.float64)
    cnt = s[..., 0]
    out = np.zeros(s.shape[:-1] + (4,))
    ok = cnt > 0
    if not ok.any():
        return out
    c = cnt[ok]
    e1, e2, e3, e4 = (s[ok, k] / c for k in range(1, 5))
    mu = e1
    m2 = np.maximum(e2 - mu ** 2, 0.0)
    m3 = e3 - 3 * mu * e2 + 2 * mu ** 3
    m4 = e4 - 4 * mu * e3 + 6 * mu ** 2 * e2 - 3 * mu ** 4
    scale = np.maximum(1.0, e2)
    flat = m2 <= 1e-12 * scale
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe ** 1.5)
    kurt = np.where(flat, 0.0, m4 / safe ** 2 - 3.0)
    res = np.stack([mu, np.sqrt(np.where(flat, 0.0, m2)), skew, kurt], axis=-1)
    out[ok] = res
    return out


def neighbor_matrix(topology: Topology) -> sp.csr_matrix:
    """Symmetric 0/1 matrix: ``A[v, u] = 1`` if ``(u, v)`` or ``(v, u)`` is an edge."""
    n = topology.num_nodes
    rows = np.concatenate([topology.src, topology.dst])
    cols = np.concatenate([topology.dst, topology.src])
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a.data[:] = 1.0
    return a


def window_power_sums(topology: Topology, values: np.ndarray, present: np.ndarray,
                      a: sp.csr_matrix | None = None) -> np.ndarray:
    """Per-node power sums of neighbour readings; ``values``/``present`` are (S, n)."""
    if a is None:
        a = neighbor_matrix(topology)
    x = np.where(present, values, 0.0)
    p = present.astype(np.float64)
    sums = [p, x, x ** 2, x ** 3, x ** 4]
    out = np.stack([(a @ s.T).T for s in sums], axis=-1)  # (S, n, 5)
    return out


def moments(stream: RoadStream, v: str, t: int, window: int) -> np.ndarray:
    """Raw moments of observed in/out-neighbour readings of ``v`` over ``[t-window+1, t]``.

    Neighbour sets are re-derived in each snapshot and ``v`` itself is excluded.
    """
    acc = np.zeros(5)
    for snap in stream.slice(t - window + 1, t):
        topo = snap.topology
        if v not in topo.index:
            continue
        nb = topo.neighbors_out(v) | topo.neighbors_in(v)
        for u in nb:
            i = topo.index[u]
            if snap.present[i]:
                x = snap.values[i]
                acc += [1.0, x, x ** 2, x ** 3, x ** 4]
    return moments_from_power_sums(acc)


class Frigate(nn.Module):
    """Siamese GNN/LSTM encoder, LSTM decoder and moment-conditioned heads."""

    def __init__(self, cfg: FrigateConfig, anchors: AnchorSet, value_scale: float = 1.0):
        super().__init__()
        if len(anchors) != cfg.gnn.d_pos:
            raise ValueError(f"{len(anchors)} anchors but d_pos={cfg.gnn.d_pos}")
        self.cfg = cfg
        self.anchors = anchors
        self.value_scale = float(value_scale)
        d = cfg.gnn.d
        H = cfg.enc_hidden
        dm = 0 if cfg.no_moments else cfg.d_moments
        self.gnn = GatedGNN(cfg.gnn)
        self.enc = lstm_cell(d, H)
        self.dec = lstm_cell(1, H)
        self.mlp1 = mlp(NUM_TIME_FEATURES + d, cfg.mlp_hidden, 2 * H)
        self.mlp2 = mlp(H + dm, cfg.mlp_hidden, 1)
        if not cfg.no_moments:
            self.mlp3 = mlp(cfg.num_moments, cfg.mlp_hidden, dm)
        self.mlp4 = mlp(H + dm, cfg.mlp_hidden, 1)
        self.to(cfg.torch_dtype)
        self.encoder = PositionalEncoder(anchors, normalize=cfg.normalize_positions)
        self._graphs: dict = {}

    # -- graph plumbing -------------------------------------------------

    def graph_tensors(self, topology: Topology) -> GraphTensors:
        key = id(topology)
        hit = self._graphs.get(key)
        if hit is None or hit.topology is not topology:
            hit = GraphTensors(topology, self.encoder(topology), dtype=self.cfg.torch_dtype)
            hit.neighbors = neighbor_matrix(topology)
            if len(self._graphs) > 64:
                self._graphs.clear()
            self._graphs[key] = hit
        return hit

    # -- components -----------------------------------------------------

    def encode(self, z: torch.Tensor, tfeat: torch.Tensor):
        """``z`` (P, K, d) -> final encoder (hidden, cell)."""
        if z.shape[1] < 1:
            raise ValueError("encoder needs at least one step")
        H = self.cfg.enc_hidden
        init = self.mlp1(torch.cat([tfeat, z[:, 0]], dim=-1))
        state = (init[:, :H], init[:, H:])
        for k in range(z.shape[1]):
            state = self.enc(z[:, k], state)
        return state

    def project_moments(self, raw: torch.Tensor) -> torch.Tensor | None:
        if self.cfg.no_moments:
            return None
        x = raw[:, :self.cfg.num_moments].clone()
        x[:, :2] = x[:, :2] / self.value_scale
        return self.mlp3(x)

    def decode(self, state, m: torch.Tensor | None, horizon: int | None = None) -> torch.Tensor:
        """Autoregressive forecast (P, horizon) in scaled units."""
        horizon = horizon or self.cfg.horizon
        h, c = state

        def head(net, hid):
            inp = hid if m is None else torch.cat([hid, m], dim=-1)
            return net(inp)

        y = head(self.mlp2, h)
        outs = []
        for _ in range(horizon):
            h, c = self.dec(y, (h, c))
            y = head(self.mlp4, h)
            outs.append(y)
        return torch.cat(outs, dim=-1)

    def tail(self, z: torch.Tensor, raw_moments: torch.Tensor, times: np.ndarray) -> torch.Tensor:
        dt = self.cfg.torch_dtype
        tfeat = torch.as_tensor(time_features(times, self.cfg.buckets_per_day), dtype=dt)
        state = self.encode(z, tfeat)
        m = self.project_moments(raw_moments)
        return self.decode(state, m) * self.value_scale

    # -- batched entry points ------------------------------------------

    def forward_static(self, topology: Topology, values: np.ndarray, present: np.ndarray,
                       times: np.ndarray, pair_b: np.ndarray, pair_v: np.ndarray) -> torch.Tensor:
        """Forecasts for (window, node) pairs over one shared topology.

        ``values``/``present`` are (B, K, n) raw readings of B windows; ``times``
        (B,) is each window's current bucket; pair ``p`` asks for node index
        ``pair_v[p]`` in window ``pair_b[p]``.  Returns (P, horizon) raw units.
        """
        dt = self.cfg.torch_dtype
        B, K, n = values.shape
        graph = self.graph_tensors(topology)
        x = np.where(present, values, 0.0) / self.value_scale
        z = self.gnn(graph, torch.as_tensor(x.reshape(B * K, n), dtype=dt))
        z = z.view(B, K, n, -1)
        pb = torch.as_tensor(pair_b, dtype=torch.long)
        pv = torch.as_tensor(pair_v, dtype=torch.long)
        zp = z[pb, :, pv]  # (P, K, d)
        sums = window_power_sums(topology, values.reshape(B * K, n), present.reshape(B * K, n),
                                 graph.neighbors).reshape(B, K, n, 5).sum(axis=1)
        raw = moments_from_power_sums(sums[pair_b, pair_v])
        return self.tail(zp, torch.as_tensor(raw, dtype=dt), np.asarray(times)[pair_b])

    def forecast(self, windows: Sequence[Sequence[RoadSnapshot]], targets: Sequence[Sequence[str]],
                 times: Sequence[int] | None = None) -> list[np.ndarray]:
        """Forecast arrays (one (len(targets[b]), horizon) array per window).

        Windows may have different topologies per snapshot but must all have
        the same length.  A target missing from some snapshot contributes a
        zero state at that step.
        """
        windows = [list(w) for w in windows]
        if not windows:
            return []
        K = len(windows[0])
        if K == 0 or any(len(w) != K for w in windows):
            raise ValueError("windows must be non-empty and of equal length")
        if times is None:
            times = [w[-1].timestamp for w in windows]
        for w, tg in zip(windows, targets):
            for v in tg:
                if v not in w[-1].topology.index:
                    raise KeyError(f"target {v!r} absent from the current snapshot")
        topo0 = windows[0][0].topology
        static = all(s.topology is topo0 for w in windows for s in w)
        pair_b = np.array([b for b, tg in enumerate(targets) for _ in tg], dtype=np.int64)
        if static:
            vals = np.stack([[s.values for s in w] for w in windows])
            pres = np.stack([[s.present for s in w] for w in windows])
            pair_v = np.array([topo0.index[v] for tg in targets for v in tg], dtype=np.int64)
            out = self.forward_static(topo0, vals, pres, np.asarray(times), pair_b, pair_v)
        else:
            out = self._forward_dynamic(windows, targets, np.asarray(times), pair_b)
        out = out.detach().cpu().numpy()
        res, i = [], 0
        for tg in targets:
            res.append(out[i:i + len(tg)])
            i += len(tg)
        return res

    def _forward_dynamic(self, windows, targets, times, pair_b) -> torch.Tensor:
        dt = self.cfg.torch_dtype
        d = self.cfg.gnn.d
        K = len(windows[0])
        groups: dict[int, list] = {}
        for b, w in enumerate(windows):
            for k, s in enumerate(w):
                groups.setdefault(id(s.topology), []).append((b, k, s))
        flat, offsets = [], {}
        sums_of = {}
        base = 0
        for key, items in groups.items():
            topo = items[0][2].topology
            graph = self.graph_tensors(topo)
            vals = np.stack([s.values for _, _, s in items])
            pres = np.stack([s.present for _, _, s in items])
            x = np.where(pres, vals, 0.0) / self.value_scale
            z = self.gnn(graph, torch.as_tensor(x, dtype=dt))
            flat.append(z.reshape(-1, d))
            ps = window_power_sums(topo, vals, pres, graph.neighbors)
            for r, (b, k, s) in enumerate(items):
                offsets[(b, k)] = (base + r * topo.num_nodes, topo)
                sums_of[(b, k)] = ps[r]
            base += len(items) * topo.num_nodes
        flat.append(torch.zeros(1, d, dtype=dt))
        zero_row = base
        zflat = torch.cat(flat, dim=0)
        idx = np.empty((len(pair_b), K), dtype=np.int64)
        raw_sums = np.zeros((len(pair_b), 5))
        p = 0
        for b, tg in enumerate(targets):
            for v in tg:
                for k in range(K):
                    off, topo = offsets[(b, k)]
                    j = topo.index.get(v)
                    if j is None:
                        idx[p, k] = zero_row
                    else:
                        idx[p, k] = off + j
                        raw_sums[p] += sums_of[(b, k)][j]
                p += 1
        zp = zflat[torch.as_tensor(idx)]
        raw = moments_from_power_sums(raw_sums)
        return self.tail(zp, torch.as_tensor(raw, dtype=dt), times[pair_b])

    # -- bookkeeping ----------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


def lstm_parameter_count(n_in: int, hidden: int) -> int:
    return 4 * hidden * (n_in + hidden) + 8 * hidden


def mlp_parameter_count(n_in: int, hidden: int, n_out: int) -> int:
    return n_in * hidden + hidden + hidden * n_out + n_out


def parameter_count(cfg: FrigateConfig) -> int:
    """Closed-form parameter total; depends only on widths, never on the graph."""
    d, H, hid = cfg.gnn.d, cfg.enc_hidden, cfg.mlp_hidden
    dm = 0 if cfg.no_moments else cfg.d_moments
    total = gnn_parameter_count(cfg.gnn)
    total += lstm_parameter_count(d, H) + lstm_parameter_count(1, H)
    total += mlp_parameter_count(NUM_TIME_FEATURES + d, hid, 2 * H)
    total += 2 * mlp_parameter_count(H + dm, hid, 1)
    if not cfg.no_moments:
        total += mlp_parameter_count(cfg.num_moments, hid, dm)
    return total


def frigate_forward(model: Frigate, stream: RoadStream, v: str, t: int,
                    window: int | None = None) -> np.ndarray:
    """Forecast ``v`` for ``t+1 .. t+horizon`` from the snapshots ``t-window+1 .. t``."""
    window = window or model.cfg.horizon
    snaps = stream.slice(t - window + 1, t)
    if len(snaps) != window:
        raise ValueError(f"window [{t - window + 1}, {t}] has {len(snaps)} of {window} snapshots")
    with torch.no_grad():
        return model.forecast([list(snaps)], [[v]], [t])[0][0]


def save_checkpoint(model: Frigate, path, extra: dict | None = None) -> None:
    """Archive keyed by canonical parameter names plus the JSON model config."""
    meta = {
        "config": model.cfg.to_dict(),
        "anchors": list(model.anchors.anchors),
        "anchor_seed": model.anchors.seed,
        "value_scale": model.value_scale,
        "extra": extra or {},
    }
    torch.save({"meta": json.dumps(meta), "params": model.state_dict()}, path)


def load_checkpoint(path) -> tuple[Frigate, dict]:
    blob = torch.load(path, weights_only=True)
    meta = json.loads(blob["meta"])
    cfg = FrigateConfig.from_dict(meta["config"])
    model = Frigate(cfg, AnchorSet(tuple(meta["anchors"]), meta["anchor_seed"]),
                    value_scale=meta["value_scale"])
    model.load_state_dict(blob["params"])
    return model, meta.get("extra", {})
