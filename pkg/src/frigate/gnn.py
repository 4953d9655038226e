"""Direction-aware message passing with sigmoid edge gates.

Each layer aggregates neighbour states separately over outgoing and incoming
edges.  An edge's weight is a sigmoid of a small network applied to the edge's
positional features (projected length plus the endpoint coordinates), so the
weights are unnormalized and directional.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .graph import Topology

DENSE_LIMIT = 1500


@dataclass
class GnnConfig:
    layers: int = 10
    d_tau: int = 16
    d_pos: int = 16
    d_delta: int = 8
    d_edge: int = 32
    no_gating: bool = False
    no_lipschitz: bool = False
    merged_inout: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        for name in ("d_tau", "d_pos", "d_delta", "d_edge"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d(self) -> int:
        return self.d_tau + self.d_pos

    def to_dict(self) -> dict:
        return asdict(self)


class GraphTensors:
    """Tensor view of one topology plus its positional features."""

    def __init__(self, topology: Topology, positions: np.ndarray, dtype=torch.float32):
        self.topology = topology
        self.n = topology.num_nodes
        self.src = torch.as_tensor(topology.src, dtype=torch.long)
        self.dst = torch.as_tensor(topology.dst, dtype=torch.long)
        self.length = torch.as_tensor(topology.length_array, dtype=dtype)
        self.pos = torch.as_tensor(np.asarray(positions), dtype=dtype)
        if self.pos.shape[0] != self.n:
            raise ValueError("positions must have one row per node")
        self.dense = self.n <= DENSE_LIMIT
        out_deg = torch.bincount(self.src, minlength=self.n).to(dtype)
        in_deg = torch.bincount(self.dst, minlength=self.n).to(dtype)
        self.out_deg = out_deg
        self.in_deg = in_deg


def init_embedding(readings: torch.Tensor, positions: torch.Tensor, w_tau: torch.Tensor) -> torch.Tensor:
    """``h0 = (w_tau * reading) || position`` for every node.

    ``readings`` has shape (..., n) with missing entries already zero;
    ``positions`` has shape (n, d_pos).
    """
    proj = readings.unsqueeze(-1) * w_tau
    pos = positions.expand(*readings.shape, positions.shape[-1])
    return torch.cat([proj, pos], dim=-1)


def edge_gate(pos_i: torch.Tensor, pos_j: torch.Tensor, length: torch.Tensor,
              w_delta: torch.Tensor, W_L: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Gate in (0, 1) for directed edges ``i -> j``; inputs are batched over edges."""
    feat = torch.cat([length.unsqueeze(-1) * w_delta, pos_i, pos_j], dim=-1)
    edge_pos = torch.relu(feat @ W_L)
    return torch.sigmoid(edge_pos @ w + b)


def aggregate(graph: GraphTensors, h: torch.Tensor, beta: torch.Tensor | None,
              direction: str) -> torch.Tensor:
    """Gate-weighted neighbour sum over ``out`` or ``in`` edges.

    ``h`` has shape (S, n, d).  With ``beta=None`` the neighbours are
    mean-pooled instead (the ungated ablation).  Nodes with no neighbour in
    the requested direction receive zeros.
    """
    if direction not in ("out", "in"):
        raise ValueError("direction must be 'out' or 'in'")
    # out: v collects h_u over edges (v -> u); in: v collects h_u over (u -> v)
    recv, send = (graph.src, graph.dst) if direction == "out" else (graph.dst, graph.src)
    if beta is None:
        deg = graph.out_deg if direction == "out" else graph.in_deg
        beta = 1.0 / deg.clamp(min=1.0)[recv]
    if graph.dense:
        A = torch.zeros(graph.n, graph.n, dtype=h.dtype)
        A = A.index_put((recv, send), beta)
        return A @ h
    msg = h[:, send] * beta.unsqueeze(-1)
    out = torch.zeros_like(h)
    return out.index_add(1, recv, msg)


class GatedLayer(nn.Module):
    def __init__(self, cfg: GnnConfig):
        super().__init__()
        d = cfg.d
        slots = 2 if cfg.merged_inout else 3
        self.merged = cfg.merged_inout
        self.gated = not cfg.no_gating
        self.W1 = nn.Parameter(torch.empty(slots * d, d))
        bound = 1.0 / math.sqrt(slots * d)
        nn.init.uniform_(self.W1, -bound, bound)
        if self.gated:
            fan = 2 * cfg.d_pos + cfg.d_delta
            self.W_L = nn.Parameter(torch.empty(fan, cfg.d_edge))
            nn.init.uniform_(self.W_L, -1 / math.sqrt(fan), 1 / math.sqrt(fan))
            self.w = nn.Parameter(torch.empty(cfg.d_edge))
            nn.init.uniform_(self.w, -1 / math.sqrt(cfg.d_edge), 1 / math.sqrt(cfg.d_edge))
            self.b = nn.Parameter(torch.zeros(()))

    def gates(self, graph: GraphTensors, pos: torch.Tensor, w_delta: torch.Tensor):
        if not self.gated:
            return None
        return edge_gate(pos[graph.src], pos[graph.dst], graph.length, w_delta,
                         self.W_L, self.w, self.b)

    def forward(self, graph: GraphTensors, h: torch.Tensor, pos: torch.Tensor,
                w_delta: torch.Tensor) -> torch.Tensor:
        beta = self.gates(graph, pos, w_delta)
        return layer_forward(graph, h, beta, self.W1, merged=self.merged)


def layer_forward(graph: GraphTensors, h: torch.Tensor, beta, W1: torch.Tensor,
                  merged: bool = False) -> torch.Tensor:
    """``relu(W1 (h || m_out || m_in))`` (or ``h || m_out + m_in`` when merged)."""
    m_out = aggregate(graph, h, beta, "out")
    m_in = aggregate(graph, h, beta, "in")
    if merged:
        cat = torch.cat([h, m_out + m_in], dim=-1)
    else:
        cat = torch.cat([h, m_out, m_in], dim=-1)
    return torch.relu(cat @ W1)


class GatedGNN(nn.Module):
    """L gated layers applied to a batch of snapshots sharing one topology."""

    def __init__(self, cfg: GnnConfig):
        super().__init__()
        self.cfg = cfg
        self.w_tau = nn.Parameter(torch.empty(cfg.d_tau).uniform_(-1.0, 1.0))
        self.w_delta = nn.Parameter(torch.empty(cfg.d_delta).uniform_(-1.0, 1.0))
        for i in range(cfg.layers):
            setattr(self, f"layer{i}", GatedLayer(cfg))
        # std of Gaussian jitter added to positions in training mode; set by the trainer
        self.position_noise = 0.0

    @property
    def layers(self) -> list[GatedLayer]:
        return [getattr(self, f"layer{i}") for i in range(self.cfg.layers)]

    def positions(self, graph: GraphTensors) -> torch.Tensor:
        if self.cfg.no_lipschitz:
            return torch.zeros_like(graph.pos)
        if self.training and self.position_noise > 0:
            return graph.pos + self.position_noise * torch.randn_like(graph.pos)
        return graph.pos

    def forward(self, graph: GraphTensors, readings: torch.Tensor) -> torch.Tensor:
        """``readings`` (S, n) -> final node states (S, n, d)."""
        pos = self.positions(graph)
        h = init_embedding(readings, pos, self.w_tau)
        for layer in self.layers:
            h = layer(graph, h, pos, self.w_delta)
        return h


def gnn_parameter_count(cfg: GnnConfig) -> int:
    """Closed-form size of :class:`GatedGNN`; no dependence on the graph."""
    d = cfg.d
    slots = 2 if cfg.merged_inout else 3
    per_layer = slots * d * d
    if not cfg.no_gating:
        per_layer += (2 * cfg.d_pos + cfg.d_delta) * cfg.d_edge + cfg.d_edge + 1
    return cfg.d_tau + cfg.d_delta + cfg.layers * per_layer
