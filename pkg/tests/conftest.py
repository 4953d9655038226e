import json
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import oracles as O  # noqa: E402
from frigate.gnn import GnnConfig  # noqa: E402
from frigate.graph import Topology, stream_from_arrays  # noqa: E402
from frigate.model import FrigateConfig  # noqa: E402

FROZEN = json.loads((Path(__file__).parent / "data" / "frozen_oracles.json").read_text())


def topology_from(nodes, weights, seed=0):
    rng = np.random.default_rng(seed)
    coords = {v: (30.6 + rng.random() * 0.05, 104.0 + rng.random() * 0.05) for v in nodes}
    edges = sorted(weights)
    return Topology(nodes, edges, {e: weights[e] for e in edges}, coords)


def random_topology(n, seed, p=0.3, integer=True):
    nodes, w = O.random_strong_digraph(n, seed, p=p, integer=integer)
    return topology_from(nodes, w, seed)


def random_stream(topo, T, seed=0, missing=0.2, scale=20.0):
    rng = np.random.default_rng(seed)
    values = rng.poisson(scale, size=(T, topo.num_nodes)).astype(np.float64)
    present = rng.random((T, topo.num_nodes)) >= missing
    return stream_from_arrays(topo, values, present)


def tiny_config(horizon=3, layers=2, d_pos=4, dtype="float64", **kw):
    gnn = GnnConfig(layers=layers, d_tau=3, d_pos=d_pos, d_delta=2, d_edge=5,
                    **{k: kw.pop(k) for k in list(kw) if k in ("no_gating", "no_lipschitz", "merged_inout")})
    return FrigateConfig(horizon=horizon, gnn=gnn, enc_hidden=6, dec_hidden=6, mlp_hidden=7,
                         d_moments=3, dtype=dtype, **kw)


@pytest.fixture
def frozen():
    return FROZEN


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


# criterion number -> one-line verdict, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
