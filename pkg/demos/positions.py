"""Why anchor distances help: two junctions with identical local roads.

On a ring of two-way streets every junction looks the same from one hop
away.  Message passing alone cannot tell them apart; anchor distances can.

    python demos/positions.py
"""
import numpy as np
import torch

from frigate import (GatedGNN, GnnConfig, Topology, compute_embeddings, measure_distortion,
                     normalize_embeddings, select_anchors, two_way_distance)
from frigate.gnn import GraphTensors

n = 8
ids = [f"r{i}" for i in range(n)]
edges = [(ids[i], ids[(i + 1) % n]) for i in range(n)] + [(ids[(i + 1) % n], ids[i]) for i in range(n)]
ring = Topology(ids, edges, [1.0] * len(edges))

for v in ("r1", "r2", "r4"):
    print(f"two-way distance r0<->{v}:", two_way_distance(ring, "r0", v))

anchors = select_anchors(ring, 3, seed=0)
emb = compute_embeddings(ring, anchors)
print("anchors:", anchors.anchors)
for v in ids:
    print(f"  {v}: {emb[v]}")

rep = measure_distortion(ring, emb)
print(f"distortion with {len(anchors)} anchors: {rep.distortion:.2f}")

torch.manual_seed(0)
for no_lip in (True, False):
    cfg = GnnConfig(layers=1, d_tau=4, d_pos=3, d_delta=2, d_edge=4, no_lipschitz=no_lip)
    gnn = GatedGNN(cfg).double()
    g = GraphTensors(ring, normalize_embeddings(emb), dtype=torch.float64)
    h = gnn(g, torch.full((1, n), 3.0, dtype=torch.float64))[0].detach().numpy()
    spread = np.abs(h - h[0]).max()
    label = "without positions" if no_lip else "with positions   "
    print(f"{label}: largest difference between node embeddings {spread:.3g}")
