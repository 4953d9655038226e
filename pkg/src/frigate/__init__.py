"""Inductive traffic forecasting on road networks with partial sensing."""
from .graph import (MISSING, EmptyWindowError, GraphError, RoadSnapshot, RoadStream, Topology,
                    haversine, stream_from_arrays)
from .positional import (AnchorSet, EmbeddingTable, compute_embeddings, measure_distortion,
                         normalize_embeddings, select_anchors, two_way_distance)
from .gnn import GatedGNN, GnnConfig
from .model import Frigate, FrigateConfig, frigate_forward, load_checkpoint, save_checkpoint
from .training import SensingMask, SplitSpec, TrainConfig, masked_mae, sample_seen, train
from .pipeline import (BucketSpec, PerturbSpec, SyntheticSpec, drop_snapshots, generate_synthetic,
                       ingest, perturb_topology)
from .evaluation import EvalReport, evaluate

__version__ = "0.1.0"
