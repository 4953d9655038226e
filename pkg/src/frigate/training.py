"""Masked-MAE training over time-split windows with partial sensing."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .graph import EmptyWindowError, RoadSnapshot, RoadStream, Topology
from .model import Frigate, FrigateConfig, save_checkpoint
from .positional import select_anchors

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def masked_mae(pred, target, valid):
    """Mean of ``|pred - target|`` over entries where ``valid`` is true.

    Works on torch tensors (differentiable) or numpy arrays.  Invalid targets
    may hold anything, NaN included; they never reach the arithmetic.
    """
    if isinstance(pred, torch.Tensor):
        valid = torch.as_tensor(valid, dtype=torch.bool)
        if not bool(valid.any()):
            raise ValueError("masked_mae: no valid entries")
        target = torch.as_tensor(target, dtype=pred.dtype)
        return (pred[valid] - target[valid]).abs().mean()
    pred = np.asarray(pred, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("masked_mae: no valid entries")
    target = np.asarray(target, dtype=np.float64)
    return float(np.abs(pred[valid] - target[valid]).mean())


# ----------------------------------------------------------------- sensing

@dataclass(frozen=True)
class SensingMask:
    seen_nodes: frozenset
    seen_pct: float
    seed: int | None = None

    def is_seen(self, v: str) -> bool:
        return v in self.seen_nodes

    def seen_vector(self, topology: Topology) -> np.ndarray:
        return np.array([v in self.seen_nodes for v in topology.node_ids], dtype=bool)

    def unseen(self, topology: Topology) -> list[str]:
        return [v for v in topology.node_ids if v not in self.seen_nodes]


def sample_seen(graph, pct: float, seed: int = 0) -> SensingMask:
    """Uniformly pick ``floor(pct * n / 100)`` nodes as sensed."""
    topo = graph.topology if isinstance(graph, RoadSnapshot) else graph
    if not 0 < pct <= 100:
        raise ValueError("seen percent must be in (0, 100]")
    k = int(math.floor(pct * topo.num_nodes / 100.0 + 1e-9))
    if k < 1:
        raise ValueError(f"{pct}% of {topo.num_nodes} nodes is zero nodes")
    ids = sorted(topo.node_ids)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ids), size=k, replace=False)
    return SensingMask(frozenset(ids[i] for i in pick), float(pct), seed)


def mask_stream(stream: RoadStream, mask: SensingMask) -> RoadStream:
    """The model-visible stream: unseen (and non-finite) readings become MISSING."""
    cache: dict[int, np.ndarray] = {}

    def fn(s: RoadSnapshot) -> RoadSnapshot:
        seen = cache.get(id(s.topology))
        if seen is None:
            seen = cache[id(s.topology)] = mask.seen_vector(s.topology)
        with np.errstate(invalid="ignore"):
            keep = s.present & seen & np.isfinite(np.where(seen, s.values, 0.0))
        return RoadSnapshot(s.topology, s.timestamp, values=np.where(keep, s.values, 0.0),
                            present=keep)

    return stream.map(fn)


# ------------------------------------------------------------------ splits

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.2
    test: float = 0.1

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")

    def ranges(self, T: int) -> dict[str, tuple[int, int]]:
        """Half-open position ranges ``[lo, hi)`` for each segment, in time order."""
        a = int(round(self.train * T))
        b = int(round((self.train + self.val) * T))
        return {"train": (0, a), "val": (a, b), "test": (b, T)}


def anchor_positions(segment: tuple[int, int], window: int, horizon: int | None = None) -> np.ndarray:
    """Positions ``t`` whose history ``[t-window+1, t]`` and horizon ``[t+1, t+horizon]`` fit in ``segment``."""
    horizon = window if horizon is None else horizon
    lo, hi = segment
    first, last = lo + window - 1, hi - horizon - 1
    if last < first:
        raise EmptyWindowError(f"segment [{lo}, {hi}) is shorter than {window}+{horizon} snapshots")
    return np.arange(first, last + 1)


@dataclass
class ForecastBatch:
    times: np.ndarray       # (B,) timestamp of each window's last input snapshot
    values: np.ndarray      # (B, K, n) model-visible readings
    present: np.ndarray     # (B, K, n)
    pair_b: np.ndarray      # (P,)
    pair_v: np.ndarray      # (P,) node index of each target
    target: np.ndarray      # (P, H)
    valid: np.ndarray       # (P, H)

    @property
    def num_pairs(self) -> int:
        return len(self.pair_b)


def make_batches(stream: RoadStream, mask: SensingMask, segment: tuple[int, int], window: int,
                 batch_size: int = 64, seed: int = 0, *, targets: Sequence[str] | None = None,
                 truth: RoadStream | None = None, holdout_frac: float = 0.0,
                 horizon: int | None = None, shuffle: bool = True) -> Iterator[ForecastBatch]:
    """Batches of (anchor time, target node) pairs from one split segment.

    ``stream`` must already be the model-visible (masked) stream with one
    shared topology.  Targets default to the seen nodes; their values come
    from ``truth`` when given (needed for unseen targets).  Each batch
    holds every target for ``ceil(batch_size / |targets|)`` anchor times, so
    the graph pass is shared across a window's targets.

    With ``holdout_frac > 0`` a random share of the targets in each window
    has its input readings hidden, and only those nodes are scored.  This
    trains the model in the same regime it is evaluated in, where a target
    never sees its own history.
    """
    if not stream.is_static():
        raise ValueError("make_batches needs a shared-topology stream")
    horizon = window if horizon is None else horizon
    topo = stream[0].topology
    vals, pres = stream.value_matrix()
    if truth is None:
        tvals, tpres = vals, pres
    else:
        tvals, tpres = truth.value_matrix()
        tpres = tpres & np.isfinite(np.where(tpres, tvals, 0.0))
    times = np.asarray(stream.timestamps)
    if targets is None:
        targets = sorted(mask.seen_nodes & set(topo.node_ids))
    tidx = np.array([topo.index[v] for v in targets], dtype=np.int64)
    if len(tidx) == 0:
        raise ValueError("no target nodes")
    anchors = anchor_positions(segment, window, horizon)
    rng = np.random.default_rng(seed)
    if shuffle:
        anchors = anchors[rng.permutation(len(anchors))]
    per = max(1, math.ceil(batch_size / len(tidx)))
    n_hide = 0
    if holdout_frac > 0:
        n_hide = min(len(tidx), max(1, int(round(holdout_frac * len(tidx)))))
    hist = np.arange(-window + 1, 1)
    fut = np.arange(1, horizon + 1)
    for start in range(0, len(anchors), per):
        ts = anchors[start:start + per]
        v = vals[ts[:, None] + hist]
        p = pres[ts[:, None] + hist].copy()
        pb, pv = [], []
        for b in range(len(ts)):
            if n_hide:
                hide = np.sort(rng.choice(tidx, size=n_hide, replace=False))
                p[b][:, hide] = False
                chosen = hide
            else:
                chosen = tidx
            pb.append(np.full(len(chosen), b))
            pv.append(chosen)
        pb = np.concatenate(pb)
        pv = np.concatenate(pv)
        rows = ts[pb][:, None] + fut
        valid = tpres[rows, pv[:, None]]
        target = np.where(valid, tvals[rows, pv[:, None]], 0.0)
        yield ForecastBatch(times[ts], np.where(p, v, 0.0), p, pb, pv, target, valid)


def count_pairs(segment: tuple[int, int], window: int, num_targets: int,
                horizon: int | None = None) -> int:
    try:
        return len(anchor_positions(segment, window, horizon)) * num_targets
    except EmptyWindowError:
        return 0


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    window: int = 12
    holdout_frac: float = 0.15
    val_node_frac: float = 0.25
    grad_clip: float | None = 5.0
    position_noise: float = 1.0
    max_seconds: float | None = None
    max_train_batches: int | None = None
    deterministic: bool = True
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if isinstance(self.split, dict):
            self.split = SplitSpec(**self.split)
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.holdout_frac < 1:
            raise ValueError("holdout_frac must be in [0, 1)")
        if not 0 <= self.val_node_frac < 1:
            raise ValueError("val_node_frac must be in [0, 1)")
        if self.position_noise < 0:
            raise ValueError("position_noise must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Frigate
    log: list[dict]
    best_val: float
    best_epoch: int
    stopped_early: bool
    seconds: float


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def value_scale_of(stream: RoadStream, segment: tuple[int, int]) -> float:
    """Mean observed reading in a segment; used to condition model inputs and outputs."""
    vals, pres = stream.value_matrix()
    lo, hi = segment
    x = vals[lo:hi][pres[lo:hi]]
    m = float(np.abs(x).mean()) if x.size else 0.0
    return m if m > 0 and math.isfinite(m) else 1.0


def build_model(stream: RoadStream, cfg: FrigateConfig, seed: int = 0,
                value_scale: float = 1.0) -> Frigate:
    """Fresh model with anchors drawn from the first snapshot."""
    torch.manual_seed(seed)
    anchors = select_anchors(stream[0], cfg.gnn.d_pos, seed)
    return Frigate(cfg, anchors, value_scale)


def _run_batch(model: Frigate, topo: Topology, batch: ForecastBatch) -> torch.Tensor:
    return model.forward_static(topo, batch.values, batch.present, batch.times,
                                batch.pair_b, batch.pair_v)


def split_targets(mask: SensingMask, topology: Topology, val_frac: float,
                  seed: int) -> tuple[list[str], list[str]]:
    """Partition seen nodes into training targets and validation targets.

    With ``val_frac == 0`` both lists are all seen nodes.
    """
    seen = sorted(mask.seen_nodes & set(topology.node_ids))
    k = int(round(val_frac * len(seen)))
    if k == 0 or k == len(seen):
        return seen, seen
    rng = np.random.default_rng(seed)
    pick = set(rng.choice(len(seen), size=k, replace=False).tolist())
    return ([v for i, v in enumerate(seen) if i not in pick],
            [v for i, v in enumerate(seen) if i in pick])


def evaluate_loss(model: Frigate, stream: RoadStream, mask: SensingMask, segment, window: int,
                  batch_size: int, seed: int, holdout_frac: float,
                  targets: Sequence[str] | None = None) -> float:
    """Masked MAE over a segment with a share of the targets' inputs hidden."""
    topo = stream[0].topology
    err, cnt = 0.0, 0
    with torch.no_grad():
        for batch in make_batches(stream, mask, segment, window, batch_size, seed,
                                  targets=targets, holdout_frac=holdout_frac,
                                  horizon=model.cfg.horizon, shuffle=False):
            if not batch.valid.any():
                continue
            pred = _run_batch(model, topo, batch).numpy()
            err += float(np.abs(pred - batch.target)[batch.valid].sum())
            cnt += int(batch.valid.sum())
    if cnt == 0:
        raise ValueError("no valid validation targets")
    return err / cnt


def train(model: Frigate, stream: RoadStream, mask: SensingMask, config: TrainConfig,
          checkpoint: str | Path | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Fit ``model`` on seen-node targets of the train segment.

    ``stream`` may carry readings for every node; only the masked view is
    ever handed to the model.  The best-validation weights are restored on
    return (and written to ``checkpoint`` when given).
    """
    if config.deterministic:
        set_deterministic(config.seed)
    visible = mask_stream(stream, mask)
    topo = visible[0].topology
    ranges = config.split.ranges(len(visible))
    for name in ("train", "val"):
        anchor_positions(ranges[name], config.window, model.cfg.horizon)
    fit_nodes, val_nodes = split_targets(mask, topo, config.val_node_frac, config.seed + 13)
    # disjoint validation nodes are scored exactly as unseen nodes are: inputs fully hidden
    val_hold = 1.0 if val_nodes is not fit_nodes else config.holdout_frac
    params = list(model.parameters())
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.lr)
    else:
        opt = torch.optim.SGD(params, lr=config.lr)
    started = time.perf_counter()
    model.gnn.position_noise = config.position_noise
    try:
        rows, best_val, best_epoch, best_state, stopped_early = _fit_epochs(
            model, visible, mask, config, checkpoint, ranges, fit_nodes, val_nodes, val_hold,
            params, opt, started)
    finally:
        model.gnn.position_noise = 0.0
        model.eval()
    if best_state is not None:
        model.load_state_dict(best_state)
    if log_path is not None:
        write_log(rows, log_path)
    return TrainResult(model, rows, best_val, best_epoch, stopped_early,
                       time.perf_counter() - started)


def _fit_epochs(model, visible, mask, config, checkpoint, ranges, fit_nodes, val_nodes, val_hold,
                params, opt, started):
    topo = visible[0].topology
    best_val, best_epoch, best_state = math.inf, 0, None
    rows: list[dict] = []
    stale = 0
    stopped_early = False
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        tot, cnt = 0.0, 0
        batches = make_batches(visible, mask, ranges["train"], config.window, config.batch_size,
                               seed=config.seed * 100003 + epoch, targets=fit_nodes,
                               holdout_frac=config.holdout_frac, horizon=model.cfg.horizon)
        for i, batch in enumerate(batches):
            if config.max_train_batches is not None and i >= config.max_train_batches:
                break
            if not batch.valid.any():
                continue
            pred = _run_batch(model, topo, batch)
            loss = masked_mae(pred, batch.target, batch.valid)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, batch {i}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            k = int(batch.valid.sum())
            tot += loss.item() * k
            cnt += k
        model.eval()
        val = evaluate_loss(model, visible, mask, ranges["val"], config.window,
                            config.batch_size, seed=config.seed + 7, holdout_frac=val_hold,
                            targets=val_nodes)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation loss became {val} at epoch {epoch}")
        row = {"epoch": epoch, "train_mae": tot / max(cnt, 1), "val_mae": val,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, row["train_mae"], val, row["seconds"])
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if checkpoint is not None:
                save_checkpoint(model, checkpoint, extra=_extra(mask, config))
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break
        if config.max_seconds is not None and time.perf_counter() - started > config.max_seconds:
            break
    return rows, best_val, best_epoch, best_state, stopped_early


def _extra(mask: SensingMask, config: TrainConfig) -> dict:
    return {"seen_nodes": sorted(mask.seen_nodes), "seen_pct": mask.seen_pct,
            "mask_seed": mask.seed, "train": config.to_dict()}


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_mae", "val_mae", "seconds"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
