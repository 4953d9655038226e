"""Forecast metrics, node-level bootstrap intervals, and experiment drivers."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .graph import RoadStream
from .model import Frigate
from .pipeline import drop_snapshots
from .training import SensingMask, SplitSpec, anchor_positions, mask_stream

log = logging.getLogger(__name__)

BUCKET_NAMES = ("high", "medium", "low")


class NumericError(ArithmeticError):
    """A report violated a metric identity (e.g. RMSE < MAE)."""


def _prep(pred, target, valid):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if pred.shape != target.shape or pred.shape != valid.shape:
        raise ValueError("predictions, targets and validity must have the same shape")
    if not valid.any():
        raise ValueError("no valid entries")
    return pred[valid], target[valid]


def smape_terms(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """``200 |p - t| / (|p| + |t|)`` elementwise, with 0/0 taken as 0."""
    den = np.abs(pred) + np.abs(target)
    num = 200.0 * np.abs(pred - target)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def metric_mae(pred, target, valid=None) -> float:
    p, t = _prep(pred, target, valid)
    return float(np.abs(p - t).mean())


def metric_rmse(pred, target, valid=None) -> float:
    p, t = _prep(pred, target, valid)
    return float(math.sqrt(((p - t) ** 2).mean()))


def metric_smape(pred, target, valid=None) -> float:
    p, t = _prep(pred, target, valid)
    return float(smape_terms(p, t).mean())


# --------------------------------------------------------------- bootstrap

def _pooled_bootstrap(sums: np.ndarray, counts: np.ndarray, B: int, seed: int,
                      finish: Callable[[np.ndarray], np.ndarray] = lambda x: x) -> tuple[float, float]:
    """Percentile interval of ``finish(sum(sums[idx]) / sum(counts[idx]))`` over node resamples."""
    n = len(sums)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(B, n))
    stats = finish(sums[idx].sum(axis=1) / counts[idx].sum(axis=1))
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return float(lo), float(hi)


def bootstrap_ci(values: Sequence[float], B: int = 1000, seed: int = 0) -> tuple[float, float]:
    """95% percentile bootstrap interval for the mean of per-node values.

    Fewer than two values give the degenerate interval ``(x, x)`` with a
    warning.
    """
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise ValueError("no values")
    if len(v) < 2:
        warnings.warn("bootstrap on fewer than 2 values; interval is degenerate")
        return float(v[0]), float(v[0])
    if B < 100:
        raise ValueError("B must be at least 100")
    lo, hi = _pooled_bootstrap(v, np.ones_like(v), B, seed)
    mu = float(v.mean())
    return min(lo, mu), max(hi, mu)


def coverage_simulation(trials: int = 500, n: int = 100, B: int = 1000, seed: int = 0,
                        mu: float = 0.0, sigma: float = 1.0) -> float:
    """Share of trials whose bootstrap interval contains the true mean of a normal sample."""
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(trials):
        x = rng.normal(mu, sigma, size=n)
        lo, hi = bootstrap_ci(x, B=B, seed=seed * 7919 + i)
        hits += lo <= mu <= hi
    return hits / trials


# ------------------------------------------------------- frequency buckets

def frequency_buckets(stream: RoadStream, nodes: Sequence[str]) -> dict[str, str]:
    """Tertiles of total observed volume: ``high``, ``medium``, ``low``.

    Ties are broken by node id.  With fewer than three nodes every node goes
    to a single ``all`` bucket (with a warning).
    """
    nodes = list(nodes)
    if len(nodes) < 3:
        warnings.warn("fewer than 3 nodes; using a single bucket")
        return {v: "all" for v in nodes}
    vol = {v: 0.0 for v in nodes}
    for s in stream:
        for v in nodes:
            i = s.topology.index.get(v)
            if i is not None and s.present[i]:
                vol[v] += float(s.values[i])
    order = sorted(nodes, key=lambda v: (-vol[v], v))
    out = {}
    for name, part in zip(BUCKET_NAMES, np.array_split(np.arange(len(order)), 3)):
        for k in part:
            out[order[k]] = name
    return out


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    metrics: dict[str, dict[str, float]]                 # name -> point/lo/hi
    horizon_mae: list[float]
    buckets: dict[str, dict[str, float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    @property
    def mae(self) -> float:
        return self.metrics["mae"]["point"]

    def check(self) -> None:
        for name, m in self.metrics.items():
            if not m["lo"] <= m["point"] <= m["hi"]:
                raise NumericError(f"{name}: interval does not contain the point estimate")
        if self.metrics["smape"]["point"] > 200.0 + 1e-9:
            raise NumericError("sMAPE above 200")
        if self.metrics["rmse"]["point"] < self.metrics["mae"]["point"] - 1e-9:
            raise NumericError("RMSE below MAE")
        for name, vals in self.metrics.items():
            if not all(math.isfinite(vals[k]) for k in ("point", "lo", "hi")):
                raise NumericError(f"{name} is not finite")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def rows(self) -> list[tuple]:
        out = [(name, m["point"], m["lo"], m["hi"], "all") for name, m in self.metrics.items()]
        out += [(f"mae@{k + 1}", v, v, v, "horizon") for k, v in enumerate(self.horizon_mae)]
        out += [("mae", b["point"], b["lo"], b["hi"], name) for name, b in self.buckets.items()]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "point", "lo", "hi", "group"])
            for r in self.rows():
                w.writerow(r)


def build_report(pred: np.ndarray, target: np.ndarray, valid: np.ndarray, nodes: Sequence[str],
                 buckets: dict[str, str] | None = None, B: int = 1000, seed: int = 0,
                 metadata: dict | None = None) -> EvalReport:
    """Report from (A, U, H) arrays of anchor times x nodes x horizon steps."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    tz = np.where(valid, target, 0.0)
    pz = np.where(valid, pred, 0.0)
    err = np.where(valid, np.abs(pz - tz), 0.0)
    sq = err ** 2
    sm = np.where(valid, smape_terms(pz, tz), 0.0)
    counts = valid.sum(axis=(0, 2)).astype(np.float64)
    keep = counts > 0
    flags = []
    if not keep.any():
        raise ValueError("no valid evaluation entries")
    per_node = {
        "mae": err.sum(axis=(0, 2))[keep],
        "rmse": sq.sum(axis=(0, 2))[keep],
        "smape": sm.sum(axis=(0, 2))[keep],
    }
    c = counts[keep]
    metrics = {}
    for name, sums in per_node.items():
        finish = np.sqrt if name == "rmse" else (lambda x: x)
        point = float(finish(np.asarray(sums.sum() / c.sum())))
        if keep.sum() < 2:
            lo = hi = point
            flags.append(f"{name}: fewer than 2 nodes, degenerate interval")
        else:
            lo, hi = _pooled_bootstrap(sums, c, B, seed, finish)
        metrics[name] = {"point": point, "lo": min(lo, point), "hi": max(hi, point)}
    hv = valid.sum(axis=(0, 1))
    horizon = [float(err[:, :, k].sum() / hv[k]) if hv[k] else float("nan")
               for k in range(valid.shape[2])]
    bucket_stats = {}
    if buckets:
        names = np.array([buckets.get(v, "all") for v in nodes])[keep]
        sums = per_node["mae"]
        for name in sorted(set(names)):
            sel = names == name
            point = float(sums[sel].sum() / c[sel].sum())
            if sel.sum() >= 2:
                lo, hi = _pooled_bootstrap(sums[sel], c[sel], B, seed)
            else:
                lo = hi = point
            bucket_stats[name] = {"point": point, "lo": min(lo, point), "hi": max(hi, point),
                                  "nodes": int(sel.sum())}
    return EvalReport(metrics, horizon, bucket_stats, dict(metadata or {}), flags)


# ---------------------------------------------------------------- forecasts

@dataclass
class ForecastSet:
    times: np.ndarray        # (A,) anchor timestamps
    nodes: list[str]         # (U,)
    pred: np.ndarray         # (A, U, H)
    target: np.ndarray       # (A, U, H)
    valid: np.ndarray        # (A, U, H)


def segment_targets(truth: RoadStream, positions: np.ndarray, nodes: Sequence[str], horizon: int):
    vals, pres = truth.value_matrix()
    topo = truth[0].topology
    idx = np.array([topo.index[v] for v in nodes], dtype=np.int64)
    rows = positions[:, None] + np.arange(1, horizon + 1)        # (A, H)
    v = vals[rows][:, :, idx].transpose(0, 2, 1)                 # (A, U, H)
    p = pres[rows][:, :, idx].transpose(0, 2, 1)
    with np.errstate(invalid="ignore"):
        p = p & np.isfinite(np.where(p, v, 0.0))
    return np.where(p, v, 0.0), p


def forecast_segment(model: Frigate, truth: RoadStream, mask: SensingMask, segment: tuple[int, int],
                     nodes: Sequence[str] | None = None, window: int | None = None,
                     inputs: RoadStream | None = None, drop_fraction: float = 0.0,
                     seed: int = 0, chunk: int = 16) -> ForecastSet:
    """Forecast every anchor time of a segment for ``nodes`` (default: unseen nodes).

    ``inputs`` replaces the model-visible stream (for instance a perturbed
    copy); it is masked here either way.  Targets always come from ``truth``.
    """
    H = model.cfg.horizon
    window = window or H
    visible = mask_stream(inputs if inputs is not None else truth, mask)
    if len(visible) != len(truth):
        raise ValueError("input and truth streams must be aligned")
    if nodes is None:
        nodes = mask.unseen(truth[0].topology)
    nodes = list(nodes)
    positions = anchor_positions(segment, window, H)
    times = np.asarray(truth.timestamps)[positions]
    snaps = list(visible)
    preds = []
    with torch.no_grad():
        for s in range(0, len(positions), chunk):
            ps = positions[s:s + chunk]
            wins = []
            for j, t in enumerate(ps):
                w = snaps[t - window + 1:t + 1]
                if drop_fraction > 0:
                    w = drop_snapshots(w, drop_fraction, seed=seed * 1000003 + int(t))
                wins.append(w)
            out = model.forecast(wins, [nodes] * len(wins), times[s:s + chunk])
            preds.append(np.stack(out))
    pred = np.concatenate(preds, axis=0)
    target, valid = segment_targets(truth, positions, nodes, H)
    return ForecastSet(times, nodes, pred, target, valid)


def evaluate(model: Frigate, truth: RoadStream, mask: SensingMask, split: SplitSpec = SplitSpec(),
             segment: str = "test", B: int = 1000, seed: int = 0, inputs: RoadStream | None = None,
             drop_fraction: float = 0.0, metadata: dict | None = None) -> EvalReport:
    """Unseen-node report over one split segment."""
    seg = split.ranges(len(truth))[segment]
    fs = forecast_segment(model, truth, mask, seg, inputs=inputs, drop_fraction=drop_fraction,
                          seed=seed)
    buckets = frequency_buckets(truth.slice(truth.timestamps[seg[0]], truth.timestamps[seg[1] - 1]),
                                fs.nodes)
    meta = {"seed": seed, "seen_pct": mask.seen_pct, "segment": segment,
            "drop_fraction": drop_fraction, "gnn": model.cfg.gnn.to_dict(),
            "no_moments": model.cfg.no_moments}
    meta.update(metadata or {})
    return build_report(fs.pred, fs.target, fs.valid, fs.nodes, buckets, B=B, seed=seed,
                        metadata=meta)


# ---------------------------------------------------------------- baseline

def historical_profile(truth: RoadStream, segment: tuple[int, int], buckets_per_day: int) -> np.ndarray:
    """Per-node mean reading at each time-of-day bucket over a segment, shape (n, buckets_per_day).

    Time-of-day slots never observed fall back to the node's overall mean.
    """
    vals, pres = truth.value_matrix()
    lo, hi = segment
    tod = np.mod(np.asarray(truth.timestamps)[lo:hi], buckets_per_day)
    v, p = vals[lo:hi], pres[lo:hi]
    n = v.shape[1]
    sums = np.zeros((buckets_per_day, n))
    cnts = np.zeros((buckets_per_day, n))
    np.add.at(sums, tod, np.where(p, v, 0.0))
    np.add.at(cnts, tod, p.astype(np.float64))
    overall = np.divide(sums.sum(0), cnts.sum(0), out=np.zeros(n), where=cnts.sum(0) > 0)
    prof = np.where(cnts > 0, sums / np.maximum(cnts, 1), overall[None, :])
    return prof.T


def baseline_forecast(truth: RoadStream, mask: SensingMask, split: SplitSpec, horizon: int,
                      buckets_per_day: int, window: int | None = None, segment: str = "test",
                      nodes: Sequence[str] | None = None, oracle: bool = False) -> ForecastSet:
    """Historical time-of-day mean per node, learned from the training segment.

    By default the profile sees what the model sees: readings of seen nodes
    only.  A node with no visible history (every unseen node) gets the
    profile pooled over the seen nodes.  ``oracle=True`` instead reads every
    node's own ground-truth history.
    """
    window = window or horizon
    ranges = split.ranges(len(truth))
    source = truth if oracle else mask_stream(truth, mask)
    prof = historical_profile(source, ranges["train"], buckets_per_day)
    if not oracle:
        vals, pres = source.value_matrix()
        lo, hi = ranges["train"]
        has = pres[lo:hi].any(axis=0)
        if has.any():
            pooled = prof[has].mean(axis=0)
            prof[~has] = pooled
    topo = truth[0].topology
    nodes = list(nodes) if nodes is not None else mask.unseen(topo)
    idx = np.array([topo.index[v] for v in nodes], dtype=np.int64)
    positions = anchor_positions(ranges[segment], window, horizon)
    ts = np.asarray(truth.timestamps)
    fut = ts[positions[:, None] + np.arange(1, horizon + 1)]     # (A, H)
    pred = prof[idx][:, np.mod(fut, buckets_per_day)].transpose(1, 0, 2)
    target, valid = segment_targets(truth, positions, nodes, horizon)
    return ForecastSet(ts[positions], nodes, pred, target, valid)


# ------------------------------------------------------------- experiments

SEEN_SWEEP = (10, 30, 50, 70, 90)
ABLATIONS = ("full", "no_gating", "no_lipschitz", "merged_inout", "no_moments")
PERTURB_LEVELS = (0, 2, 5, 10)


def run_experiment(kind: str, config, checkpoint=None) -> list[EvalReport]:
    """Run one experiment family; see :mod:`frigate.experiments` for the config type."""
    from .experiments import run
    return run(kind, config, checkpoint)
