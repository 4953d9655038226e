"""Experiment families: seen-percentage sweep, ablations, perturbation and granularity."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .evaluation import ABLATIONS, PERTURB_LEVELS, SEEN_SWEEP, EvalReport, evaluate
from .graph import RoadStream
from .gnn import GnnConfig
from .model import Frigate, load_checkpoint
from .pipeline import PerturbSpec, generate_synthetic, perturb_topology
from .training import (SensingMask, build_model, mask_stream, sample_seen, train,
                       value_scale_of)

log = logging.getLogger(__name__)

KINDS = ("seen_sweep", "ablation", "perturb_sweep", "granularity")
DROP_FRACTION = 1.0 / 3.0


@dataclass
class Trained:
    model: Frigate
    mask: SensingMask


def fit(stream: RoadStream, cfg: RunConfig, mask: SensingMask | None = None,
        checkpoint=None, log_path=None) -> Trained:
    mask = mask or sample_seen(stream[0], cfg.seen_pct, cfg.seed)
    visible = mask_stream(stream, mask)
    scale = value_scale_of(visible, cfg.train.split.ranges(len(visible))["train"])
    anchor_seed = cfg.seed if cfg.anchor_seed is None else cfg.anchor_seed
    model = build_model(stream, cfg.model, anchor_seed, scale)
    train(model, stream, mask, cfg.train, checkpoint=checkpoint, log_path=log_path)
    return Trained(model, mask)


def from_checkpoint(path) -> Trained:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, extra = load_checkpoint(path)
    if "seen_nodes" not in extra:
        raise ValueError(f"checkpoint {path} has no sensing mask")
    mask = SensingMask(frozenset(extra["seen_nodes"]), extra.get("seen_pct", 0.0),
                       extra.get("mask_seed"))
    return Trained(model, mask)


def _variant(cfg: RunConfig, name: str) -> RunConfig:
    out = copy.deepcopy(cfg)
    if name == "no_moments":
        out.model.no_moments = True
    elif name != "full":
        out.model.gnn = GnnConfig(**{**out.model.gnn.to_dict(), name: True})
    return out


def run(kind: str, cfg: RunConfig, checkpoint=None, stream: RoadStream | None = None) -> list[EvalReport]:
    """Reports for one experiment family.

    ``perturb_sweep`` and ``granularity`` reuse one trained model (loaded
    from ``checkpoint`` when given, else trained from ``cfg``) and never
    retrain it.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown experiment {kind!r}; choose from {', '.join(KINDS)}")
    if stream is None:
        stream = generate_synthetic(cfg.synthetic).stream
    split = cfg.train.split
    reports = []
    if kind == "seen_sweep":
        for pct in SEEN_SWEEP:
            c = copy.deepcopy(cfg)
            c.seen_pct = pct
            t = fit(stream, c)
            reports.append(evaluate(t.model, stream, t.mask, split, B=cfg.bootstrap, seed=cfg.seed,
                                    metadata={"experiment": kind, "seen_pct": pct}))
    elif kind == "ablation":
        mask = sample_seen(stream[0], cfg.seen_pct, cfg.seed)
        for name in ABLATIONS:
            t = fit(stream, _variant(cfg, name), mask)
            reports.append(evaluate(t.model, stream, t.mask, split, B=cfg.bootstrap, seed=cfg.seed,
                                    metadata={"experiment": kind, "variant": name}))
    else:
        t = from_checkpoint(checkpoint) if checkpoint is not None else fit(stream, cfg)
        if kind == "perturb_sweep":
            for x in PERTURB_LEVELS:
                inputs = perturb_topology(stream, PerturbSpec(x=x, seed=cfg.seed))
                reports.append(evaluate(t.model, stream, t.mask, split, B=cfg.bootstrap,
                                        seed=cfg.seed, inputs=inputs,
                                        metadata={"experiment": kind, "perturb_x": x}))
        else:
            for frac in (0.0, DROP_FRACTION):
                reports.append(evaluate(t.model, stream, t.mask, split, B=cfg.bootstrap,
                                        seed=cfg.seed, drop_fraction=frac,
                                        metadata={"experiment": kind}))
    for r in reports:
        log.info("%s %s: MAE %.4f", kind, r.metadata, r.mae)
    return reports
