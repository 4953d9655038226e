"""JSON run configuration shared by the CLI and the experiment drivers.

A config file is a JSON object; every key is optional::

    {
      "seed": 0,
      "seen_pct": 30,
      "bootstrap": 1000,
      "synthetic": {"num_nodes": 60, "num_days": 7},
      "model": {"horizon": 12, "gnn": {"layers": 10, "d_pos": 16}},
      "train": {"lr": 0.001, "batch_size": 64, "patience": 15}
    }

Unknown keys are rejected so typos surface early.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .gnn import GnnConfig
from .model import FrigateConfig
from .pipeline import SyntheticSpec
from .training import SplitSpec, TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    seen_pct: float = 30.0
    bootstrap: int = 1000
    anchor_seed: int | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: FrigateConfig = field(default_factory=FrigateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, seed=None, seen_pct=None, horizon=None, layers=None,
                       anchors=None) -> "RunConfig":
        out = copy.deepcopy(self)
        if seed is not None:
            out.seed = seed
            out.train.seed = seed
            out.synthetic.seed = seed
        if seen_pct is not None:
            out.seen_pct = seen_pct
        if horizon is not None:
            out.model.horizon = horizon
            out.train.window = horizon
        if layers is not None:
            out.model.gnn = GnnConfig(**{**out.model.gnn.to_dict(), "layers": layers})
        if anchors is not None:
            out.model.gnn = GnnConfig(**{**out.model.gnn.to_dict(), "d_pos": anchors})
        return out


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ValueError(f"{where}: unknown keys {sorted(extra)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    model = dict(data.pop("model", {}))
    if "gnn" in model:
        model["gnn"] = _build(GnnConfig, model["gnn"], "model.gnn")
    train = dict(data.pop("train", {}))
    if "split" in train:
        train["split"] = _build(SplitSpec, train["split"], "train.split")
    out = _build(RunConfig, data, "config")
    if "synthetic" in data:
        out.synthetic = _build(SyntheticSpec, data["synthetic"], "synthetic")
    out.model = _build(FrigateConfig, model, "model")
    out.train = _build(TrainConfig, train, "train")
    if "seed" in data and "seed" not in train:
        out.train.seed = out.seed
    return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise ValueError(f"config file {path} not found")
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)
