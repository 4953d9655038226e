"""Command-line entry point: ``frigate <command> [options]``.

Exit codes: 0 success, 2 invalid arguments or config, 3 bad input data,
4 numeric failure (diverged training, broken metric identity).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from .config import RunConfig, load_config
from .evaluation import NumericError, evaluate
from .experiments import KINDS, fit, from_checkpoint, run
from .graph import GraphError
from .pipeline import (BucketSpec, DataError, PerturbSpec, bucketize, export, generate_synthetic,
                       ingest, perturb_topology, read_topology)
from .positional import compute_embeddings, select_anchors
from .training import TrainingDiverged, mask_stream

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("frigate")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, seen_pct=args.seen_pct, horizon=args.horizon,
                              layers=args.layers, anchors=args.anchors)


def _load_stream(data_dir, cfg: RunConfig, bucket_seconds=None):
    d = Path(data_dir)
    spec = BucketSpec(bucket_seconds) if bucket_seconds else None
    return ingest(d / "nodes.csv", d / "edges.csv", d / "readings.csv", spec,
                  horizon=cfg.model.horizon)


def cmd_embed(args, cfg):
    d = Path(args.data)
    topo = read_topology(d / "nodes.csv", d / "edges.csv")
    anchors = select_anchors(topo, cfg.model.gnn.d_pos, cfg.seed if cfg.anchor_seed is None
                             else cfg.anchor_seed)
    table = compute_embeddings(topo, anchors)
    table.to_csv(args.out)
    print(f"wrote {topo.num_nodes} x {table.m} embeddings to {args.out}")


def cmd_generate(args, cfg):
    data = generate_synthetic(cfg.synthetic)
    export(data.stream, args.out)
    with open(Path(args.out) / "edge_flow.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "trips"])
        for (u, v), f in zip(data.topology.edges, data.edge_flow):
            w.writerow([u, v, int(f)])
    print(f"wrote {len(data.stream)} snapshots of {data.topology!r} to {args.out}")


def cmd_bucketize(args, cfg):
    n = bucketize(args.input, args.out, BucketSpec(args.bucket_seconds, args.origin))
    print(f"wrote {n} bucketed readings to {args.out}")


def cmd_perturb(args, cfg):
    stream = _load_stream(args.data, cfg)
    out = perturb_topology(stream, PerturbSpec(args.x, args.threshold_km, cfg.seed))
    export(out, args.out)
    print(f"wrote perturbed network ({out[0].topology.num_edges} edges) to {args.out}")


def cmd_train(args, cfg):
    stream = _load_stream(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = fit(stream, cfg, checkpoint=out / "checkpoint.pt", log_path=out / "train_log.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"seen {len(t.mask.seen_nodes)} nodes; checkpoint at {out / 'checkpoint.pt'}")


def cmd_predict(args, cfg):
    t = from_checkpoint(args.checkpoint)
    stream = _load_stream(args.data, cfg)
    window = args.window or t.model.cfg.horizon
    topo = stream[0].topology
    nodes = args.nodes.split(",") if args.nodes else t.mask.unseen(topo)
    for v in nodes:
        if v not in topo.index:
            raise DataError(f"unknown node {v!r}")
    times = [int(x) for x in args.t.split(",")] if args.t else [stream.timestamps[-1]]
    visible = mask_stream(stream, t.mask)
    wins = [list(visible.slice(x - window + 1, x)) for x in times]
    for x, w in zip(times, wins):
        if len(w) != window:
            raise DataError(f"window ending at {x} has {len(w)} of {window} snapshots")
    with torch.no_grad():
        preds = t.model.forecast(wins, [nodes] * len(wins), times)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "t", "k", "y_hat"])
        for x, p in zip(times, preds):
            for v, row in zip(nodes, p):
                for k, y in enumerate(row, start=1):
                    w.writerow([v, x, k, repr(float(y))])
    print(f"wrote {len(times) * len(nodes)} forecasts to {args.out}")


def cmd_evaluate(args, cfg):
    t = from_checkpoint(args.checkpoint)
    stream = _load_stream(args.data, cfg)
    inputs = None
    if args.perturb:
        inputs = perturb_topology(stream, PerturbSpec(args.perturb, None, cfg.seed))
    rep = evaluate(t.model, stream, t.mask, cfg.train.split, segment=args.segment,
                   B=cfg.bootstrap, seed=cfg.seed, inputs=inputs,
                   drop_fraction=args.drop_fraction)
    out = Path(args.out)
    rep.to_json(out.with_suffix(".json"))
    rep.to_csv(out.with_suffix(".csv"))
    m = rep.metrics
    print(f"MAE {m['mae']['point']:.4f} [{m['mae']['lo']:.4f}, {m['mae']['hi']:.4f}]  "
          f"RMSE {m['rmse']['point']:.4f}  sMAPE {m['smape']['point']:.2f}")


def cmd_experiment(args, cfg):
    stream = _load_stream(args.data, cfg) if args.data else None
    reports = run(args.kind, cfg, args.checkpoint, stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(reports):
        r.to_json(out / f"{args.kind}_{i}.json")
        tag = json.dumps({k: v for k, v in r.metadata.items() if k in
                          ("seen_pct", "variant", "perturb_x", "drop_fraction")}, sort_keys=True)
        rows += [(*row, tag) for row in r.rows()]
    with open(out / f"{args.kind}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "point", "lo", "hi", "group", "run"])
        w.writerows(rows)
    for r in reports:
        print(f"{r.metadata}: MAE {r.mae:.4f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--seen-pct", type=float)
    common.add_argument("--horizon", type=int, help="forecast steps and history length (default 12)")
    common.add_argument("--layers", type=int, help="message-passing layers (default 10)")
    common.add_argument("--anchors", type=int, help="positional anchors (default 16)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="frigate", description="Road-network forecasting with partial sensing.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("embed", parents=[common], help="anchor embeddings of a network")
    s.add_argument("--data", required=True, help="directory with nodes.csv and edges.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_embed)

    s = sub.add_parser("generate", parents=[common], help="synthetic trip-count stream")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("bucketize", parents=[common], help="bucket raw timestamped readings")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bucket-seconds", type=float, default=300.0)
    s.add_argument("--origin", type=float, default=0.0)
    s.set_defaults(fn=cmd_bucketize)

    s = sub.add_parser("perturb", parents=[common], help="drop and add edges")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--x", type=float, default=10.0, help="total perturbation percent")
    s.add_argument("--threshold-km", type=float)
    s.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("train", parents=[common], help="train on a data directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="forecast CSV from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--t", help="comma-separated anchor buckets (default: last)")
    s.add_argument("--nodes", help="comma-separated node ids (default: unseen nodes)")
    s.add_argument("--window", type=int)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="unseen-node report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report path stem (.json and .csv)")
    s.add_argument("--segment", default="test", choices=["train", "val", "test"])
    s.add_argument("--perturb", type=float, default=0.0)
    s.add_argument("--drop-fraction", type=float, default=0.0)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("experiment", parents=[common], help="run an experiment family")
    s.add_argument("kind", choices=KINDS)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="data directory (default: synthetic from config)")
    s.add_argument("--checkpoint")
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.fn(args, cfg)
    except (DataError, GraphError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
