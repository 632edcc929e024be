"""Command-line entry point: ``stochgcn <command> [--config F] [--set k=v ...] --out DIR``.

Every command echoes the resolved config on stdout and into
``<out>/config.json``; feeding that file back through ``--config``
reproduces the run.  Failures print one JSON line on stderr and exit with
2 (config), 3 (data) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_model, save_model
from .config import PRESETS, RunConfig
from .data import Dataset, imbalance_profile, kfold_indices, save_dataset
from .errors import DataError, InvalidConfigError, InvalidInputError, NumericError
from .formats import FORMAT_VERSIONS, flow_to_bytes, save_graph
from .grid_graph import build_stochastic_graph, estimate_lambda_max, normalized_laplacian
from .optical_flow import flow_magnitude_stats, horn_schunck
from . import pipeline as pl
from .train import evaluate

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")
    raise SystemExit(code)


# ---------------------------------------------------------------- config plumbing

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    sets = list(PRESETS[args.preset]) if args.preset else []
    if args.no_bias:
        sets.append("network.bias=false")
    if args.row_vote:
        sets.append(f"network.row_vote={args.row_vote}")
    if args.separate_temporal_weights:
        sets.append("network.separate_temporal_weights=true")
    if args.unfreeze:
        sets.append(f"train.unfreeze={args.unfreeze}")
    if args.decay_mode:
        sets.append(f"train.decay_mode={args.decay_mode}")
    if args.threads:
        sets.append(f"train.threads={args.threads}")
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    return cfg.with_overrides(sets + list(args.set or []))


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pl.write_config(cfg, out)
    print(cfg.canonical_json())


def _target_videos(cfg: RunConfig):
    train, test = pl.load_target(cfg)
    return pl.prepare(cfg, train), pl.prepare(cfg, test)


def _source_model(cfg: RunConfig, path):
    if path:
        return load_model(path)[0]
    return pl.pretrain(cfg)[0]


# ---------------------------------------------------------------- commands

def cmd_build_graph(cfg: RunConfig, args, out: Path) -> None:
    h, w = cfg.network.resolution
    summary = {}
    for which in (1, 2):
        params = pl.graph_params(cfg, which)
        graph = build_stochastic_graph(h, w, params)
        save_graph(graph, out / f"graph{which}.sgcn")
        lap = normalized_laplacian(graph)
        summary[f"graph{which}"] = {
            "label": params.label, "seed": params.seed, "n_vertices": graph.n_vertices,
            "n_edges": int(graph.edges()[0].size), "sigma": graph.sigma,
            "lambda_max": estimate_lambda_max(lap)}
    (out / "graphs.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


def cmd_gen_synthetic(cfg: RunConfig, args, out: Path) -> None:
    if args.variant == "macro":
        save_dataset(pl.load_source(cfg), out / "source")
        return
    train, test = pl.load_target(cfg)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    prof = imbalance_profile(Dataset(train.samples + test.samples, train.class_names))
    (out / "profile.json").write_text(json.dumps(
        {"counts": list(prof.counts), "ratio": prof.ratio, "n_train": len(train),
         "n_test": len(test)}, sort_keys=True, indent=2) + "\n")


def cmd_flow_stats(cfg: RunConfig, args, out: Path) -> None:
    train, test = pl.load_target(cfg)
    data = Dataset(train.samples + test.samples, train.class_names)
    f = cfg.flow
    with open(out / "flow_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "mean", "variance"])
        means = []
        for s in data.samples:
            stats = flow_magnitude_stats(s.frames, f.alpha, f.iterations)
            means.append(stats.mean)
            w.writerow([s.id, data.class_names[s.label], repr(stats.mean), repr(stats.variance)])
    (out / "flow_summary.json").write_text(json.dumps(
        {"n_samples": len(data), "mean_magnitude": float(np.mean(means))},
        sort_keys=True, indent=2) + "\n")
    if args.dump:
        sample = next((s for s in data.samples if s.id == args.dump), None)
        if sample is None:
            raise DataError(f"no sample with id {args.dump!r}")
        flow = horn_schunck(sample.frames[0], sample.frames[1], f.alpha, f.iterations)
        (out / f"{args.dump}.sgcf").write_bytes(flow_to_bytes(flow.u, flow.v))


def cmd_train_source(cfg: RunConfig, args, out: Path) -> None:
    model, hist = pl.pretrain(cfg)
    hist.to_csv(out / "source_history.csv")
    save_model(model, out / "source.sgcm", cfg.to_dict())


def cmd_fine_tune(cfg: RunConfig, args, out: Path) -> None:
    model = _source_model(cfg, args.model)
    train_v, test_v = _target_videos(cfg)
    model.head = None
    hist = pl.fine_tune(cfg, model, train_v, test_v)
    hist.to_csv(out / "target_history.csv")
    save_model(model, out / "model.sgcm", cfg.to_dict())
    evaluate(model, test_v).write(out)


def cmd_eval(cfg: RunConfig, args, out: Path) -> None:
    model, _ = load_model(args.model)
    if model.head is None:
        raise InvalidConfigError(f"{args.model} has no fusion head; run fine-tune first")
    _, test_v = _target_videos(cfg)
    evaluate(model, test_v).write(out)


def cmd_ablate(cfg: RunConfig, args, out: Path) -> None:
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    model = _source_model(cfg, args.model)
    train_v, test_v = _target_videos(cfg)
    pl.write_ablation_csv(pl.run_ablation(cfg, model, train_v, test_v, rows),
                          out / "ablation.csv")


def cmd_kfold(cfg: RunConfig, args, out: Path) -> None:
    model = _source_model(cfg, args.model)
    train, test = pl.load_target(cfg)
    full = Dataset(train.samples + test.samples, train.class_names)
    videos = pl.prepare(cfg, full)
    folds = kfold_indices(videos.labels, args.k, cfg.seed_for("data_target"))
    with open(out / "kfold.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "n_train", "n_test", "accuracy"])
        accs = []
        for i, (tr, te) in enumerate(folds):
            m = copy.deepcopy(model)
            m.head = None
            pl.fine_tune(cfg, m, videos.subset(tr))
            acc = evaluate(m, videos.subset(te)).accuracy
            accs.append(acc)
            w.writerow([i, len(tr), len(te), repr(acc)])
        w.writerow(["mean", "", "", repr(float(np.mean(accs)))])


def cmd_run(cfg: RunConfig, args, out: Path) -> None:
    pl.run_pipeline(cfg, out)


COMMANDS = {
    "build-graph": (cmd_build_graph, "build both stochastic graphs and save them as SGCN files"),
    "gen-synthetic": (cmd_gen_synthetic, "write a synthetic dataset as PGM frames"),
    "flow-stats": (cmd_flow_stats, "per-sample optical-flow magnitude statistics"),
    "train-source": (cmd_train_source, "pre-train both stacks on the source data"),
    "fine-tune": (cmd_fine_tune, "train the fusion head on the target data"),
    "eval": (cmd_eval, "evaluate a fine-tuned checkpoint on the target test split"),
    "ablate": (cmd_ablate, "branch/loss ablation rows on one pre-trained model"),
    "kfold": (cmd_kfold, "stratified k-fold fine-tuning accuracy"),
    "run": (cmd_run, "pre-train, fine-tune and evaluate in one go"),
}


def build_parser() -> argparse.ArgumentParser:
    versions = " ".join(f"{k}={v}" for k, v in sorted(FORMAT_VERSIONS.items()))
    parser = _Parser(prog="stochgcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"stochgcn {__version__} ({versions})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field, e.g. train.lr=1e-3")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named bundle of overrides")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--threads", type=int, help="BLAS threads (default 1)")
        p.add_argument("--no-bias", action="store_true", help="drop Chebyshev/fc biases")
        p.add_argument("--row-vote", choices=("mean", "max"))
        p.add_argument("--separate-temporal-weights", action="store_true")
        p.add_argument("--unfreeze", choices=("none", "all"))
        p.add_argument("--decay-mode", choices=("lr", "l2"))
        if name in ("fine-tune", "ablate", "kfold"):
            p.add_argument("--model", help="pre-trained checkpoint (default: pre-train now)")
        if name == "eval":
            p.add_argument("--model", required=True, help="fine-tuned checkpoint")
        if name == "ablate":
            p.add_argument("--rows", default=",".join(pl.ABLATION_ROWS))
        if name == "kfold":
            p.add_argument("--k", type=int, default=5)
        if name == "gen-synthetic":
            p.add_argument("--variant", choices=("micro", "macro"), default="micro")
        if name == "flow-stats":
            p.add_argument("--dump", metavar="SAMPLE_ID",
                           help="also write the first-pair flow of this sample as SGCF")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        _echo(cfg, out)
        with threadpool_limits(limits=cfg.train.threads):
            COMMANDS[args.command][0](cfg, args, out)
    except InvalidConfigError as exc:
        _fail(EXIT_CONFIG, "config", str(exc))
    except (DataError, InvalidInputError) as exc:
        _fail(EXIT_DATA, "data", str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, "numeric", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
