"""End-to-end runs driven by a RunConfig: data, model, both training phases,
evaluation, ablation rows and checkpoints."""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_model
from .config import RunConfig
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, stratified_split
from .errors import InvalidConfigError
from .grid_graph import GraphParams
from .network import DualModel, SgcnConfig, build_dual_model
from .optical_flow import FlowConfig
from .train import (
    EvalReport,
    FocalParams,
    History,
    TrainConfig,
    evaluate,
    fine_tune_target,
    train_source,
)
from .videos import VideoSet, prepare_videos, source_images

ABLATION_ROWS = {
    "spatial_ce": ("spatial", "ce"),
    "temporal_ce": ("temporal", "ce"),
    "fused_ce": ("both", "ce"),
    "fused_fl": ("both", "focal"),
}
ABLATION_ORDER = ("fused_fl", "fused_ce", "spatial_ce", "temporal_ce")
REACH_BAR = 0.9


# ---------------------------------------------------------------- data

def synthetic_spec(cfg: RunConfig, variant: str) -> SyntheticSpec:
    d = cfg.data
    target = variant == "micro"
    return SyntheticSpec(
        n_classes=d.n_classes,
        samples_per_class=d.samples_per_class if target else d.source_samples_per_class,
        resolution=tuple(cfg.network.resolution),
        frames=d.frames,
        amplitudes=tuple(d.amplitudes) if d.amplitudes else None,
        intensity=tuple(d.intensity),
        ratios=tuple(d.ratios) if (d.ratios and target) else None,
        noise_sigma=d.noise_sigma,
        blob_sigma=d.blob_sigma,
        start_jitter=d.start_jitter if target else d.source_start_jitter,
        angle_jitter=d.angle_jitter,
        variant=variant,
        test_fraction=d.test_fraction if target else 0.0,
        seed=cfg.seed_for("data_target" if target else "data_source"),
    )


def load_target(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train/test split of the target (micro) data."""
    if cfg.data.root:
        full = load_dataset(cfg.data.root)
        rng = np.random.default_rng(cfg.seed_for("data_target"))
        tr, te = stratified_split(full.labels, cfg.data.test_fraction, rng)
        return full.subset(tr), full.subset(te)
    return generate_synthetic(synthetic_spec(cfg, "micro"))


def load_source(cfg: RunConfig) -> Dataset:
    if cfg.data.source_root:
        return load_dataset(cfg.data.source_root)
    return generate_synthetic(synthetic_spec(cfg, "macro"))[0]


def flow_config(cfg: RunConfig) -> FlowConfig:
    f = cfg.flow
    return FlowConfig(alpha=f.alpha, iterations=f.iterations, m_s=f.m_s, m_t=f.m_t)


def prepare(cfg: RunConfig, dataset: Dataset) -> VideoSet:
    return prepare_videos(dataset, flow_config(cfg), cfg.network.in_channels)


# ---------------------------------------------------------------- model and phases

def sgcn_config(cfg: RunConfig) -> SgcnConfig:
    n = cfg.network
    return SgcnConfig(layers=tuple(tuple(l) for l in n.layers), d_fc=n.d_fc,
                      dropout=n.dropout, in_channels=n.in_channels, use_bias=n.bias)


def graph_params(cfg: RunConfig, which: int) -> GraphParams:
    g = cfg.graph1 if which == 1 else cfg.graph2
    return GraphParams(p=g.p, q=g.q, threshold=g.threshold, seed=cfg.seed_for(f"graph{which}"))


def build_model(cfg: RunConfig) -> DualModel:
    h, w = cfg.network.resolution
    net = sgcn_config(cfg)
    model = build_dual_model(h, w, net, graph_params(cfg, 1), net, graph_params(cfg, 2),
                             init_seed=cfg.seed_for("init"),
                             coarsen_seeds=(cfg.seed_for("coarsen1"), cfg.seed_for("coarsen2")))
    model.branches = cfg.network.branches
    model.row_vote = cfg.network.row_vote
    return model


def source_train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(max_epochs=t.source_max_epochs or t.max_epochs, patience=t.patience,
                       batch_size=t.batch_size, loss=t.source_loss,
                       focal=FocalParams(t.focal_alpha, t.focal_gamma),
                       lr=t.source_lr if t.source_lr is not None else t.lr, decay=t.decay,
                       decay_mode=t.decay_mode, phase="source", min_delta=t.min_delta,
                       seed=cfg.seed_for("source_train"))


def target_train_config(cfg: RunConfig, loss: str | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(max_epochs=t.max_epochs, patience=t.patience, batch_size=t.batch_size,
                       loss=loss or t.loss, focal=FocalParams(t.focal_alpha, t.focal_gamma),
                       lr=t.lr, decay=t.decay, decay_mode=t.decay_mode, phase="target",
                       unfreeze=t.unfreeze, min_delta=t.min_delta,
                       seed=cfg.seed_for("target_train"))


def pretrain(cfg: RunConfig, source: Dataset | None = None,
             model: DualModel | None = None) -> tuple[DualModel, History]:
    source = source if source is not None else load_source(cfg)
    model = model if model is not None else build_model(cfg)
    images, labels = source_images(source, cfg.network.in_channels)
    history = train_source(model, images, labels, source_train_config(cfg), source.n_classes)
    model.meta["source_classes"] = list(source.class_names)
    return model, history


def fine_tune(cfg: RunConfig, model: DualModel, train_videos: VideoSet,
              eval_videos: VideoSet | None = None, branches: str | None = None,
              loss: str | None = None) -> History:
    if cfg.network.separate_temporal_weights and model.temporal_stacks is None:
        model.separate_temporal_weights()
    history = fine_tune_target(model, train_videos, target_train_config(cfg, loss),
                               branches=branches or cfg.network.branches,
                               row_vote_mode=cfg.network.row_vote, d_fc3=cfg.network.d_fc3,
                               eval_videos=eval_videos)
    model.meta["class_names"] = list(train_videos.class_names)
    return history


# ---------------------------------------------------------------- ablation

@dataclass
class AblationRow:
    name: str
    branches: str
    loss: str
    accuracy: float
    epochs_to_bar: int | None
    epochs: int

    def as_dict(self) -> dict:
        return {"row": self.name, "branches": self.branches, "loss": self.loss,
                "accuracy": self.accuracy, "epochs_to_90": self.epochs_to_bar,
                "epochs": self.epochs}


def run_ablation(cfg: RunConfig, pretrained: DualModel, train_videos: VideoSet,
                 test_videos: VideoSet, rows=tuple(ABLATION_ROWS)) -> list[AblationRow]:
    """Fine-tune a fresh head on ``pretrained`` for each named row."""
    out = []
    for name in rows:
        if name not in ABLATION_ROWS:
            raise InvalidConfigError(f"unknown ablation row {name!r}; "
                                     f"choose from {sorted(ABLATION_ROWS)}")
        branches, loss = ABLATION_ROWS[name]
        model = copy.deepcopy(pretrained)
        model.head = None
        hist = fine_tune(cfg, model, train_videos, test_videos, branches, loss)
        acc = evaluate(model, test_videos).accuracy
        out.append(AblationRow(name, branches, loss, acc, hist.epochs_to_reach(REACH_BAR),
                               len(hist)))
    return out


def random_init_rows(cfg: RunConfig, train_videos: VideoSet, test_videos: VideoSet,
                     rows=("fused_fl",)) -> list[AblationRow]:
    """Ablation rows on untrained stacks: the baseline for measuring transfer."""
    return run_ablation(cfg, build_model(cfg), train_videos, test_videos, rows)


@dataclass
class TransferStudy:
    """Ablation rows for pretrained and randomly initialized stacks over seeds."""
    seeds: list[int]
    pretrained: list[list[AblationRow]]
    random_init: list[list[AblationRow]]

    @staticmethod
    def _means(per_seed: list[list[AblationRow]], bar_miss: int) -> dict:
        out = {}
        for row in per_seed[0]:
            same = [r for rows in per_seed for r in rows if r.name == row.name]
            out[row.name] = {
                "accuracy": float(np.mean([r.accuracy for r in same])),
                "epochs_to_bar": float(np.mean([bar_miss if r.epochs_to_bar is None
                                                else r.epochs_to_bar for r in same])),
            }
        return out

    def summary(self, bar_miss: int) -> dict:
        """Per-row means; a run that never reaches the bar counts ``bar_miss`` epochs."""
        return {"seeds": self.seeds, "bar": REACH_BAR, "bar_miss_epochs": bar_miss,
                "pretrained": self._means(self.pretrained, bar_miss),
                "random_init": self._means(self.random_init, bar_miss)}


def transfer_study(cfg: RunConfig, seeds, rows=tuple(ABLATION_ROWS),
                   random_rows=("fused_fl",), progress=None) -> TransferStudy:
    """Pre-train per seed, then fine-tune each ablation row on pretrained and on
    untrained stacks with identical data, graphs and head initialization."""
    study = TransferStudy(list(seeds), [], [])
    for seed in seeds:
        run_cfg = cfg.with_overrides([f"seed={seed}"])
        model, _ = pretrain(run_cfg)
        train, test = load_target(run_cfg)
        train_v, test_v = prepare(run_cfg, train), prepare(run_cfg, test)
        study.pretrained.append(run_ablation(run_cfg, model, train_v, test_v, rows))
        study.random_init.append(random_init_rows(run_cfg, train_v, test_v, random_rows))
        if progress is not None:
            progress(seed, study.pretrained[-1], study.random_init[-1])
    return study


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "branches", "loss", "accuracy", "epochs_to_90", "epochs"])
        for r in rows:
            w.writerow([r.name, r.branches, r.loss, repr(r.accuracy),
                        "" if r.epochs_to_bar is None else r.epochs_to_bar, r.epochs])


# ---------------------------------------------------------------- full run

def run_pipeline(cfg: RunConfig, out_dir) -> EvalReport:
    """Pre-train, fine-tune and evaluate; every artifact lands in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out)
    model, src_hist = pretrain(cfg)
    src_hist.to_csv(out / "source_history.csv")
    save_model(model, out / "source.sgcm", cfg.to_dict())
    train, test = load_target(cfg)
    train_v, test_v = prepare(cfg, train), prepare(cfg, test)
    tgt_hist = fine_tune(cfg, model, train_v, test_v)
    tgt_hist.to_csv(out / "target_history.csv")
    save_model(model, out / "model.sgcm", cfg.to_dict())
    report = evaluate(model, test_v)
    report.write(out)
    return report


def write_config(cfg: RunConfig, out_dir) -> None:
    Path(out_dir, "config.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
