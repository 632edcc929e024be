"""Whole-model checkpoints in the ``SGCM`` section container.

Sections (4-byte tags):

- ``CONF``  canonical JSON: stack configs, resolution, fusion knobs, model
  metadata and the caller's run-config echo
- ``GRF1``, ``GRF2``  the two stochastic graphs (``SGCN``)
- ``WTS1``, ``WTS2``  Chebyshev layers then the stack fc (``SGCW``)
- ``TWT1``, ``TWT2``  optional separate temporal-branch weights
- ``FUSE``  fusion fc then classifier (``SGCW``), when trained
- ``SRCC``  source-phase classifier (``SGCW``), when present

Coarsening hierarchies are not stored: they are a deterministic function
of the graph and are rebuilt on load.
"""
from __future__ import annotations

import json
from pathlib import Path

from .cheb_conv import ChebLayer
from .errors import DataError
from .formats import (
    graph_from_bytes,
    graph_to_bytes,
    sections_from_bytes,
    sections_to_bytes,
    weights_from_bytes,
    weights_to_bytes,
)
from .grid_graph import coarsen
from .network import DualModel, FusionHead, Linear, SgcnConfig, SgcnModel


def _stack_weights(model: SgcnModel) -> bytes:
    layers = [(l.weights, l.bias) for l in model.layers]
    layers.append((model.fc.weights, model.fc.bias))
    return weights_to_bytes(layers)


def _config_doc(cfg: SgcnConfig) -> dict:
    return {"layers": [list(l) for l in cfg.layers], "d_fc": cfg.d_fc, "dropout": cfg.dropout,
            "in_channels": cfg.in_channels, "use_bias": cfg.use_bias}


def model_to_bytes(model: DualModel, run_config: dict | None = None) -> bytes:
    graphs = [model.sgcn1.hierarchy.levels[0][0], model.sgcn2.hierarchy.levels[0][0]]
    if graphs[0].shape is None:
        raise DataError("checkpoint needs grid graphs with a known pixel shape")
    h, w = graphs[0].shape
    conf = {
        "sgcn1": _config_doc(model.sgcn1.config),
        "sgcn2": _config_doc(model.sgcn2.config),
        "resolution": [h, w],
        "coarsen_seeds": [model.sgcn1.hierarchy.seed, model.sgcn2.hierarchy.seed],
        "branches": model.branches,
        "row_vote": model.row_vote,
        "separate_temporal_weights": model.temporal_stacks is not None,
        "meta": model.meta,
        "run_config": run_config,
    }
    sections = [(b"CONF", json.dumps(conf, sort_keys=True, separators=(",", ":")).encode()),
                (b"GRF1", graph_to_bytes(graphs[0])),
                (b"GRF2", graph_to_bytes(graphs[1])),
                (b"WTS1", _stack_weights(model.sgcn1)),
                (b"WTS2", _stack_weights(model.sgcn2))]
    if model.temporal_stacks is not None:
        sections += [(b"TWT1", _stack_weights(model.temporal_stacks[0])),
                     (b"TWT2", _stack_weights(model.temporal_stacks[1]))]
    if model.head is not None:
        sections.append((b"FUSE", weights_to_bytes([
            (model.head.fc.weights, model.head.fc.bias),
            (model.head.classifier.weights, model.head.classifier.bias)])))
    if model.source_head is not None:
        sections.append((b"SRCC", weights_to_bytes([(model.source_head.weights,
                                                     model.source_head.bias)])))
    return sections_to_bytes(sections)


def _restore_stack(cfg: SgcnConfig, graph, coarsen_seed: int, payload: bytes) -> SgcnModel:
    hierarchy = coarsen(graph, cfg.total_levels, seed=coarsen_seed)
    layers = weights_from_bytes(payload)
    if len(layers) != len(cfg.layers) + 1:
        raise DataError(f"weight block has {len(layers)} layers, config needs "
                        f"{len(cfg.layers) + 1}")
    cheb = [ChebLayer(w, b, cfg.use_bias) for w, b in layers[:-1]]
    fc_w, fc_b = layers[-1]
    return SgcnModel(config=cfg, hierarchy=hierarchy, layers=cheb, fc=Linear(fc_w[0], fc_b),
                     graph_params=graph.params)


def model_from_bytes(data: bytes) -> tuple[DualModel, dict | None]:
    """Decode a checkpoint; returns the model and the stored run-config echo."""
    sec = sections_from_bytes(data)
    missing = [t for t in (b"CONF", b"GRF1", b"GRF2", b"WTS1", b"WTS2") if t not in sec]
    if missing:
        raise DataError(f"checkpoint is missing section(s) {[t.decode() for t in missing]}")
    try:
        conf = json.loads(sec[b"CONF"].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt CONF section ({exc})") from None
    shape = tuple(conf["resolution"])
    graphs = [graph_from_bytes(sec[b"GRF1"], shape), graph_from_bytes(sec[b"GRF2"], shape)]
    cfgs = [SgcnConfig(**{**conf[k], "layers": tuple(tuple(l) for l in conf[k]["layers"])})
            for k in ("sgcn1", "sgcn2")]
    seeds = conf["coarsen_seeds"]
    s1 = _restore_stack(cfgs[0], graphs[0], seeds[0], sec[b"WTS1"])
    s2 = _restore_stack(cfgs[1], graphs[1], seeds[1], sec[b"WTS2"])
    model = DualModel(s1, s2, branches=conf["branches"], row_vote=conf["row_vote"])
    if b"TWT1" in sec:
        model.temporal_stacks = (
            _restore_stack(cfgs[0], graphs[0], seeds[0], sec[b"TWT1"]),
            _restore_stack(cfgs[1], graphs[1], seeds[1], sec[b"TWT2"]))
    if b"FUSE" in sec:
        (fw, fb), (cw, cb) = weights_from_bytes(sec[b"FUSE"])
        model.head = FusionHead(Linear(fw[0], fb), Linear(cw[0], cb))
    if b"SRCC" in sec:
        ((sw, sb),) = weights_from_bytes(sec[b"SRCC"])
        model.source_head = Linear(sw[0], sb)
    model.meta = dict(conf["meta"])
    return model, conf.get("run_config")


def save_model(model: DualModel, path, run_config: dict | None = None) -> None:
    Path(path).write_bytes(model_to_bytes(model, run_config))


def load_model(path) -> tuple[DualModel, dict | None]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from None
    return model_from_bytes(data)
