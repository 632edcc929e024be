"""SGCN stacks, the dual (two-graph) feature extractor and the fusion head.

Every trainable array is exposed through ``parameters()`` as a flat,
ordered ``name -> ndarray`` mapping; optimizers update those arrays in
place and backward passes return gradients under the same names.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .cheb_conv import (
    ChebLayer,
    cheb_backward,
    cheb_forward,
    glorot_limit,
    graph_max_pool,
    graph_max_pool_backward,
    relu,
    relu_backward,
)
from .errors import InvalidConfigError, InvalidInputError
from .grid_graph import CoarseningHierarchy, GraphParams, build_stochastic_graph, coarsen

TABLE_I_LAYERS = ((9, 32, 2), (9, 32, 2), (6, 64, 1), (6, 64, 1), (4, 128, 1), (4, 128, 1))
ROW_VOTES = ("mean", "max")
BRANCHES = ("spatial", "temporal", "both")


@dataclass(frozen=True)
class SgcnConfig:
    layers: tuple[tuple[int, int, int], ...] = TABLE_I_LAYERS
    d_fc: int = 512
    dropout: float = 0.5
    in_channels: int = 2
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        if not self.layers:
            raise InvalidConfigError("at least one SGCN layer is required")
        for k, d, s in self.layers:
            if k < 1 or d < 1 or s < 0:
                raise InvalidConfigError(f"invalid layer (K={k}, d={d}, s={s})")
        if self.d_fc < 1 or self.in_channels < 1:
            raise InvalidConfigError("d_fc and in_channels must be >= 1")
        if not 0 <= self.dropout < 1:
            raise InvalidConfigError(f"dropout rate must be in [0, 1), got {self.dropout}")

    @property
    def total_levels(self) -> int:
        return sum(s for _, _, s in self.layers)


# --------------------------------------------------------------------------
# dense pieces
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Linear:
    weights: np.ndarray  # (F_in, F_out)
    bias: np.ndarray

    @classmethod
    def init(cls, f_in: int, f_out: int, rng: np.random.Generator) -> "Linear":
        lim = glorot_limit(f_in, f_out)
        return cls(rng.uniform(-lim, lim, size=(f_in, f_out)), np.zeros(f_out))

    def forward(self, x):
        return x @ self.weights + self.bias

    def backward(self, x, grad):
        """Returns ``(grad_x, grad_w, grad_b)``."""
        return grad @ self.weights.T, x.T @ grad, grad.sum(axis=0)


def dropout_forward(x: np.ndarray, rate: float, rng=None, train: bool = True):
    """Inverted dropout.  Returns ``(y, mask)``; ``mask`` is None in eval mode."""
    if not 0 <= rate < 1:
        raise InvalidConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad if mask is None else grad * mask


# --------------------------------------------------------------------------
# one SGCN stack
# --------------------------------------------------------------------------

@dataclass(eq=False)
class SgcnModel:
    config: SgcnConfig
    hierarchy: CoarseningHierarchy
    layers: list[ChebLayer]
    fc: Linear
    graph_params: GraphParams | None = None

    @classmethod
    def build(cls, config: SgcnConfig, height: int, width: int, params: GraphParams,
              rng: np.random.Generator, coarsen_seed: int = 0) -> "SgcnModel":
        graph = build_stochastic_graph(height, width, params)
        hierarchy = coarsen(graph, config.total_levels, seed=coarsen_seed)
        return cls.from_hierarchy(config, hierarchy, rng, params)

    @classmethod
    def from_hierarchy(cls, config, hierarchy, rng, params=None) -> "SgcnModel":
        if hierarchy.n_levels != config.total_levels:
            raise InvalidConfigError(
                f"hierarchy has {hierarchy.n_levels} levels, config needs {config.total_levels}")
        layers = []
        f_in = config.in_channels
        for k, d, _ in config.layers:
            layers.append(ChebLayer.init(k, f_in, d, rng, use_bias=config.use_bias))
            f_in = d
        n_last = hierarchy.padded_size(hierarchy.n_levels)
        fc = Linear.init(n_last * f_in, config.d_fc, rng)
        return cls(config=config, hierarchy=hierarchy, layers=layers, fc=fc, graph_params=params)

    @property
    def n_pixels(self) -> int:
        return self.hierarchy.levels[0][0].n_vertices

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"cheb{i}.weights"] = layer.weights
            out[f"cheb{i}.bias"] = layer.bias
        out["fc.weights"] = self.fc.weights
        out["fc.bias"] = self.fc.bias
        return out

    def layer_levels(self) -> list[tuple[int, int]]:
        """``(input level, output level)`` of each layer."""
        levels, lvl = [], 0
        for _, _, s in self.config.layers:
            levels.append((lvl, lvl + s))
            lvl += s
        return levels

    def vertex_chain(self) -> list[int]:
        """Padded vertex count entering each layer, then after the last pooling."""
        lv = self.layer_levels()
        return [self.hierarchy.padded_size(a) for a, _ in lv] + [
            self.hierarchy.padded_size(lv[-1][1])]

    def forward(self, x: np.ndarray, train: bool = False, rng=None):
        """Pixel-order input ``(batch, n_pixels, channels)`` -> ``(batch, d_fc)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape[1] != self.n_pixels or x.shape[2] != self.config.in_channels:
            raise InvalidConfigError(
                f"input {x.shape[1:]} does not match model ({self.n_pixels}, "
                f"{self.config.in_channels})")
        h = self.hierarchy.permute_signal(x)
        caches = []
        masks = self.hierarchy.real_masks
        for layer, (lin, lout) in zip(self.layers, self.layer_levels()):
            pre, cc = cheb_forward(self.hierarchy.laplacian(lin), h, layer)
            act = relu(pre)
            pooled, argmax = graph_max_pool(act, 2 ** (lout - lin), masks[lin])
            caches.append((cc, pre, argmax, act.shape[0]))
            h = pooled
        n_last = h.shape[0]
        h = h * masks[-1][:, None, None]
        flat = np.transpose(h, (1, 0, 2)).reshape(h.shape[1], -1)
        pre_fc = self.fc.forward(flat)
        act_fc = relu(pre_fc)
        out, drop_mask = dropout_forward(act_fc, self.config.dropout, rng, train)
        cache = dict(layers=caches, flat=flat, pre_fc=pre_fc, drop=drop_mask,
                     last_shape=(n_last, h.shape[1], h.shape[2]))
        return out, cache

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        g = dropout_backward(grad_out, cache["drop"])
        g = relu_backward(cache["pre_fc"], g)
        g_flat, grads["fc.weights"], grads["fc.bias"] = self.fc.backward(cache["flat"], g)
        n_last, batch, ch = cache["last_shape"]
        g = np.transpose(g_flat.reshape(batch, n_last, ch), (1, 0, 2))
        g = g * self.hierarchy.real_masks[-1][:, None, None]
        for i in range(len(self.layers) - 1, -1, -1):
            cc, pre, argmax, n_in = cache["layers"][i]
            g = graph_max_pool_backward(g, argmax, n_in)
            g = relu_backward(pre, g)
            g, grads[f"cheb{i}.weights"], grads[f"cheb{i}.bias"] = cheb_backward(
                cc, g, need_input_grad=i > 0)
        return grads


def sgcn_forward(model: SgcnModel, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
    return model.forward(x, train=train, rng=rng)[0]


# --------------------------------------------------------------------------
# dual extractor and fusion head
# --------------------------------------------------------------------------

@dataclass(eq=False)
class FusionHead:
    """Row features -> fused fc (ReLU) -> linear classifier -> row logits."""

    fc: Linear
    classifier: Linear

    @classmethod
    def init(cls, d_in: int, d_fc3: int, n_classes: int, rng) -> "FusionHead":
        return cls(Linear.init(d_in, d_fc3, rng), Linear.init(d_fc3, n_classes, rng))

    @property
    def d_in(self) -> int:
        return self.fc.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.classifier.weights.shape[1]

    def parameters(self):
        return {"fc.weights": self.fc.weights, "fc.bias": self.fc.bias,
                "cls.weights": self.classifier.weights, "cls.bias": self.classifier.bias}

    def forward(self, rows: np.ndarray):
        pre = self.fc.forward(rows)
        hidden = relu(pre)
        return self.classifier.forward(hidden), (rows, pre, hidden)

    def backward(self, cache, grad_logits):
        rows, pre, hidden = cache
        grads = {}
        g, grads["cls.weights"], grads["cls.bias"] = self.classifier.backward(hidden, grad_logits)
        g = relu_backward(pre, g)
        g_rows, grads["fc.weights"], grads["fc.bias"] = self.fc.backward(rows, g)
        return g_rows, grads


def row_vote(row_logits: np.ndarray, mode: str = "mean"):
    """``(videos, rows, classes)`` -> ``(videos, classes)``; returns ``(logits, cache)``."""
    if mode == "mean":
        return row_logits.mean(axis=1), ("mean", row_logits.shape, None)
    if mode == "max":
        idx = np.argmax(row_logits, axis=1)
        return np.take_along_axis(row_logits, idx[:, None], axis=1)[:, 0], (
            "max", row_logits.shape, idx)
    raise InvalidConfigError(f"row vote must be one of {ROW_VOTES}, got {mode!r}")


def row_vote_backward(cache, grad):
    mode, shape, idx = cache
    if mode == "mean":
        return np.broadcast_to(grad[:, None, :] / shape[1], shape).copy()
    out = np.zeros(shape)
    np.put_along_axis(out, idx[:, None], grad[:, None], axis=1)
    return out


def fuse_branches(spatial: np.ndarray, temporal: np.ndarray | None, head: FusionHead):
    """Row-stack spatial and temporal features and map each row to logits."""
    spatial = np.asarray(spatial, dtype=np.float64)
    rows = spatial if temporal is None or len(temporal) == 0 else np.vstack(
        [spatial, np.asarray(temporal, dtype=np.float64)])
    if rows.shape[-1] != head.d_in:
        raise InvalidInputError(f"feature width {rows.shape[-1]} != fusion input {head.d_in}")
    return head.forward(rows)[0]


@dataclass(eq=False)
class DualModel:
    sgcn1: SgcnModel
    sgcn2: SgcnModel
    head: FusionHead | None = None
    source_head: Linear | None = None
    temporal_stacks: tuple[SgcnModel, SgcnModel] | None = None
    branches: str = "both"
    row_vote: str = "mean"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sgcn1.n_pixels != self.sgcn2.n_pixels:
            raise InvalidConfigError("sgcn1 and sgcn2 must share the input resolution")

    @property
    def feature_width(self) -> int:
        return self.sgcn1.config.d_fc + self.sgcn2.config.d_fc

    def stacks(self, temporal: bool = False):
        if temporal and self.temporal_stacks is not None:
            return self.temporal_stacks
        return self.sgcn1, self.sgcn2

    def separate_temporal_weights(self):
        """Give the temporal branch its own copy of the transferred stacks."""
        self.temporal_stacks = (copy.deepcopy(self.sgcn1), copy.deepcopy(self.sgcn2))

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, model in (("sgcn1", self.sgcn1), ("sgcn2", self.sgcn2)):
            out.update({f"{prefix}.{k}": v for k, v in model.parameters().items()})
        if self.temporal_stacks is not None:
            for prefix, model in zip(("temporal.sgcn1", "temporal.sgcn2"), self.temporal_stacks):
                out.update({f"{prefix}.{k}": v for k, v in model.parameters().items()})
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        if self.source_head is not None:
            out["source.weights"] = self.source_head.weights
            out["source.bias"] = self.source_head.bias
        return out

    def features(self, x: np.ndarray, train: bool = False, rng=None, temporal: bool = False):
        """Concatenated ``[sgcn1(x), sgcn2(x)]`` features and a backward cache."""
        s1, s2 = self.stacks(temporal)
        f1, c1 = s1.forward(x, train=train, rng=rng)
        f2, c2 = s2.forward(x, train=train, rng=rng)
        return np.hstack([f1, f2]), (c1, c2, f1.shape[1], temporal)

    def features_backward(self, cache, grad):
        c1, c2, d1, temporal = cache
        s1, s2 = self.stacks(temporal)
        prefix = "temporal." if temporal and self.temporal_stacks is not None else ""
        grads = {f"{prefix}sgcn1.{k}": v for k, v in s1.backward(c1, grad[:, :d1]).items()}
        grads.update({f"{prefix}sgcn2.{k}": v for k, v in s2.backward(c2, grad[:, d1:]).items()})
        return grads


def dual_forward(model: DualModel, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
    return model.features(x, train=train, rng=rng)[0]


def build_dual_model(height: int, width: int, config1: SgcnConfig, params1: GraphParams,
                     config2: SgcnConfig, params2: GraphParams, init_seed: int,
                     coarsen_seeds: tuple[int, int] = (0, 0)) -> DualModel:
    rng = np.random.default_rng(init_seed)
    s1 = SgcnModel.build(config1, height, width, params1, rng, coarsen_seeds[0])
    s2 = SgcnModel.build(config2, height, width, params2, rng, coarsen_seeds[1])
    return DualModel(s1, s2)
