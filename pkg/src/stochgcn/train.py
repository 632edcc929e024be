"""Losses, ADAM, source pre-training, target fine-tuning and evaluation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericError
from .network import DualModel, FusionHead, Linear, row_vote, row_vote_backward
from .videos import VideoSet

PROB_EPS = 1e-12
TRANSFERRED_PREFIXES = ("sgcn1.", "sgcn2.", "temporal.")
LOSSES = ("ce", "focal")
DECAY_MODES = ("lr", "l2")


# ---------------------------------------------------------------- losses

def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 1.5
    gamma: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise InvalidConfigError("focal alpha and gamma must be >= 0")


def _true_class_prob(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise InvalidInputError("probs must be (batch, classes) with one label per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= probs.shape[1]:
        raise InvalidInputError("label out of range")
    p_t = probs[np.arange(len(labels)), labels]
    return probs, labels, np.clip(p_t, PROB_EPS, 1.0 - PROB_EPS)


def cross_entropy(probs, labels):
    """Mean ``-log p_t``; returns ``(loss, grad wrt logits)``."""
    probs, labels, p_t = _true_class_prob(probs, labels)
    n = len(labels)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(np.mean(-np.log(p_t))), grad / n


def focal_loss(probs, labels, params: FocalParams):
    """Mean ``-alpha (1 - p_t)^gamma log p_t`` with ``p_t`` the true-class
    softmax probability; returns ``(loss, grad wrt logits)``.
    """
    probs, labels, p_t = _true_class_prob(probs, labels)
    n = len(labels)
    a, g = params.alpha, params.gamma
    log_p = np.log(p_t)
    one_minus = 1.0 - p_t
    loss = -a * one_minus ** g * log_p
    # d loss / d z = coef * (P - e_y) with coef = -p_t * dFL/dp_t
    coef = a * one_minus ** g
    if g != 0:
        coef = coef - a * g * one_minus ** (g - 1.0) * p_t * log_p
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss.mean()), grad * (coef / n)[:, None]


def loss_fn(kind: str, focal: FocalParams):
    if kind == "ce":
        return cross_entropy
    if kind == "focal":
        return lambda p, y: focal_loss(p, y, focal)
    raise InvalidConfigError(f"loss must be one of {LOSSES}, got {kind!r}")


# ---------------------------------------------------------------- optimizer

class Adam:
    """ADAM with inverse-time learning-rate decay ``lr / (1 + decay * t)``.

    ``decay_mode="l2"`` instead adds ``decay * param`` to each gradient and
    keeps the learning rate fixed.
    """

    def __init__(self, lr: float = 1e-5, decay: float = 1e-6, decay_mode: str = "lr",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if decay_mode not in DECAY_MODES:
            raise InvalidConfigError(f"decay_mode must be one of {DECAY_MODES}")
        self.lr, self.decay, self.decay_mode = lr, decay, decay_mode
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             frozen=lambda name: False) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name} at step {self.t + 1}")
        self.t += 1
        if self.decay_mode == "lr":
            lr_t = self.lr / (1.0 + self.decay * self.t)
        else:
            lr_t = self.lr
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if frozen(name) or name not in grads:
                continue
            g = grads[name]
            if self.decay_mode == "l2":
                g = g + self.decay * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------- config / history

@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    loss: str = "focal"
    focal: FocalParams = FocalParams()
    lr: float = 1e-5
    decay: float = 1e-6
    decay_mode: str = "lr"
    phase: str = "target"
    unfreeze: str = "none"
    frozen: tuple[str, ...] | None = None
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise InvalidConfigError("max_epochs, patience and batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise InvalidConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.decay_mode not in DECAY_MODES:
            raise InvalidConfigError(f"decay_mode must be one of {DECAY_MODES}")
        if self.phase not in ("source", "target"):
            raise InvalidConfigError(f"phase must be source or target, got {self.phase!r}")
        if self.unfreeze not in ("none", "all"):
            raise InvalidConfigError(f"unfreeze must be none or all, got {self.unfreeze!r}")

    def frozen_prefixes(self) -> tuple[str, ...]:
        """Parameter-name prefixes held fixed in this phase."""
        if self.phase == "source":
            return tuple(self.frozen or ())
        if self.frozen is None:
            return () if self.unfreeze == "all" else TRANSFERRED_PREFIXES
        if self.unfreeze != "all" and not all(
                any(f.startswith(p) or p.startswith(f) for f in self.frozen)
                for p in TRANSFERRED_PREFIXES[:2]):
            raise InvalidConfigError(
                "fine-tuning with transferred layers unfrozen requires unfreeze='all'")
        return tuple(self.frozen)


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def epochs_to_reach(self, accuracy: float, key: str = "eval_acc") -> int | None:
        for r in self.records:
            if r.get(key) is not None and r[key] >= accuracy:
                return r["epoch"]
        return None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "phase", "loss", "train_acc"])
            for r in self.records:
                w.writerow([r["epoch"], r["phase"], repr(r["loss"]), repr(r["train_acc"])])


class _EarlyStopping:
    def __init__(self, patience: int, min_delta: float):
        self.patience, self.min_delta = patience, min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, loss: float) -> bool:
        """Record an epoch loss; True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def _is_frozen(prefixes):
    return lambda name: any(name.startswith(p) for p in prefixes)


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss: float, epoch: int):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at epoch {epoch}")


# ---------------------------------------------------------------- source phase

def train_source(model: DualModel, images: np.ndarray, labels, cfg: TrainConfig,
                 n_classes: int | None = None) -> History:
    """Train both stacks plus a temporary linear classifier on single images."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise InvalidInputError("empty source dataset")
    n_classes = n_classes or int(labels.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    d = model.feature_width
    if model.source_head is None or model.source_head.weights.shape != (d, n_classes):
        model.source_head = Linear.init(d, n_classes, rng)
    params = model.parameters()
    frozen = _is_frozen(cfg.frozen_prefixes())
    opt = Adam(cfg.lr, cfg.decay, cfg.decay_mode)
    lossf = loss_fn(cfg.loss, cfg.focal)
    stopper = _EarlyStopping(cfg.patience, cfg.min_delta)
    history = History()
    for epoch in range(1, cfg.max_epochs + 1):
        total, correct = 0.0, 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            feats, cache = model.features(images[idx], train=True, rng=rng)
            logits = model.source_head.forward(feats)
            probs = softmax_probs(logits)
            loss, g = lossf(probs, labels[idx])
            _check_finite(loss, epoch)
            g_feat, gw, gb = model.source_head.backward(feats, g)
            grads = model.features_backward(cache, g_feat)
            grads["source.weights"], grads["source.bias"] = gw, gb
            opt.step(params, grads, frozen)
            total += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        record = dict(epoch=epoch, phase="source", loss=total / len(labels),
                      train_acc=correct / len(labels))
        history.records.append(record)
        if stopper.update(record["loss"]):
            history.stopped_early = epoch < cfg.max_epochs
            break
    return history


def source_accuracy(model: DualModel, images, labels) -> float:
    feats = model.features(images)[0]
    return float((model.source_head.forward(feats).argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------- target phase

def video_features(model: DualModel, videos: VideoSet, branches: str,
                   chunk: int = 64) -> np.ndarray:
    """Eval-mode row features ``(V, R, D)``."""
    rows, n_spatial = videos.rows(branches)
    v, r = rows.shape[:2]
    out = np.empty((v, r, model.feature_width))
    for part, temporal in ((slice(0, n_spatial), False), (slice(n_spatial, r), True)):
        x = rows[:, part].reshape((-1,) + rows.shape[2:])
        feats = np.empty((x.shape[0], model.feature_width))
        for i in range(0, x.shape[0], chunk):
            feats[i:i + chunk] = model.features(x[i:i + chunk], temporal=temporal)[0]
        out[:, part] = feats.reshape(v, -1, model.feature_width)
    return out


def head_logits(model: DualModel, feats: np.ndarray):
    """Row features ``(V, R, D)`` -> video logits ``(V, C)`` and caches."""
    v, r, d = feats.shape
    row_logits, hcache = model.head.forward(feats.reshape(v * r, d))
    logits, vcache = row_vote(row_logits.reshape(v, r, -1), model.row_vote)
    return logits, (hcache, vcache, (v, r, d))


def head_backward(model: DualModel, cache, grad_logits):
    hcache, vcache, shape = cache
    g_rows = row_vote_backward(vcache, grad_logits)
    g_feats, grads = model.head.backward(hcache, g_rows.reshape(shape[0] * shape[1], -1))
    return g_feats.reshape(shape), {f"head.{k}": v for k, v in grads.items()}


def predict_logits(model: DualModel, videos: VideoSet) -> np.ndarray:
    if model.head is None:
        raise InvalidConfigError("model has no fusion head; run fine-tuning first")
    return head_logits(model, video_features(model, videos, model.branches))[0]


def _full_step_grads(model, rows, n_spatial, labels, lossf, rng):
    """Forward/backward through stacks and head for one batch of videos."""
    v, r = rows.shape[:2]
    parts = []
    for sl, temporal in ((slice(0, n_spatial), False), (slice(n_spatial, r), True)):
        x = rows[:, sl].reshape((-1,) + rows.shape[2:])
        if x.shape[0]:
            feats, cache = model.features(x, train=True, rng=rng, temporal=temporal)
            parts.append((sl, feats.reshape(v, -1, feats.shape[1]), cache))
    feats = np.concatenate([p[1] for p in parts], axis=1)
    logits, hc = head_logits(model, feats)
    probs = softmax_probs(logits)
    loss, g = lossf(probs, labels)
    g_feats, grads = head_backward(model, hc, g)
    for sl, f, cache in parts:
        part_grad = g_feats[:, sl].reshape(-1, f.shape[2])
        for k, val in model.features_backward(cache, part_grad).items():
            grads[k] = grads[k] + val if k in grads else val
    return loss, probs, grads


def fine_tune_target(model: DualModel, videos: VideoSet, cfg: TrainConfig,
                     branches: str | None = None, row_vote_mode: str | None = None,
                     d_fc3: int = 256, eval_videos: VideoSet | None = None) -> History:
    """Train the fusion head on micro videos with the transferred stacks frozen.

    With ``cfg.unfreeze == "all"`` the stacks are updated too.  When
    ``eval_videos`` is given its accuracy is recorded each epoch.
    """
    if cfg.phase != "target":
        raise InvalidConfigError("fine_tune_target needs a target-phase TrainConfig")
    if len(videos) == 0:
        raise InvalidInputError("empty target dataset")
    if branches is not None:
        model.branches = branches
    if row_vote_mode is not None:
        model.row_vote = row_vote_mode
    prefixes = cfg.frozen_prefixes()
    frozen = _is_frozen(prefixes)
    rng = np.random.default_rng(cfg.seed)
    n_classes = videos.n_classes
    if model.head is None or model.head.d_in != model.feature_width \
            or model.head.n_classes != n_classes:
        model.head = FusionHead.init(model.feature_width, d_fc3, n_classes, rng)
    params = model.parameters()
    stacks_frozen = all(frozen(n) for n in params if n.startswith(TRANSFERRED_PREFIXES))
    opt = Adam(cfg.lr, cfg.decay, cfg.decay_mode)
    lossf = loss_fn(cfg.loss, cfg.focal)
    stopper = _EarlyStopping(cfg.patience, cfg.min_delta)
    labels = videos.labels
    history = History()
    feats_all = video_features(model, videos, model.branches) if stacks_frozen else None
    rows, n_spatial = (None, 0) if stacks_frozen else videos.rows(model.branches)
    eval_feats = None
    if eval_videos is not None and stacks_frozen:
        eval_feats = video_features(model, eval_videos, model.branches)
    for epoch in range(1, cfg.max_epochs + 1):
        total, correct = 0.0, 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            if stacks_frozen:
                logits, hc = head_logits(model, feats_all[idx])
                probs = softmax_probs(logits)
                loss, g = lossf(probs, labels[idx])
                grads = head_backward(model, hc, g)[1]
            else:
                loss, probs, grads = _full_step_grads(model, rows[idx], n_spatial,
                                                      labels[idx], lossf, rng)
            _check_finite(loss, epoch)
            opt.step(params, grads, frozen)
            total += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        record = dict(epoch=epoch, phase="target", loss=total / len(labels),
                      train_acc=correct / len(labels), eval_acc=None)
        if eval_videos is not None:
            logits = (head_logits(model, eval_feats)[0] if eval_feats is not None
                      else predict_logits(model, eval_videos))
            record["eval_acc"] = float((logits.argmax(axis=1) == eval_videos.labels).mean())
        history.records.append(record)
        if stopper.update(record["loss"]):
            history.stopped_early = epoch < cfg.max_epochs
            break
    model.meta["train_ids"] = list(videos.ids)
    return history


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows true, columns predicted
    class_names: list[str]

    @property
    def normalized(self) -> np.ndarray:
        sums = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(self.confusion, sums, out=np.zeros(self.confusion.shape),
                         where=sums > 0)

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "n_samples": int(self.confusion.sum()),
                "class_names": list(self.class_names),
                "confusion": self.confusion.tolist(),
                "confusion_normalized": self.normalized.tolist()}

    def write(self, out_dir, stem: str = "eval") -> None:
        out = Path(out_dir)
        (out / f"{stem}_summary.json").write_text(
            json.dumps(self.summary(), sort_keys=True, indent=2) + "\n")
        with open(out / f"{stem}_confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + list(self.class_names))
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name] + [int(x) for x in row])


def confusion_report(y_true, y_pred, class_names) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise InvalidInputError("empty test set")
    k = len(class_names)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return EvalReport(float(np.trace(conf) / conf.sum()), conf, list(class_names))


def evaluate(model, test_data) -> EvalReport:
    """Accuracy and confusion matrix of ``model.predict`` (or a DualModel) on ``test_data``."""
    if len(test_data) == 0:
        raise InvalidInputError("empty test set")
    train_ids = set(getattr(model, "meta", {}).get("train_ids", ()))
    overlap = train_ids & set(getattr(test_data, "ids", ()) or ())
    if overlap:
        raise InvalidInputError(f"test set overlaps training data: {sorted(overlap)[:5]}")
    if isinstance(model, DualModel):
        pred = predict_logits(model, test_data).argmax(axis=1)
    else:
        pred = model.predict(test_data)
    return confusion_report(test_data.labels, pred, test_data.class_names)
