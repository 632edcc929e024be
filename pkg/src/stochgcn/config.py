"""Run configuration: one JSON document with sections
``graph1, graph2, network, flow, train, data`` plus a global ``seed``.

Unknown keys are rejected; omitted keys take the defaults below.  A single
global seed fans out to per-purpose sub-seeds through
``numpy.random.SeedSequence([seed, STREAM])`` with the fixed stream
constants in ``SEED_STREAMS``; an explicit per-section seed wins.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError
from .network import BRANCHES, ROW_VOTES, TABLE_I_LAYERS

SEED_STREAMS = {
    "graph1": 101,
    "graph2": 102,
    "coarsen1": 111,
    "coarsen2": 112,
    "init": 201,
    "source_train": 301,
    "target_train": 302,
    "head_init": 303,
    "data_source": 401,
    "data_target": 402,
}


def derive_seed(global_seed: int, stream: str) -> int:
    ss = np.random.SeedSequence([int(global_seed), SEED_STREAMS[stream]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class GraphSection:
    p: int = 8
    q: int = 2
    threshold: float = 2 * math.sqrt(2)
    seed: int | None = None


@dataclass
class NetworkSection:
    resolution: list = field(default_factory=lambda: [32, 32])
    layers: list = field(default_factory=lambda: [list(l) for l in TABLE_I_LAYERS])
    d_fc: int = 512
    d_fc3: int = 256
    dropout: float = 0.5
    in_channels: int = 2
    bias: bool = True
    branches: str = "both"
    row_vote: str = "mean"
    separate_temporal_weights: bool = False


@dataclass
class FlowSection:
    alpha: float = 1.0
    iterations: int = 200
    m_s: int = 8
    m_t: int = 7


@dataclass
class TrainSection:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    loss: str = "focal"
    focal_alpha: float = 1.5
    focal_gamma: float = 0.2
    lr: float = 1e-5
    decay: float = 1e-6
    decay_mode: str = "lr"
    min_delta: float = 1e-5
    unfreeze: str = "none"
    source_loss: str = "ce"
    source_lr: float | None = None
    source_max_epochs: int | None = None
    threads: int = 1


@dataclass
class DataSection:
    root: str | None = None
    source_root: str | None = None
    n_classes: int = 4
    samples_per_class: int = 40
    source_samples_per_class: int = 60
    frames: int = 16
    amplitudes: list | None = None
    intensity: list = field(default_factory=lambda: [0.6, 0.8])
    ratios: list | None = None
    noise_sigma: float = 0.01
    blob_sigma: float = 2.5
    start_jitter: float = 0.5
    source_start_jitter: float = 0.5
    angle_jitter: float = 0.15
    test_fraction: float = 0.2
    seed: int | None = None


SECTIONS = {"graph1": GraphSection, "graph2": GraphSection, "network": NetworkSection,
            "flow": FlowSection, "train": TrainSection, "data": DataSection}


@dataclass
class RunConfig:
    graph1: GraphSection = field(default_factory=GraphSection)
    graph2: GraphSection = field(default_factory=lambda: GraphSection(p=4, q=0, threshold=1.0))
    network: NetworkSection = field(default_factory=NetworkSection)
    flow: FlowSection = field(default_factory=FlowSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    seed: int = 0

    # -- (de)serialization ------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS) - {"seed"}
        if unknown:
            raise InvalidConfigError(f"unknown config key(s): {sorted(unknown)}")
        cfg = cls()
        if "seed" in doc:
            cfg.seed = _coerce(doc["seed"], int, "seed")
        for name, section_cls in SECTIONS.items():
            values = doc.get(name, {})
            if not isinstance(values, dict):
                raise InvalidConfigError(f"section {name!r} must be an object")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section_cls)}
            for key, val in values.items():
                if key not in known:
                    raise InvalidConfigError(f"unknown key {name}.{key}")
                setattr(section, key, val)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        doc = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise InvalidConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            parts = key.strip().split(".")
            if parts == ["seed"]:
                doc["seed"] = val
                continue
            if len(parts) != 2 or parts[0] not in SECTIONS:
                raise InvalidConfigError(f"unknown config key {key!r}")
            if parts[1] not in doc[parts[0]]:
                raise InvalidConfigError(f"unknown config key {key!r}")
            doc[parts[0]][parts[1]] = val
        return RunConfig.from_dict(doc)

    # -- checks and derived values -------------------------------------------

    def validate(self) -> None:
        n = self.network
        if len(n.resolution) != 2 or min(n.resolution) < 1:
            raise InvalidConfigError("network.resolution must be [height, width]")
        if n.branches not in BRANCHES:
            raise InvalidConfigError(f"network.branches must be one of {BRANCHES}")
        if n.row_vote not in ROW_VOTES:
            raise InvalidConfigError(f"network.row_vote must be one of {ROW_VOTES}")
        for g in (self.graph1, self.graph2):
            if g.p < 0 or g.q < 0 or g.p + g.q < 1 or not g.threshold > 0:
                raise InvalidConfigError("graph sections need p, q >= 0, p + q >= 1, threshold > 0")
        t = self.train
        if t.loss not in ("ce", "focal") or t.source_loss not in ("ce", "focal"):
            raise InvalidConfigError("train.loss and train.source_loss must be ce or focal")
        if t.decay_mode not in ("lr", "l2"):
            raise InvalidConfigError("train.decay_mode must be lr or l2")
        if t.unfreeze not in ("none", "all"):
            raise InvalidConfigError("train.unfreeze must be none or all")
        if t.threads < 1:
            raise InvalidConfigError("train.threads must be >= 1")

    def seed_for(self, stream: str) -> int:
        explicit = {"graph1": self.graph1.seed, "graph2": self.graph2.seed}.get(stream)
        if stream in ("data_source", "data_target") and self.data.seed is not None:
            return self.data.seed + (0 if stream == "data_target" else 1)
        return explicit if explicit is not None else derive_seed(self.seed, stream)


def _coerce(val, typ, name):
    if isinstance(val, bool) or not isinstance(val, typ):
        raise InvalidConfigError(f"{name} must be {typ.__name__}, got {val!r}")
    return val


# Named override bundles.  "desk" shrinks the network, raises the learning
# rates and lowers the pixel noise so the synthetic experiments finish in
# minutes on one CPU core with flow fields clean enough to carry the motion.
PRESETS = {
    "full": [],
    "desk": [
        "network.layers=[[5,8,2],[4,16,2]]",
        "network.d_fc=64",
        "network.d_fc3=64",
        "train.lr=0.001",
        "train.source_lr=0.001",
        "train.source_max_epochs=30",
        "data.ratios=[1,1,1,0.3333333333333333]",
        "data.noise_sigma=0.008",
    ],
}
