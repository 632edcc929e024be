"""Turn image sequences into the per-video row stacks fed to a DualModel.

A video contributes ``m_s`` spatial rows (flow-selected frames, intensity in
channel 0) and ``m_t`` temporal rows (normalized flow images, ``u`` and
``v`` in channels 0 and 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InvalidConfigError, InvalidInputError
from .network import BRANCHES
from .optical_flow import (
    FlowConfig,
    FlowField,
    flow_to_image,
    horn_schunck_batch,
    select_frames_from_pairs,
    uniform_pair_indices,
)


def frame_signal(frames: np.ndarray, in_channels: int = 2) -> np.ndarray:
    """``(M, H, W)`` frames -> ``(M, H*W, in_channels)`` with intensity in channel 0."""
    f = np.asarray(frames, dtype=np.float64)
    out = np.zeros((f.shape[0], f.shape[1] * f.shape[2], in_channels))
    out[:, :, 0] = f.reshape(f.shape[0], -1)
    return out


def flow_signal(images: np.ndarray, in_channels: int = 2) -> np.ndarray:
    """``(M, 2, H, W)`` flow images -> ``(M, H*W, in_channels)``."""
    if in_channels < 2:
        raise InvalidConfigError("flow rows need at least 2 input channels")
    img = np.asarray(images, dtype=np.float64)
    out = np.zeros((img.shape[0], img.shape[2] * img.shape[3], in_channels))
    out[:, :, :2] = np.transpose(img.reshape(img.shape[0], 2, -1), (0, 2, 1))
    return out


@dataclass(eq=False)
class VideoSet:
    spatial: np.ndarray  # (V, m_s, n_pixels, C)
    temporal: np.ndarray  # (V, m_t, n_pixels, C)
    labels: np.ndarray
    ids: list[str]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def rows(self, branches: str = "both") -> tuple[np.ndarray, int]:
        """``(V, R, n_pixels, C)`` rows for ``branches`` and the spatial row count."""
        if branches not in BRANCHES:
            raise InvalidConfigError(f"branches must be one of {BRANCHES}, got {branches!r}")
        parts = []
        if branches in ("spatial", "both"):
            parts.append(self.spatial)
        if branches in ("temporal", "both"):
            parts.append(self.temporal)
        rows = np.concatenate(parts, axis=1)
        if rows.shape[1] == 0:
            raise InvalidConfigError(f"no rows selected for branches={branches!r}")
        n_spatial = self.spatial.shape[1] if branches != "temporal" else 0
        return rows, n_spatial

    def subset(self, indices) -> "VideoSet":
        idx = np.asarray(indices, dtype=np.int64)
        return VideoSet(self.spatial[idx], self.temporal[idx], self.labels[idx],
                        [self.ids[i] for i in idx], list(self.class_names))


def prepare_videos(dataset: Dataset, flow: FlowConfig, in_channels: int = 2) -> VideoSet:
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    spatial, temporal = [], []
    lengths = {s.frames.shape for s in dataset.samples}
    if len(lengths) == 1:
        frames = np.stack([s.frames for s in dataset.samples])
        u, v = horn_schunck_batch(frames[:, :-1], frames[:, 1:], flow.alpha, flow.iterations)
        flows = list(zip(u, v))
    else:
        flows = []
        for s in dataset.samples:
            flows.append(horn_schunck_batch(s.frames[:-1], s.frames[1:], flow.alpha,
                                            flow.iterations))
    for s, (u, v) in zip(dataset.samples, flows):
        n_frames = s.frames.shape[0]
        if flow.m_s > n_frames or flow.m_t > n_frames - 1:
            raise InvalidInputError(
                f"sample {s.id}: {n_frames} frames cannot give m_s={flow.m_s}, m_t={flow.m_t}")
        pair_means = np.hypot(u, v).mean(axis=(1, 2))
        chosen = select_frames_from_pairs(pair_means, flow.m_s) if flow.m_s else []
        spatial.append(frame_signal(s.frames[chosen], in_channels))
        images = [flow_to_image(FlowField(u[j], v[j]))
                  for j in uniform_pair_indices(n_frames - 1, flow.m_t)]
        n_pix = s.frames.shape[1] * s.frames.shape[2]
        temporal.append(flow_signal(np.array(images), in_channels) if images
                        else np.zeros((0, n_pix, in_channels)))
    return VideoSet(np.stack(spatial), np.stack(temporal), dataset.labels.copy(),
                    dataset.ids, list(dataset.class_names))


def source_images(dataset: Dataset, in_channels: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Last (peak-displacement) frame of each sequence as a single labeled image."""
    if len(dataset) == 0:
        raise InvalidInputError("empty source dataset")
    frames = np.stack([s.frames[-1] for s in dataset.samples])
    return frame_signal(frames, in_channels), dataset.labels.copy()
