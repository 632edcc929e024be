"""Horn-Schunck optical flow, flow statistics and flow-driven frame selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .errors import InvalidInputError

# neighbourhood average used by Horn-Schunck (centre excluded)
_AVG_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                        [1 / 6, 0.0, 1 / 6],
                        [1 / 12, 1 / 6, 1 / 12]])


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FlowStats:
    pair_means: np.ndarray
    mean: float
    variance: float


@dataclass(frozen=True)
class FlowConfig:
    alpha: float = 1.0
    iterations: int = 200
    m_s: int = 8
    m_t: int = 7


def _central_gradients(img: np.ndarray):
    """Central differences along the last two axes with reflective borders."""
    pad = [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(img, pad, mode="symmetric")
    gx = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
    gy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
    return gx, gy


def horn_schunck_batch(frames_a: np.ndarray, frames_b: np.ndarray, alpha: float = 1.0,
                       iterations: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Flow ``(u, v)`` for stacked frame pairs of shape ``(..., H, W)``."""
    a = np.asarray(frames_a, dtype=np.float64)
    b = np.asarray(frames_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 2:
        raise InvalidInputError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    if not alpha > 0:
        raise InvalidInputError("alpha must be > 0")
    ix, iy = _central_gradients(0.5 * (a + b))
    it = b - a
    denom = alpha * alpha + ix * ix + iy * iy
    kernel = _AVG_KERNEL.reshape((1,) * (a.ndim - 2) + (3, 3))
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iterations):
        u_avg = correlate(u, kernel, mode="mirror")
        v_avg = correlate(v, kernel, mode="mirror")
        t = (ix * u_avg + iy * v_avg + it) / denom
        u = u_avg - ix * t
        v = v_avg - iy * t
    return u, v


def horn_schunck(frame_a: np.ndarray, frame_b: np.ndarray, alpha: float = 1.0,
                 iterations: int = 200) -> FlowField:
    a = np.asarray(frame_a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError("horn_schunck expects 2-D grayscale frames")
    u, v = horn_schunck_batch(a, frame_b, alpha, iterations)
    return FlowField(u, v)


def sequence_flow(frames, alpha: float = 1.0, iterations: int = 200):
    """Flow between every consecutive pair: arrays ``(n_frames - 1, H, W)``."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 2:
        raise InvalidInputError("a sequence needs at least 2 frames of equal size")
    return horn_schunck_batch(f[:-1], f[1:], alpha, iterations)


def _stats(pair_means: np.ndarray) -> FlowStats:
    return FlowStats(pair_means=pair_means, mean=float(pair_means.mean()),
                     variance=float(pair_means.var()))


def flow_magnitude_stats(sequence, alpha: float = 1.0, iterations: int = 200) -> FlowStats:
    u, v = sequence_flow(sequence, alpha, iterations)
    return _stats(np.hypot(u, v).mean(axis=(-2, -1)))


def select_frames_from_pairs(pair_means: np.ndarray, m_s: int) -> list[int]:
    """Top-``m_s`` frames by ``max(incoming, outgoing)`` pair magnitude, in order."""
    pair_means = np.asarray(pair_means, dtype=np.float64)
    n_frames = pair_means.size + 1
    if not 1 <= m_s <= n_frames:
        raise InvalidInputError(f"cannot select {m_s} of {n_frames} frames")
    score = np.full(n_frames, -np.inf)
    score[:-1] = pair_means
    score[1:] = np.maximum(score[1:], pair_means)
    # stable sort on -score: ties go to the earlier index
    order = np.argsort(-score, kind="stable")
    return sorted(int(i) for i in order[:m_s])


def select_frames(sequence, m_s: int, alpha: float = 1.0, iterations: int = 200) -> list[int]:
    f = np.asarray(sequence, dtype=np.float64)
    if f.ndim != 3 or not 1 <= m_s <= f.shape[0]:
        raise InvalidInputError(f"cannot select {m_s} frames from a sequence of {len(f)}")
    if f.shape[0] == 1:
        return [0]
    return select_frames_from_pairs(flow_magnitude_stats(f, alpha, iterations).pair_means, m_s)


def uniform_pair_indices(n_pairs: int, m_t: int) -> list[int]:
    """``m_t`` flow-pair indices spread evenly over ``n_pairs``."""
    if not 0 <= m_t <= n_pairs:
        raise InvalidInputError(f"cannot take {m_t} of {n_pairs} flow pairs")
    if m_t == 0:
        return []
    return [int(i) for i in np.round(np.linspace(0, n_pairs - 1, m_t)).astype(int)]


def flow_to_image(flow: FlowField) -> np.ndarray:
    """``(2, H, W)`` image: each channel mean-centred, then scaled to max-abs 1."""
    img = np.stack([np.asarray(flow.u, dtype=np.float64), np.asarray(flow.v, dtype=np.float64)])
    img = img - img.mean(axis=(1, 2), keepdims=True)
    peak = np.abs(img).max(axis=(1, 2), keepdims=True)
    return np.divide(img, peak, out=np.zeros_like(img), where=peak > 0)
