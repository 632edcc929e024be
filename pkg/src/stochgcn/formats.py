"""Binary containers (graphs, weights, models, flows) and PGM frames.

All multi-byte fields are little-endian.

``SGCN`` graph::

    b"SGCN" u16 version | u64 n_vertices | u32 p, u32 q | f64 T, f64 sigma |
    u64 seed | u64 n_edges | n_edges x (u32 src, u32 dst, f64 weight)

Edges are stored once with ``src < dst`` and sorted by ``(src, dst)``.

``SGCW`` weights::

    b"SGCW" u16 version | u32 n_layers |
    per layer: u32 K, u32 F_in, u32 F_out | K*F_in*F_out f64 | F_out f64 bias

Dense layers are stored as ``K = 1`` layers.

``SGCM`` model::

    b"SGCM" u16 version | u32 n_sections |
    per section: 4-byte tag | u64 length | payload

``SGCF`` flow::

    b"SGCF" u16 version | u32 H, u32 W | H*W f64 u | H*W f64 v
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .grid_graph import GraphParams, GridGraph, grid_coords

GRAPH_MAGIC, WEIGHTS_MAGIC, MODEL_MAGIC, FLOW_MAGIC = b"SGCN", b"SGCW", b"SGCM", b"SGCF"
FORMAT_VERSIONS = {"SGCN": 1, "SGCW": 1, "SGCM": 1, "SGCF": 1}

_EDGE = np.dtype([("src", "<u4"), ("dst", "<u4"), ("w", "<f8")])


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"truncated {self.what} data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()

    def header(self, magic: bytes, name: str):
        got = self.take(4)
        if got != magic:
            raise DataError(f"not a {name} file (magic {got!r})")
        (version,) = self.unpack("H")
        if version != FORMAT_VERSIONS[name]:
            raise DataError(f"unsupported {name} version {version}")


# ---------------------------------------------------------------- graphs

def graph_to_bytes(graph: GridGraph) -> bytes:
    params = graph.params or GraphParams(p=0, q=1, threshold=1.0, seed=0)
    src, dst, w = graph.edges()
    edges = np.empty(src.size, dtype=_EDGE)
    edges["src"], edges["dst"], edges["w"] = src, dst, w
    head = GRAPH_MAGIC + struct.pack("<HQIIddQQ", FORMAT_VERSIONS["SGCN"], graph.n_vertices,
                                     params.p, params.q, params.threshold, graph.sigma,
                                     params.seed, src.size)
    return head + edges.tobytes()


def graph_from_bytes(data: bytes, shape: tuple[int, int] | None = None) -> GridGraph:
    """Decode a graph.  Pixel coordinates are restored when ``shape`` is given."""
    r = _Reader(data, "SGCN")
    r.header(GRAPH_MAGIC, "SGCN")
    n, p, q, threshold, sigma, seed, n_edges = r.unpack("QIIddQQ")
    edges = r.array(_EDGE, n_edges)
    src = edges["src"].astype(np.int64)
    dst = edges["dst"].astype(np.int64)
    w = edges["w"]
    adj = sp.csr_matrix((np.concatenate([w, w]), (np.concatenate([src, dst]),
                                                  np.concatenate([dst, src]))), shape=(n, n))
    adj.sort_indices()
    if shape is not None:
        if shape[0] * shape[1] != n:
            raise DataError(f"shape {shape} does not match {n} vertices")
        coords = grid_coords(*shape)
    else:
        coords = np.full((n, 2), np.nan)
    params = GraphParams(p=p, q=q, threshold=threshold, seed=seed)
    return GridGraph(coords=coords, adjacency=adj, sigma=sigma, params=params,
                     shape=tuple(shape) if shape else None)


def save_graph(graph: GridGraph, path) -> None:
    Path(path).write_bytes(graph_to_bytes(graph))


def load_graph(path, shape=None) -> GridGraph:
    return graph_from_bytes(Path(path).read_bytes(), shape)


# ---------------------------------------------------------------- weights

def weights_to_bytes(layers: list[tuple[np.ndarray, np.ndarray]]) -> bytes:
    """``layers`` is a list of ``(weights (K, F_in, F_out), bias (F_out,))``."""
    out = io.BytesIO()
    out.write(WEIGHTS_MAGIC + struct.pack("<HI", FORMAT_VERSIONS["SGCW"], len(layers)))
    for w, b in layers:
        w = np.asarray(w, dtype="<f8")
        if w.ndim == 2:
            w = w[None]
        out.write(struct.pack("<III", *w.shape))
        out.write(np.ascontiguousarray(w).tobytes())
        out.write(np.asarray(b, dtype="<f8").tobytes())
    return out.getvalue()


def weights_from_bytes(data: bytes) -> list[tuple[np.ndarray, np.ndarray]]:
    r = _Reader(data, "SGCW")
    r.header(WEIGHTS_MAGIC, "SGCW")
    (n_layers,) = r.unpack("I")
    layers = []
    for _ in range(n_layers):
        k, f_in, f_out = r.unpack("III")
        w = r.array("<f8", k * f_in * f_out).reshape(k, f_in, f_out)
        b = r.array("<f8", f_out)
        layers.append((w, b))
    return layers


# ---------------------------------------------------------------- model container

def sections_to_bytes(sections: list[tuple[bytes, bytes]]) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC + struct.pack("<HI", FORMAT_VERSIONS["SGCM"], len(sections)))
    for tag, payload in sections:
        if len(tag) != 4:
            raise ValueError(f"section tag must be 4 bytes, got {tag!r}")
        out.write(tag + struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def sections_from_bytes(data: bytes) -> dict[bytes, bytes]:
    r = _Reader(data, "SGCM")
    r.header(MODEL_MAGIC, "SGCM")
    (count,) = r.unpack("I")
    sections = {}
    for _ in range(count):
        tag = r.take(4)
        (length,) = r.unpack("Q")
        sections[tag] = r.take(length)
    return sections


# ---------------------------------------------------------------- flow

def flow_to_bytes(u: np.ndarray, v: np.ndarray) -> bytes:
    u = np.asarray(u, dtype="<f8")
    v = np.asarray(v, dtype="<f8")
    head = FLOW_MAGIC + struct.pack("<HII", FORMAT_VERSIONS["SGCF"], *u.shape)
    return head + u.tobytes() + v.tobytes()


def flow_from_bytes(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(data, "SGCF")
    r.header(FLOW_MAGIC, "SGCF")
    h, w = r.unpack("II")
    return r.array("<f8", h * w).reshape(h, w), r.array("<f8", h * w).reshape(h, w)


# ---------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from an image in ``[0, 1]``."""
    img = np.asarray(image, dtype=np.float64)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
