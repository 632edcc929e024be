"""Stochastic p+q grid graphs, normalized Laplacians and coarsening.

Vertex ``i`` of an ``H x W`` grid sits at pixel ``(i // W, i % W)``.  Each
vertex keeps its ``p`` nearest potential neighbours (distance ``<= T``) and
draws ``q`` more uniformly from the remaining potential neighbours.  Edge
weights follow a Gaussian kernel ``exp(-d^2 / sigma^2)`` where ``sigma`` is
the mean, over vertices, of the distance to the farthest vertex.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .errors import (
    DegenerateGraphError,
    DisconnectedGraphError,
    InvalidConfigError,
    InvalidInputError,
)

# relative slack on the threshold so that T = 2*sqrt(2) admits d^2 = 8
_THRESHOLD_RTOL = 1e-12


class ConvergenceWarning(RuntimeWarning):
    pass


class ConnectivityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GraphParams:
    p: int
    q: int
    threshold: float
    seed: int = 0

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise InvalidInputError(f"p and q must be >= 0, got p={self.p}, q={self.q}")
        if self.p + self.q < 1:
            raise InvalidInputError("p + q must be >= 1")
        if not self.threshold > 0:
            raise InvalidInputError(f"threshold must be > 0, got {self.threshold}")
        if self.seed < 0:
            raise InvalidInputError("seed must be a non-negative integer")

    @property
    def label(self) -> str:
        return f"{self.p}+{self.q}"


@dataclass(frozen=True, eq=False)
class GridGraph:
    """Vertex coordinates plus a symmetric sparse weight matrix.

    ``selections`` holds, per vertex, the directed neighbour choice made
    before symmetrization (level-0 graphs only).
    """

    coords: np.ndarray
    adjacency: sp.csr_matrix
    sigma: float
    params: GraphParams | None = None
    shape: tuple[int, int] | None = None
    selections: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges ``(src, dst, weight)`` with ``src < dst``, sorted."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return upper.row[order], upper.col[order], upper.data[order]


@dataclass(frozen=True, eq=False)
class ScaledLaplacian:
    matrix: sp.csr_matrix
    lambda_max: float

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[0]


def grid_coords(height: int, width: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(height * width), width)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def compute_sigma(coords) -> float:
    """Mean over vertices of the distance to the farthest vertex."""
    z = np.asarray(coords, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InvalidInputError("compute_sigma needs at least 2 coordinates")
    farthest = np.empty(z.shape[0])
    chunk = 512
    for start in range(0, z.shape[0], chunk):
        farthest[start:start + chunk] = cdist(z[start:start + chunk], z).max(axis=1)
    sigma = float(farthest.mean())
    if not sigma > 0:
        raise InvalidInputError("all coordinates coincide; sigma would be 0")
    return sigma


def neighbor_offsets(threshold: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid offsets ``(dy, dx, d^2)`` within ``threshold``, nearest first.

    Equal distances are ordered by ``(dy, dx)``, which for in-bounds
    neighbours is the same as ordering by vertex index.
    """
    r = int(math.floor(threshold * (1 + _THRESHOLD_RTOL)))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dy, dx = dy.ravel(), dx.ravel()
    d2 = dy * dy + dx * dx
    keep = (d2 > 0) & (d2 <= threshold * threshold * (1 + _THRESHOLD_RTOL))
    dy, dx, d2 = dy[keep], dx[keep], d2[keep]
    order = np.lexsort((dx, dy, d2))
    return dy[order], dx[order], d2[order]


def potential_neighbors(i: int, height: int, width: int, threshold: float) -> np.ndarray:
    """Indices of all vertices within ``threshold`` of vertex ``i``, nearest first."""
    dy, dx, _ = neighbor_offsets(threshold)
    r0, c0 = divmod(i, width)
    rr, cc = r0 + dy, c0 + dx
    valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
    return rr[valid] * width + cc[valid]


def build_stochastic_graph(height: int, width: int, params: GraphParams) -> GridGraph:
    n = height * width
    if height < 1 or width < 1 or n < 2:
        raise InvalidInputError(f"grid {height}x{width} has fewer than 2 vertices")
    coords = grid_coords(height, width)
    sigma = compute_sigma(coords)
    dy, dx, _ = neighbor_offsets(params.threshold)
    rng = np.random.default_rng(params.seed)

    selections = []
    for i in range(n):
        r0, c0 = divmod(i, width)
        rr, cc = r0 + dy, c0 + dx
        valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        cand = rr[valid] * width + cc[valid]
        if cand.size == 0:
            raise DisconnectedGraphError(
                f"vertex {i} has no potential neighbours within T={params.threshold}")
        n_fixed = min(params.p, cand.size)
        chosen = cand[:n_fixed]
        rest = cand[n_fixed:]
        n_rand = min(params.q, rest.size)
        if n_rand:
            chosen = np.concatenate([chosen, rng.choice(rest, size=n_rand, replace=False)])
        selections.append(chosen.astype(np.int64))

    src = np.repeat(np.arange(n), [s.size for s in selections])
    dst = np.concatenate(selections)
    # symmetric closure: weights depend only on distance, so max(A, A^T) is the union
    src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
    adjacency = _weighted_adjacency(pairs[:, 0], pairs[:, 1], coords, sigma, n)

    adjacency = _connect_components(adjacency, coords, sigma, height, width)
    return GridGraph(coords=coords, adjacency=adjacency, sigma=sigma, params=params,
                     shape=(height, width), selections=tuple(selections))


def _weighted_adjacency(src, dst, coords, sigma, n) -> sp.csr_matrix:
    diff = coords[src] - coords[dst]
    d2 = np.einsum("ij,ij->i", diff, diff)
    w = np.exp(-d2 / sigma**2)
    a = sp.csr_matrix((w, (src, dst)), shape=(n, n))
    a.sort_indices()
    return a


def _connect_components(adjacency, coords, sigma, height, width) -> sp.csr_matrix:
    n_comp, labels = connected_components(adjacency, directed=False)
    if n_comp == 1:
        return adjacency
    # the shortest possible inter-component distance on a unit grid is 1 and
    # some 4-neighbour pair always crosses components
    idx = np.arange(height * width).reshape(height, width)
    right = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    down = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    cand = np.concatenate([right, down])
    cand = cand[np.lexsort((cand[:, 1], cand[:, 0]))]

    parent = list(range(n_comp))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    added = []
    for i, j in cand:
        ri, rj = find(labels[i]), find(labels[j])
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            added.append((i, j))
            if len(added) == n_comp - 1:
                break
    warnings.warn(f"graph had {n_comp} components; added {len(added)} grid edge(s)",
                  ConnectivityWarning, stacklevel=3)
    a = adjacency.tocoo()
    extra = np.array(added)
    src = np.concatenate([a.row, extra[:, 0], extra[:, 1]])
    dst = np.concatenate([a.col, extra[:, 1], extra[:, 0]])
    return _weighted_adjacency(src, dst, coords, sigma, adjacency.shape[0])


def _as_adjacency(graph) -> sp.csr_matrix:
    if isinstance(graph, GridGraph):
        return graph.adjacency
    return sp.csr_matrix(graph)


def normalized_laplacian(graph, allow_isolated: bool = False) -> sp.csr_matrix:
    """``I - D^{-1/2} A D^{-1/2}``.

    With ``allow_isolated`` a zero-degree vertex gets ``L_ii = 1`` (used for
    the padding vertices of a coarsening hierarchy).
    """
    a = _as_adjacency(graph)
    n = a.shape[0]
    deg = np.asarray(a.sum(axis=1)).ravel()
    isolated = deg <= 0
    if isolated.any() and not allow_isolated:
        raise DegenerateGraphError(
            f"vertex {int(np.flatnonzero(isolated)[0])} has zero degree")
    inv_sqrt = np.zeros(n)
    inv_sqrt[~isolated] = 1.0 / np.sqrt(deg[~isolated])
    d = sp.diags(inv_sqrt)
    lap = sp.identity(n, format="csr") - d @ a @ d
    lap = sp.csr_matrix(lap)
    # exact symmetry; the product can differ in the last bit across the diagonal
    lap = sp.csr_matrix((lap + lap.T) * 0.5)
    lap.sort_indices()
    return lap


def estimate_lambda_max(lap, tol: float = 1e-6, max_iter: int = 1000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns ``theta + ||L v - theta v||`` for the final Rayleigh quotient
    ``theta``; this is an upper estimate of the top eigenvalue once the
    iterate is aligned with it, which keeps the scaled spectrum inside
    ``[-1, 1]``.  Falls back to the normalized-Laplacian bound 2.0 (with a
    ``ConvergenceWarning``) when the residual does not drop below
    ``tol * theta`` within ``max_iter`` iterations.
    """
    m = sp.csr_matrix(lap)
    n = m.shape[0]
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = m @ v
        theta = float(v @ w)
        resid = float(np.linalg.norm(w - theta * v))
        if resid <= tol * max(abs(theta), np.finfo(float).tiny):
            return theta + resid
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    warnings.warn(f"power iteration did not converge in {max_iter} iterations; using 2.0",
                  ConvergenceWarning, stacklevel=2)
    return 2.0


def scale_laplacian(lap, lambda_max: float) -> ScaledLaplacian:
    if not lambda_max > 0:
        raise InvalidInputError(f"lambda_max must be > 0, got {lambda_max}")
    m = sp.csr_matrix(lap)
    scaled = sp.csr_matrix((2.0 / lambda_max) * m - sp.identity(m.shape[0], format="csr"))
    scaled.sort_indices()
    return ScaledLaplacian(matrix=scaled, lambda_max=float(lambda_max))


# --------------------------------------------------------------------------
# coarsening
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoarseningHierarchy:
    """Multi-level graphs in pooling order.

    ``perms[l][a]`` is the level-``l`` vertex stored at padded position ``a``,
    or -1 for a padding vertex.  Padded positions ``2j`` and ``2j+1`` at level
    ``l`` pool into position ``j`` at level ``l+1``.
    """

    levels: list[tuple[GridGraph, ScaledLaplacian]]
    perms: list[np.ndarray]
    seed: int = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels) - 1

    @property
    def input_permutation(self) -> np.ndarray:
        return self.perms[0]

    @property
    def pool_maps(self) -> list[np.ndarray]:
        return [np.arange(p.size) // 2 for p in self.perms[:-1]]

    @property
    def real_masks(self) -> list[np.ndarray]:
        return [p >= 0 for p in self.perms]

    def padded_size(self, level: int) -> int:
        return self.perms[level].size

    def laplacian(self, level: int) -> ScaledLaplacian:
        return self.levels[level][1]

    def permute_signal(self, x: np.ndarray) -> np.ndarray:
        """``(batch, n_pixels, channels)`` -> padded ``(n_pad, batch, channels)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        n_real = self.levels[0][0].n_vertices
        if x.shape[1] != n_real:
            raise InvalidConfigError(
                f"signal has {x.shape[1]} vertices, hierarchy expects {n_real}")
        perm = self.perms[0]
        out = np.zeros((perm.size, x.shape[0], x.shape[2]))
        real = perm >= 0
        out[real] = np.transpose(x, (1, 0, 2))[perm[real]]
        return out


def heavy_edge_matching(adjacency: sp.csr_matrix, sizes: np.ndarray) -> np.ndarray:
    """Greedy normalized heavy-edge matching; returns a cluster id per vertex.

    Vertices are visited by ascending weighted degree (ties by index).  An
    unmatched vertex pairs with the unmatched neighbour maximizing
    ``w_ij * (1/size_i + 1/size_j)``; ties go to the lowest index.
    """
    a = sp.csr_matrix(adjacency)
    n = a.shape[0]
    deg = np.round(np.asarray(a.sum(axis=1)).ravel(), 12)
    order = np.lexsort((np.arange(n), deg))
    marked = np.zeros(n, dtype=bool)
    cluster = np.full(n, -1, dtype=np.int64)
    indptr, indices, data = a.indptr, a.indices, a.data
    cid = 0
    for i in order:
        if marked[i]:
            continue
        marked[i] = True
        best, best_val = -1, 0.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if marked[j] or data[k] <= 0:
                continue
            val = data[k] * (1.0 / sizes[i] + 1.0 / sizes[j])
            if val > best_val or (val == best_val and best >= 0 and j < best):
                best, best_val = j, val
        cluster[i] = cid
        if best >= 0:
            cluster[best] = cid
            marked[best] = True
        cid += 1
    return cluster


def _merge(adjacency: sp.csr_matrix, coords: np.ndarray, cluster: np.ndarray):
    n = adjacency.shape[0]
    m = int(cluster.max()) + 1
    p = sp.csr_matrix((np.ones(n), (np.arange(n), cluster)), shape=(n, m))
    coarse = sp.csr_matrix(p.T @ adjacency @ p)
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    coarse.sort_indices()
    counts = np.asarray(p.sum(axis=0)).ravel()
    coarse_coords = (p.T @ coords) / counts[:, None]
    return coarse, coarse_coords, counts


def _binary_perms(parents: list[np.ndarray], n_top: int) -> list[np.ndarray]:
    """Padded orderings such that each level halves exactly."""
    perms = [np.arange(n_top)]
    for parent in reversed(parents):
        n_fine = parent.size
        children = [[] for _ in range(int(parent.max()) + 1)]
        for v in range(n_fine):
            children[parent[v]].append(v)
        layer = []
        for node in perms[-1]:
            kids = children[node] if node >= 0 else []
            if len(kids) > 2:
                raise AssertionError("matching produced a cluster of more than 2 vertices")
            layer.extend(kids + [-1] * (2 - len(kids)))
        perms.append(np.array(layer, dtype=np.int64))
    return perms[::-1]


def _padded_adjacency(adjacency: sp.csr_matrix, perm: np.ndarray) -> sp.csr_matrix:
    real = np.flatnonzero(perm >= 0)
    sel = sp.csr_matrix((np.ones(real.size), (real, perm[real])),
                        shape=(perm.size, adjacency.shape[0]))
    out = sp.csr_matrix(sel @ adjacency @ sel.T)
    out.sort_indices()
    return out


def coarsen(graph: GridGraph, total_levels: int, seed: int = 0) -> CoarseningHierarchy:
    """Build ``total_levels`` rounds of heavy-edge matching with padding.

    Merged edge weights are sums of the fine weights between the two
    clusters; intra-cluster weight is dropped.  Each level's scaled Laplacian
    is built on its padded ordering, where padding vertices are isolated.
    """
    if total_levels < 0:
        raise InvalidConfigError("total_levels must be >= 0")
    adjacency, coords = graph.adjacency, graph.coords
    sizes = np.ones(graph.n_vertices)
    graphs = [graph]
    parents = []
    for level in range(total_levels):
        if adjacency.shape[0] < 2:
            raise InvalidConfigError(
                f"graph with {graph.n_vertices} vertices cannot be coarsened "
                f"{total_levels} times (level {level} has 1 vertex)")
        cluster = heavy_edge_matching(adjacency, sizes)
        adjacency, coords, counts = _merge(adjacency, coords, cluster)
        sizes = np.bincount(cluster, weights=sizes)
        parents.append(cluster)
        sigma = compute_sigma(coords) if coords.shape[0] >= 2 else 0.0
        graphs.append(GridGraph(coords=coords, adjacency=adjacency, sigma=sigma))
    perms = _binary_perms(parents, graphs[-1].n_vertices)
    levels = []
    for g, perm in zip(graphs, perms):
        lap = normalized_laplacian(_padded_adjacency(g.adjacency, perm), allow_isolated=True)
        levels.append((g, scale_laplacian(lap, estimate_lambda_max(lap))))
    return CoarseningHierarchy(levels=levels, perms=perms, seed=seed)
