"""Spatial graphs, their Laplacians, and eigenvector positional encodings.

Graphs are undirected, weighted, self-loop free. The eigensolver is a cyclic
Jacobi rotation scheme, which is plenty at desk scale and preserves block
structure on disconnected graphs. For graphs past a block limit the encoding
is computed per partition block and stitched back into node order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError, NumericError

log = logging.getLogger(__name__)


@dataclass
class SpatialGraph:
    """Symmetric weighted adjacency over n nodes, stored as per-node dicts."""

    n: int
    adj: list = field(default_factory=list)  # adj[i] = {j: weight}
    coords: np.ndarray | None = None  # (n, 2) metric coordinates
    epsilon: float | None = None

    def __post_init__(self):
        if not self.adj:
            self.adj = [dict() for _ in range(self.n)]

    def add_edge(self, i: int, j: int, w: float):
        if i == j:
            raise ContractError(f"self-loop on node {i}")
        if not math.isfinite(w) or w < 0:
            raise ContractError(f"edge weight must be finite and >= 0, got {w}")
        if w == 0:
            return
        self.adj[i][j] = w
        self.adj[j][i] = w

    def edges(self):
        """Yield (i, j, w) with i < j, each undirected edge once, sorted."""
        for i in range(self.n):
            for j in sorted(self.adj[i]):
                if i < j:
                    yield i, j, self.adj[i][j]

    def weight(self, i: int, j: int) -> float:
        return self.adj[i].get(j, 0.0)

    def degree(self, i: int) -> float:
        return sum(self.adj[i].values())

    def total_edge_weight(self) -> float:
        return sum(w for _, _, w in self.edges())

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j, w in self.edges():
            a[i, j] = w
            a[j, i] = w
        return a

    def subgraph(self, nodes) -> "SpatialGraph":
        """Induced subgraph; node order follows the given sequence."""
        nodes = list(nodes)
        pos = {node: k for k, node in enumerate(nodes)}
        sub = SpatialGraph(len(nodes))
        if self.coords is not None:
            sub.coords = self.coords[nodes]
        for k, node in enumerate(nodes):
            for nbr, w in self.adj[node].items():
                if nbr in pos and node < nbr:
                    sub.add_edge(k, pos[nbr], w)
        return sub

    def validate(self):
        for i in range(self.n):
            if i in self.adj[i]:
                raise ContractError(f"self-loop on node {i}")
            for j, w in self.adj[i].items():
                if not math.isfinite(w) or w < 0:
                    raise ContractError(f"bad weight {w} on edge ({i},{j})")
                if self.adj[j].get(i) != w:
                    raise ContractError(f"asymmetric edge ({i},{j})")


def build_epsilon_graph(coords, epsilon: float) -> SpatialGraph:
    """Unit-weight edge between every pair closer than epsilon."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise InputError(f"coords must be (n, dim) with n >= 1, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise InputError("coords contain non-finite values")
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    g = SpatialGraph(coords.shape[0], coords=coords)
    g.epsilon = float(epsilon)
    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1))
    src, dst = np.nonzero(np.triu(dist < epsilon, k=1))
    for i, j in zip(src.tolist(), dst.tolist()):
        g.add_edge(i, j, 1.0)
    return g


def build_gaussian_graph(coords, sigma: float, threshold: float) -> SpatialGraph:
    """Thresholded Gaussian kernel weights: exp(-d^2/sigma^2), dropped below threshold."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise InputError("coords contain non-finite values")
    if sigma <= 0:
        raise InputError("sigma must be positive")
    if not 0 <= threshold < 1:
        raise InputError("threshold must lie in [0, 1)")
    g = SpatialGraph(coords.shape[0], coords=coords)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)
    w = np.exp(-d2 / (sigma * sigma))
    src, dst = np.nonzero(np.triu(w >= threshold, k=1))
    for i, j in zip(src.tolist(), dst.tolist()):
        g.add_edge(i, j, float(w[i, j]))
    return g


def laplacian(g: SpatialGraph) -> np.ndarray:
    """L = D - A with D the diagonal of weighted degrees. Rows sum to zero."""
    a = g.dense_adjacency()
    return np.diag(a.sum(axis=1)) - a


def connected_components(g: SpatialGraph) -> list:
    """List of components, each a sorted list of node ids."""
    seen = [False] * g.n
    comps = []
    for start in range(g.n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in g.adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def sym_eigen(mat, k: int, max_sweeps: int = 60):
    """k smallest eigenpairs of a symmetric matrix via cyclic Jacobi rotations.

    Returns (values ascending, vectors n x k). Vector signs are canonical:
    the first component with magnitude > 1e-12 is made positive, so repeated
    runs are bit-identical. Rotations are skipped on exactly-zero pivots,
    which keeps eigenvectors of block-diagonal matrices inside their blocks.
    """
    a = np.array(mat, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"sym_eigen needs a square matrix, got {a.shape}")
    n = a.shape[0]
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise ContractError("sym_eigen input is not symmetric within 1e-10")
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")

    v = np.eye(n)
    norm_f = float(np.linalg.norm(a))
    tol_off = 1e-13 * max(1.0, norm_f)
    off_mask = ~np.eye(n, dtype=bool)

    def off_norm():
        return float(np.sqrt((a[off_mask] ** 2).sum()))

    if n > 1:
        for _ in range(max_sweeps):
            if off_norm() <= tol_off:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    h = a[q, q] - a[p, p]
                    if abs(h) > 1e150 * abs(apq):
                        t = apq / h  # angle below resolution; avoid overflow
                    else:
                        theta = h / (2.0 * apq)
                        t = math.copysign(1.0, theta) / (
                            abs(theta) + math.sqrt(theta * theta + 1.0)
                        )
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    col_p, col_q = a[:, p].copy(), a[:, q].copy()
                    a[:, p] = c * col_p - s * col_q
                    a[:, q] = s * col_p + c * col_q
                    row_p, row_q = a[p, :].copy(), a[q, :].copy()
                    a[p, :] = c * row_p - s * row_q
                    a[q, :] = s * row_p + c * row_q
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    vp, vq = v[:, p].copy(), v[:, q].copy()
                    v[:, p] = c * vp - s * vq
                    v[:, q] = s * vp + c * vq
        else:
            raise NumericError(
                f"Jacobi failed to converge in {max_sweeps} sweeps; "
                f"off-diagonal {off_norm():.3e}"
            )

    order = np.argsort(np.diag(a), kind="stable")[:k]
    values = np.diag(a)[order].copy()
    vectors = v[:, order].copy()
    for col in range(vectors.shape[1]):
        nz = np.nonzero(np.abs(vectors[:, col]) > 1e-12)[0]
        if nz.size and vectors[nz[0], col] < 0:
            vectors[:, col] = -vectors[:, col]
    return values, vectors


@dataclass
class PositionalEncoding:
    """Per-node feature rows from small-eigenvalue Laplacian eigenvectors."""

    k: int
    vectors: np.ndarray  # (n, k)
    source: str  # "whole-graph" | "per-subgraph"


def laplacian_pe(g: SpatialGraph, k: int, block_limit: int = 2000) -> PositionalEncoding:
    """Eigenvectors of the k smallest Laplacian eigenvalues as node features.

    Graphs up to block_limit nodes are solved whole; larger ones are split
    into balanced blocks (minimal edge cut) and each block's induced
    Laplacian is solved independently, rows assembled back into node order.
    Blocks smaller than k+1 nodes get their trailing columns zero-padded.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    if block_limit < k + 1:
        raise InputError("block_limit must be at least k+1")
    if g.n <= block_limit:
        _, vectors = sym_eigen(laplacian(g), min(k, g.n))
        if vectors.shape[1] < k:
            log.warning(
                "graph has %d nodes < k+1=%d; zero-padding encoding", g.n, k + 1
            )
            vectors = np.pad(vectors, ((0, 0), (0, k - vectors.shape[1])))
        return PositionalEncoding(k=k, vectors=vectors, source="whole-graph")

    from .partition import partition_kway  # deferred to avoid a cycle

    p = math.ceil(g.n / block_limit)
    while True:
        plan = partition_kway(g, p, balance_factor=1.1, seed=0)
        if max(plan.sizes()) <= block_limit:
            break
        p += 1
    out = np.zeros((g.n, k))
    for b in range(plan.p):
        nodes = [int(i) for i in plan.gather[b] if i >= 0]
        block = g.subgraph(nodes)
        kb = min(k, block.n)
        if kb < k:
            log.warning(
                "block %d has %d nodes < k+1=%d; zero-padding its encoding",
                b,
                block.n,
                k + 1,
            )
        _, vectors = sym_eigen(laplacian(block), kb)
        out[nodes, :kb] = vectors
    return PositionalEncoding(k=k, vectors=out, source="per-subgraph")


# ---------------------------------------------------------------------------
# file formats: edge lists, coordinates, encoding cache


def save_graph(path, g: SpatialGraph):
    """Edge-list text: one `src,dst,weight` per line, each undirected edge once."""
    with open(path, "w") as fh:
        for i, j, w in g.edges():
            fh.write(f"{i},{j},{float(w)!r}\n")


def load_graph(path, n: int | None = None) -> SpatialGraph:
    triples = []
    max_id = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected src,dst,weight")
            try:
                i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            triples.append((i, j, w))
            max_id = max(max_id, i, j)
    if n is None:
        n = max_id + 1
    if max_id >= n:
        raise InputError(f"{path}: node id {max_id} exceeds declared n={n}")
    g = SpatialGraph(n)
    for i, j, w in triples:
        g.add_edge(i, j, w)
    g.validate()
    return g


def save_coords(path, coords):
    coords = np.asarray(coords, dtype=np.float64)
    with open(path, "w") as fh:
        for i, (x, y) in enumerate(coords):
            fh.write(f"{i},{float(x)!r},{float(y)!r}\n")


def load_coords(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected node_id,x,y")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise InputError(f"{path}: node ids must be 0..n-1 without gaps")
    return np.array([[x, y] for _, x, y in rows])


def graph_hash(g: SpatialGraph) -> str:
    h = hashlib.sha256()
    h.update(f"n={g.n};".encode())
    for i, j, w in g.edges():
        h.update(f"{i},{j},{w!r};".encode())
    return h.hexdigest()


def _pe_stem(path) -> str:
    path = str(path)
    return path[:-4] if path.endswith(".bin") else path


def save_pe(path, pe: PositionalEncoding, g: SpatialGraph, block_limit: int):
    """Binary little-endian f64 rows plus a JSON sidecar for validation."""
    stem = _pe_stem(path)
    with open(stem + ".bin", "wb") as fh:
        fh.write(np.ascontiguousarray(pe.vectors, dtype="<f8").tobytes())
    sidecar = {
        "n": int(pe.vectors.shape[0]),
        "k": int(pe.k),
        "block_limit": int(block_limit),
        "graph_hash": graph_hash(g),
        "source": pe.source,
    }
    with open(stem + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_pe(path, g: SpatialGraph | None = None) -> PositionalEncoding:
    stem = _pe_stem(path)
    with open(stem + ".json") as fh:
        sidecar = json.load(fh)
    vectors = np.fromfile(stem + ".bin", dtype="<f8").reshape(sidecar["n"], sidecar["k"])
    if g is not None and graph_hash(g) != sidecar["graph_hash"]:
        raise InputError(f"{stem}: cached encoding was built for a different graph")
    return PositionalEncoding(
        k=sidecar["k"], vectors=vectors.astype(np.float64), source=sidecar["source"]
    )
