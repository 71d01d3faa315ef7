"""Sparse graph representation, normalized Laplacian, and boundary machinery.

A :class:`Graph` is an undirected, unweighted simple graph stored as a
symmetric 0/1 CSR adjacency. On top of it this module builds the normalized
Laplacian, boundary partitions with their compensated ("hat") degrees, and
the pair of sparse propagation operators used by the boundary-conditioned
message-passing layer. Everything here is immutable after construction and
safe to share across worker processes.

File formats
------------
* Edge list: UTF-8 text, one edge per line as ``u v`` (whitespace separated,
  0-based). Lines starting with ``#`` are ignored.
* Features: CSV with header ``id,f0,...,f{d-1}`` and an optional trailing
  ``label`` column. Rows may be unordered; every id in ``[0, n)`` must appear
  exactly once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Graph",
    "BoundaryPartition",
    "SparsePropagator",
    "build_graph",
    "path_graph",
    "cycle_graph",
    "complete_graph",
    "normalized_laplacian",
    "hat_degrees",
    "make_partition",
    "propagators",
    "gcn_shift",
    "load_graph",
    "load_features",
]


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph with a symmetric 0/1 adjacency matrix."""

    n: int
    edges: np.ndarray  # (m, 2) int64, each row (i, j) with i < j, sorted
    degrees: np.ndarray  # (n,) int64
    adjacency: sp.csr_matrix  # float64, symmetric

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]


def build_graph(edge_list: Sequence, n: int) -> Graph:
    """Construct a graph from unordered node pairs.

    Edges are canonicalized to (min, max) and sorted, so the representation
    does not depend on input order. Raises ``ValueError`` for self-loops,
    out-of-range indices, and duplicate edges.
    """
    if n <= 0:
        raise ValueError(f"node count must be positive, got {n}")
    pairs = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        if pairs.min() < 0 or pairs.max() >= n:
            bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
            raise ValueError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
        loops = pairs[:, 0] == pairs[:, 1]
        if loops.any():
            raise ValueError(f"self-loop at node {pairs[loops][0, 0]}")
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        canon = np.stack([lo, hi], axis=1)
        order = np.lexsort((canon[:, 1], canon[:, 0]))
        canon = canon[order]
        dup = (np.diff(canon[:, 0]) == 0) & (np.diff(canon[:, 1]) == 0)
        if dup.any():
            i = int(np.argmax(dup))
            raise ValueError(f"duplicate edge ({canon[i, 0]}, {canon[i, 1]})")
    else:
        canon = np.zeros((0, 2), dtype=np.int64)

    m = canon.shape[0]
    rows = np.concatenate([canon[:, 0], canon[:, 1]])
    cols = np.concatenate([canon[:, 1], canon[:, 0]])
    adj = sp.csr_matrix(
        (np.ones(2 * m), (rows, cols)), shape=(n, n), dtype=np.float64
    )
    degrees = np.asarray(adj.sum(axis=1)).reshape(-1).astype(np.int64)
    return Graph(n=n, edges=canon, degrees=degrees, adjacency=adj)


def path_graph(n: int) -> Graph:
    """Path on n nodes: 0-1-2-...-(n-1)."""
    return build_graph([(i, i + 1) for i in range(n - 1)], n)


def cycle_graph(n: int) -> Graph:
    """Cycle on n nodes (n >= 3)."""
    if n < 3:
        raise ValueError(f"cycle needs at least 3 nodes, got {n}")
    return build_graph([(i, (i + 1) % n) for i in range(n)], n)


def complete_graph(n: int) -> Graph:
    """Complete graph on n nodes."""
    return build_graph([(i, j) for i in range(n) for j in range(i + 1, n)], n)


def normalized_laplacian(g: Graph) -> sp.csr_matrix:
    """L = I - D^{-1/2} A D^{-1/2} as a symmetric CSR matrix.

    Isolated nodes get diagonal 0 (their row and column are entirely zero),
    so the eigenvalue range [0, 2] is preserved. Training-data loaders
    reject isolated nodes before this convention can matter.
    """
    d = g.degrees.astype(np.float64)
    inv_sqrt = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    scaled = sp.diags(inv_sqrt) @ g.adjacency @ sp.diags(inv_sqrt)
    ident = sp.diags(np.where(d > 0, 1.0, 0.0))
    return (ident - scaled).tocsr()


def hat_degrees(g: Graph, indicator: np.ndarray) -> np.ndarray:
    """Compensated degrees for a (possibly soft) interior indicator.

    For node i with degree d_i this evaluates
    ``d_i (1 - I_i) + (2 I_i - 1) sum_{j~i} I_j``, which for a hard 0/1
    indicator counts the neighbors on the same side of the partition as i.
    """
    ind = np.asarray(indicator, dtype=np.float64).reshape(-1)
    if ind.shape != (g.n,):
        raise ValueError(f"indicator must have shape ({g.n},), got {ind.shape}")
    if ind.min() < 0.0 or ind.max() > 1.0:
        raise ValueError("indicator entries must lie in [0, 1]")
    neighbor_mass = g.adjacency @ ind
    return g.degrees * (1.0 - ind) + (2.0 * ind - 1.0) * neighbor_mass


@dataclass(frozen=True)
class BoundaryPartition:
    """An interior/boundary split of a graph's nodes.

    ``indicator`` holds per-node interior weights in [0, 1] (hard partitions
    use exactly 0 and 1); the interior set is where the indicator is at
    least 0.5. ``hat_degrees`` are the compensated degrees for this
    indicator, and ``p`` stores the per-node flux ratio used by the V-side
    propagator (boundary rows scale messages from the interior by it).
    """

    indicator: np.ndarray
    hat_degrees: np.ndarray
    p: np.ndarray

    @property
    def interior_mask(self) -> np.ndarray:
        return self.indicator >= 0.5

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.indicator < 0.5

    @property
    def is_hard(self) -> bool:
        return bool(np.all((self.indicator == 0.0) | (self.indicator == 1.0)))


def make_partition(g: Graph, indicator, p=None) -> BoundaryPartition:
    """Validate an indicator against a graph and bundle the derived vectors."""
    ind = np.asarray(indicator, dtype=np.float64).reshape(-1)
    hat = hat_degrees(g, ind)  # validates shape and range
    if p is None:
        p_vec = np.ones(g.n)
    else:
        p_vec = np.asarray(p, dtype=np.float64).reshape(-1)
        if p_vec.shape != (g.n,):
            raise ValueError(f"p must have shape ({g.n},), got {p_vec.shape}")
    return BoundaryPartition(indicator=ind, hat_degrees=hat, p=p_vec)


def _inv_sqrt_or_zero(values: np.ndarray) -> np.ndarray:
    """1/sqrt(x) with the convention 1/sqrt(0) = 0 (cutoff 1e-12)."""
    pos = values > 1e-12
    return np.where(pos, 1.0 / np.sqrt(np.where(pos, values, 1.0)), 0.0)


@dataclass(frozen=True)
class SparsePropagator:
    """A tagged sparse propagation operator.

    ``matrix`` holds entries that do not depend on learned coefficients.
    When the operator has a coefficient-dependent per-row factor (the V-side
    flux ratio), it lives in ``row_multiplier``; :meth:`materialize` applies
    it. Operators without such a factor set the slot to None.
    """

    tag: str  # "DinvU" | "DinvV" | "GcnShift"
    matrix: sp.csr_matrix
    row_multiplier: Optional[np.ndarray] = field(default=None)

    def materialize(self) -> sp.csr_matrix:
        if self.row_multiplier is None:
            return self.matrix
        return (sp.diags(self.row_multiplier) @ self.matrix).tocsr()


def propagators(g: Graph, part: BoundaryPartition):
    """The two one-sweep propagation operators for a boundary partition.

    Returns ``(DinvU, DinvV)``. With r_i = 1/sqrt(hat_d_i) (zero where the
    compensated degree vanishes):

    * U-side entry (i, j) for j ~ i: ``I_i * r_i * r_j``; interior rows
      gather from all their neighbors.
    * V-side entry (i, j) for j ~ i: ``(p_i + (1 - p_i) I_i) * I_j * r_i *
      r_j``; every row gathers from interior neighbors only, boundary rows
      scaled by the flux ratio. The matrix stored here is the p-independent
      skeleton ``I_j * r_i * r_j``; the row factor sits in the
      ``row_multiplier`` slot so callers with learned coefficients can apply
      a fresh p without rebuilding the sparsity structure.
    """
    if part.indicator.shape != (g.n,):
        raise ValueError("partition does not match graph size")
    r = _inv_sqrt_or_zero(part.hat_degrees)
    adj = g.adjacency
    u_matrix = sp.diags(part.indicator * r) @ adj @ sp.diags(r)
    v_skeleton = sp.diags(r) @ adj @ sp.diags(part.indicator * r)
    row_factor = part.p + (1.0 - part.p) * part.indicator
    u = SparsePropagator(tag="DinvU", matrix=u_matrix.tocsr())
    v = SparsePropagator(tag="DinvV", matrix=v_skeleton.tocsr(), row_multiplier=row_factor)
    return u, v


def gcn_shift(g: Graph) -> SparsePropagator:
    """The heat-step operator I - L = D^{-1/2} A D^{-1/2} (plus identity on
    isolated nodes, which have no Laplacian row)."""
    shift = sp.identity(g.n, format="csr") - normalized_laplacian(g)
    return SparsePropagator(tag="GcnShift", matrix=shift.tocsr())


# ---------------------------------------------------------------------------
# file loading
# ---------------------------------------------------------------------------


def _parse_edge_file(path: Path):
    edges = []
    max_id = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if u < 0 or v < 0:
                raise ValueError(f"{path}:{lineno}: negative node id in {line!r}")
            edges.append((u, v))
            max_id = max(max_id, u, v)
    return edges, max_id


def load_features(path, expected_n: Optional[int] = None):
    """Read a feature CSV; returns (features (n, d), labels (n,) or None).

    The header must be ``id,f0,...,f{d-1}`` with an optional trailing
    ``label``. Every id in [0, n) must appear exactly once.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty feature file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "id":
            raise ValueError(f"{path}: header must start with 'id', got {header[:1]}")
        has_label = header[-1] == "label"
        feat_names = header[1 : -1 if has_label else len(header)]
        expected_names = [f"f{k}" for k in range(len(feat_names))]
        if feat_names != expected_names or not feat_names:
            raise ValueError(
                f"{path}: feature columns must be f0..f{{d-1}}, got {feat_names}"
            )
        d = len(feat_names)
        rows = {}
        labels = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                node = int(row[0])
                feats = [float(x) for x in row[1 : 1 + d]]
                lab = int(row[1 + d]) if has_label else None
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
            if node in rows:
                raise ValueError(f"{path}:{lineno}: duplicate id {node}")
            rows[node] = feats
            if has_label:
                labels[node] = lab
    n = expected_n if expected_n is not None else (max(rows) + 1 if rows else 0)
    missing = [i for i in range(n) if i not in rows]
    if missing:
        raise ValueError(f"{path}: missing feature rows for ids {missing[:5]}")
    extra = [i for i in rows if i >= n]
    if extra:
        raise ValueError(f"{path}: feature row ids {extra[:5]} out of range for n={n}")
    feats = np.array([rows[i] for i in range(n)], dtype=np.float64)
    if has_label:
        lab_vec = np.array([labels[i] for i in range(n)], dtype=np.int64)
        return feats, lab_vec
    return feats, None


def load_graph(path, format: str = "edge-list", allow_isolated: bool = False):
    """Load a graph (and optionally node features) from disk.

    ``format="edge-list"``: ``path`` is an edge file; returns
    ``(Graph, None, None)``. ``format="edge-list+features"``: ``path`` is a
    directory containing ``edges.txt`` and ``features.csv``; returns
    ``(Graph, features, labels)`` with ``labels`` None when the CSV has no
    label column. Isolated nodes are rejected unless ``allow_isolated``.
    """
    path = Path(path)
    if format == "edge-list":
        edges, max_id = _parse_edge_file(path)
        if max_id < 0:
            raise ValueError(f"{path}: no edges found")
        graph = build_graph(edges, max_id + 1)
        features = labels = None
    elif format == "edge-list+features":
        edge_path = path / "edges.txt"
        feat_path = path / "features.csv"
        for p in (edge_path, feat_path):
            if not p.exists():
                raise FileNotFoundError(f"{p} not found (expected in dataset directory)")
        edges, max_id = _parse_edge_file(edge_path)
        features, labels = load_features(feat_path)
        n = features.shape[0]
        if max_id >= n:
            raise ValueError(
                f"{edge_path}: edge index {max_id} out of bounds for {n} feature rows"
            )
        graph = build_graph(edges, n)
    else:
        raise ValueError(f"unknown format {format!r}; use 'edge-list' or 'edge-list+features'")
    if not allow_isolated and np.any(graph.degrees == 0):
        isolated = np.flatnonzero(graph.degrees == 0)
        raise ValueError(f"{path}: isolated nodes {isolated[:5].tolist()} not allowed")
    return graph, features, labels
