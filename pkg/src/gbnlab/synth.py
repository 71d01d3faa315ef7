"""Synthetic task generators: graph transfer, two-clique bottleneck, SBM.

The transfer family plants a unit value at a source node and asks the model
to move it to a distant target (and the target's zero back to the source),
with loss masked to those two nodes. Topologies: a path whose endpoints are
n hops apart ("line"), a cycle of size n with antipodal source/target
("ring"), and the cycle plus chord edges chosen so they never shorten the
source-target distance ("crossed-ring").

The bottleneck case study joins two complete graphs by a short path and asks
for the clique values to be swapped across it. The community generator is a
two-block stochastic block model with Gaussian features, used by the depth
and oversmoothing experiments.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .graphs import Graph, build_graph, complete_graph, cycle_graph, path_graph

__all__ = [
    "TOPOLOGIES",
    "TransferTask",
    "TransferBatch",
    "BottleneckCase",
    "CommunityData",
    "DepthRun",
    "bfs_distance",
    "gen_transfer",
    "gen_transfer_split",
    "gen_bottleneck",
    "gen_community",
    "gen_depth_suite",
    "save_transfer_dataset",
    "load_transfer_dataset",
]

TOPOLOGIES = ("line", "ring", "crossed-ring")


def bfs_distance(g: Graph, source: int, target: int) -> int:
    """Unweighted shortest-path distance, -1 if unreachable."""
    if source == target:
        return 0
    seen = np.full(g.n, -1, dtype=np.int64)
    seen[source] = 0
    queue = deque([source])
    indptr, indices = g.adjacency.indptr, g.adjacency.indices
    while queue:
        u = queue.popleft()
        for v in indices[indptr[u] : indptr[u + 1]]:
            if seen[v] < 0:
                seen[v] = seen[u] + 1
                if v == target:
                    return int(seen[v])
                queue.append(v)
    return -1


def _transfer_skeleton(topology: str, n: int) -> Tuple[Graph, int, int]:
    if topology == "line":
        if n < 2:
            raise ValueError(f"line task needs distance >= 2, got {n}")
        return path_graph(n + 1), 0, n
    if topology == "ring":
        if n < 3:
            raise ValueError(f"ring task needs size >= 3, got {n}")
        return cycle_graph(n), 0, n // 2
    if topology == "crossed-ring":
        if n < 5:
            raise ValueError(f"crossed-ring task needs size >= 5, got {n}")
        source, target = 0, n // 2
        edges = [(i, (i + 1) % n) for i in range(n)]
        edges = [(min(a, b), max(a, b)) for a, b in edges]
        # chord candidates i <-> n-i from one semicircle; keep a chord only
        # if the source-target distance survives its addition
        for i in range(1, (n + 1) // 2):
            partner = n - i
            if partner in (source, target) or i in (source, target) or partner <= i:
                continue
            candidate = edges + [(i, partner)]
            trial = build_graph(sorted(set(candidate)), n)
            if bfs_distance(trial, source, target) >= n // 2:
                edges = sorted(set(candidate))
        return build_graph(edges, n), source, target
    raise ValueError(f"unknown topology {topology!r}")


@dataclass(frozen=True)
class TransferTask:
    """One transfer instance: fixed topology, one feature assignment."""

    topology: str
    n: int
    graph: Graph
    features: np.ndarray  # (n_nodes, 1)
    labels: np.ndarray  # (n_nodes, 1); swapped endpoint values, 0 elsewhere
    source: int
    target: int
    mask: np.ndarray  # loss rows: [source, target]
    seed: int


def _transfer_features(rng, n_nodes: int, source: int, target: int) -> np.ndarray:
    feats = rng.random((n_nodes, 1))
    feats[source, 0] = 1.0
    feats[target, 0] = 0.0
    return feats


def _transfer_labels(n_nodes: int, source: int, target: int) -> np.ndarray:
    labels = np.zeros((n_nodes, 1))
    labels[source, 0] = 0.0
    labels[target, 0] = 1.0
    return labels


def gen_transfer(topology: str, n: int, seed: int) -> TransferTask:
    """A single transfer task instance."""
    g, source, target = _transfer_skeleton(topology, n)
    feats = _transfer_features(rngmod.stream(seed, rngmod.DATA), g.n, source, target)
    return TransferTask(
        topology=topology,
        n=n,
        graph=g,
        features=feats,
        labels=_transfer_labels(g.n, source, target),
        source=source,
        target=target,
        mask=np.array([source, target], dtype=np.int64),
        seed=seed,
    )


@dataclass(frozen=True)
class TransferBatch:
    """A split of transfer instances sharing one topology."""

    topology: str
    n: int
    split: str
    graph: Graph
    features: np.ndarray  # (graphs, n_nodes, 1)
    labels: np.ndarray  # (n_nodes, 1), shared across instances
    source: int
    target: int
    seed: int

    @property
    def num_graphs(self) -> int:
        return self.features.shape[0]


_SPLIT_NAMES = ("train", "val", "test")


def gen_transfer_split(
    topology: str,
    n: int,
    counts: Tuple[int, int, int] = (1000, 100, 100),
    seed: int = 0,
):
    """Train/val/test transfer batches with independently drawn features."""
    if len(counts) != 3 or any(c < 1 for c in counts):
        raise ValueError(f"counts must be three positive integers, got {counts}")
    g, source, target = _transfer_skeleton(topology, n)
    labels = _transfer_labels(g.n, source, target)
    batches = []
    for split_idx, (split, count) in enumerate(zip(_SPLIT_NAMES, counts)):
        feats = np.empty((count, g.n, 1))
        for i in range(count):
            r = rngmod.stream(seed, rngmod.DATA, split_idx, i)
            feats[i] = _transfer_features(r, g.n, source, target)
        batches.append(
            TransferBatch(
                topology=topology,
                n=n,
                split=split,
                graph=g,
                features=feats,
                labels=labels,
                source=source,
                target=target,
                seed=seed,
            )
        )
    return tuple(batches)


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------


def save_transfer_dataset(batch: TransferBatch, directory) -> None:
    """Write edges.txt, features.csv, and manifest.json for one split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "edges.txt", "w", encoding="utf-8") as fh:
        fh.write("# transfer topology edge list\n")
        for a, b in batch.graph.edges:
            fh.write(f"{a} {b}\n")
    with open(directory / "features.csv", "w", encoding="utf-8") as fh:
        fh.write("graph,node,value\n")
        for gi in range(batch.num_graphs):
            for node in range(batch.graph.n):
                fh.write(f"{gi},{node},{float(batch.features[gi, node, 0])!r}\n")
    manifest = {
        "topology": batch.topology,
        "n": batch.n,
        "split": batch.split,
        "seed": batch.seed,
        "source": batch.source,
        "target": batch.target,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_transfer_dataset(directory) -> TransferBatch:
    """Inverse of :func:`save_transfer_dataset`."""
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    expected = {"topology", "n", "split", "seed", "source", "target"}
    if set(manifest) != expected:
        raise ValueError(f"manifest keys {sorted(manifest)} != {sorted(expected)}")
    edges = []
    max_node = -1
    with open(directory / "edges.txt", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, b = (int(tok) for tok in line.split())
            edges.append((a, b))
            max_node = max(max_node, a, b)
    g = build_graph(edges, max_node + 1)
    rows = []
    with open(directory / "features.csv", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "graph,node,value":
            raise ValueError(f"unexpected features header {header!r}")
        for line in fh:
            gi, node, value = line.strip().split(",")
            rows.append((int(gi), int(node), float(value)))
    if not rows:
        raise ValueError("features.csv has no rows")
    num_graphs = max(r[0] for r in rows) + 1
    feats = np.full((num_graphs, g.n, 1), np.nan)
    for gi, node, value in rows:
        feats[gi, node, 0] = value
    if np.isnan(feats).any():
        raise ValueError("features.csv is missing graph/node rows")
    return TransferBatch(
        topology=manifest["topology"],
        n=manifest["n"],
        split=manifest["split"],
        graph=g,
        features=feats,
        labels=_transfer_labels(g.n, manifest["source"], manifest["target"]),
        source=manifest["source"],
        target=manifest["target"],
        seed=manifest["seed"],
    )


# ---------------------------------------------------------------------------
# two-clique bottleneck
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BottleneckCase:
    """Two cliques joined by a path; goal: swap the clique values."""

    graph: Graph
    values: np.ndarray  # (n, 1) initial node values
    swap_targets: np.ndarray  # (n, 1) regression targets
    source_nodes: np.ndarray
    target_nodes: np.ndarray
    path_nodes: np.ndarray
    clique_size: int
    path_len: int
    seed: int


def gen_bottleneck(clique_size: int = 5, path_len: int = 3, seed: int = 0) -> BottleneckCase:
    if clique_size < 3:
        raise ValueError(f"clique_size must be >= 3, got {clique_size}")
    if path_len < 1:
        raise ValueError(f"path_len must be >= 1, got {path_len}")
    c, ell = clique_size, path_len
    n = 2 * c + ell
    source_nodes = np.arange(0, c)
    path_nodes = np.arange(c, c + ell)
    target_nodes = np.arange(c + ell, n)
    edges = []
    for block in (source_nodes, target_nodes):
        for i in range(len(block)):
            for j in range(i + 1, len(block)):
                edges.append((int(block[i]), int(block[j])))
    bridge = [int(source_nodes[-1])] + [int(v) for v in path_nodes] + [int(target_nodes[0])]
    for a, b in zip(bridge, bridge[1:]):
        edges.append((min(a, b), max(a, b)))
    g = build_graph(sorted(edges), n)

    r = rngmod.stream(seed, rngmod.DATA)
    values = np.zeros((n, 1))
    values[source_nodes, 0] = r.random(c)
    values[target_nodes, 0] = -r.random(c)
    swap = np.zeros((n, 1))
    swap[source_nodes, 0] = values[target_nodes, 0]
    swap[target_nodes, 0] = values[source_nodes, 0]
    return BottleneckCase(
        graph=g,
        values=values,
        swap_targets=swap,
        source_nodes=source_nodes,
        target_nodes=target_nodes,
        path_nodes=path_nodes,
        clique_size=c,
        path_len=ell,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# community (SBM) stand-in for the depth suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommunityData:
    """Two-block SBM with Gaussian features and a node split."""

    graph: Graph
    features: np.ndarray  # (n, feat_dim)
    labels: np.ndarray  # (n,) int block labels
    split: dict  # {"train": idx, "val": idx, "test": idx}
    seed: int


def gen_community(
    seed: int = 0,
    n_per_block: int = 100,
    p_in: float = 0.1,
    p_out: float = 0.01,
    feat_dim: int = 16,
    mean_shift: float = 0.5,
) -> CommunityData:
    """Sample the SBM; redraw edges until no node is isolated."""
    n = 2 * n_per_block
    labels = np.repeat(np.arange(2), n_per_block)
    for attempt in range(100):
        r = rngmod.stream(seed, rngmod.DATA, attempt)
        iu, ju = np.triu_indices(n, k=1)
        prob = np.where(labels[iu] == labels[ju], p_in, p_out)
        keep = r.random(iu.size) < prob
        edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
        degrees = np.zeros(n, dtype=np.int64)
        for a, b in edges:
            degrees[a] += 1
            degrees[b] += 1
        if (degrees > 0).all():
            break
    else:
        raise RuntimeError("could not sample an SBM without isolated nodes")
    g = build_graph(edges, n)
    rf = rngmod.stream(seed, rngmod.DATA, 1000)
    means = np.where(labels[:, None] == 0, mean_shift, -mean_shift)
    features = means + rf.standard_normal((n, feat_dim))
    rs = rngmod.stream(seed, rngmod.DATA, 2000)
    perm = rs.permutation(n)
    n_train = n // 2
    n_val = n // 4
    split = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    return CommunityData(graph=g, features=features, labels=labels, split=split, seed=seed)


# ---------------------------------------------------------------------------
# depth suite plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthRun:
    depth: int


def gen_depth_suite(base: Graph, depths: Sequence[int]) -> Tuple[DepthRun, ...]:
    """Plan one recorded run per depth on the given base graph."""
    if base.n < 1:
        raise ValueError("base graph is empty")
    depths = list(depths)
    if not depths:
        raise ValueError("need at least one depth")
    if any(d < 1 for d in depths):
        raise ValueError("depths must be >= 1")
    if depths != sorted(depths):
        raise ValueError("depths must be sorted ascending")
    return tuple(DepthRun(depth=int(d)) for d in depths)
