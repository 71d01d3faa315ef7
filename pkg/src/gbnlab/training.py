"""Adam optimizer, training loops, and the diagnostic probes.

Training is full-batch: each transfer split is packed into one disjoint
union graph (the topology repeated per instance) so a single forward pass
covers the whole split. All randomness is drawn from named streams derived
from the config seed, so a (seed, config) pair fully determines every
reported number.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .graphs import Graph, build_graph, make_partition, propagators
from .models import GbnModel, GcnModel, ModelConfig
from .synth import BottleneckCase, TransferBatch

__all__ = [
    "TrainConfig",
    "RunReport",
    "AdamState",
    "adam_step",
    "replicate_graph",
    "train_transfer",
    "train_classify",
    "train_bottleneck",
    "JacobianProbe",
    "jacobian_probe",
    "propagation_bound_series",
    "energy_curve",
    "config_hash",
    "write_metrics_csv",
    "write_summary_json",
    "run_seeds",
    "worker_count",
]

TASKS = ("transfer", "classification", "bottleneck")
MODEL_KINDS = ("gbn", "gcn")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by all training entry points."""

    task: str
    n_layers: int
    hid_dim: int = 64
    activation: str = "tanh"
    dropout: float = 0.0
    norm: str = "batch"
    lr: float = 1e-3
    w_decay: float = 0.0
    epochs: int = 2000
    seed: int = 0
    patience: int = 100

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_layers": self.n_layers,
            "hid_dim": self.hid_dim,
            "activation": self.activation,
            "dropout": self.dropout,
            "norm": self.norm,
            "lr": self.lr,
            "w_decay": self.w_decay,
            "epochs": self.epochs,
            "seed": self.seed,
            "patience": self.patience,
        }


@dataclass
class RunReport:
    """Per-epoch series plus the final (best-epoch) test metric."""

    train_losses: List[float] = field(default_factory=list)
    val_metrics: List[float] = field(default_factory=list)
    test_metrics: List[float] = field(default_factory=list)
    final_test: float = float("nan")
    best_epoch: int = -1
    epochs_run: int = 0
    wall_time: float = 0.0
    seed: int = 0
    model_kind: str = ""
    final_energies: Optional[np.ndarray] = None
    model: object = None


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: Sequence[ad.Tensor]):
        self.step = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]


def adam_step(
    params: Sequence[ad.Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update with decoupled weight decay (shrink applied first)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must have matching lengths")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {p.values.shape}"
            )
        if weight_decay:
            p.values *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def replicate_graph(g: Graph, copies: int) -> Graph:
    """Disjoint union of ``copies`` relabeled copies of ``g``."""
    if copies < 1:
        raise ValueError(f"copies must be >= 1, got {copies}")
    if copies == 1:
        return g
    offsets = (np.arange(copies) * g.n).reshape(-1, 1, 1)
    stacked = (g.edges[None, :, :] + offsets).reshape(-1, 2)
    return build_graph([(int(a), int(b)) for a, b in stacked], g.n * copies)


def _batch_arrays(batch: TransferBatch):
    copies = batch.num_graphs
    g = replicate_graph(batch.graph, copies)
    x = batch.features.reshape(copies * batch.graph.n, 1)
    y = np.tile(batch.labels, (copies, 1))
    offsets = np.arange(copies) * batch.graph.n
    rows = np.concatenate([offsets + batch.source, offsets + batch.target])
    rows.sort()
    return g, x, y, rows


# ---------------------------------------------------------------------------
# shared loop
# ---------------------------------------------------------------------------


def _build_model(kind: str, cfg: TrainConfig, in_dim: int, out_dim: int):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    model_cfg = ModelConfig(
        in_dim=in_dim,
        hidden=cfg.hid_dim,
        out_dim=out_dim,
        layers=cfg.n_layers,
        activation=cfg.activation,
        norm=cfg.norm,
        dropout=cfg.dropout,
    )
    init_rng = rngmod.stream(cfg.seed, rngmod.INIT)
    cls = GbnModel if kind == "gbn" else GcnModel
    return cls.init(model_cfg, init_rng)


def _fit(
    model,
    cfg: TrainConfig,
    train_loss: Callable[[int], ad.Tensor],
    evaluate: Callable[[], Tuple[float, float]],
    lower_is_better: bool,
) -> RunReport:
    started = time.perf_counter()
    params = [p for _, p in model.named_parameters()]
    state = AdamState(params)
    report = RunReport(seed=cfg.seed, model_kind=model.kind)
    best_val = None
    best_snapshot = None
    stale = 0
    for epoch in range(cfg.epochs):
        for p in params:
            p.grad = None
        with ad.Tape():
            loss = train_loss(epoch)
            ad.backward(loss)
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.values) for p in params
        ]
        adam_step(params, grads, state, cfg.lr, cfg.w_decay)
        val, test = evaluate()
        report.train_losses.append(float(loss.values))
        report.val_metrics.append(val)
        report.test_metrics.append(test)
        improved = best_val is None or (
            val < best_val if lower_is_better else val > best_val
        )
        if improved:
            best_val = val
            best_snapshot = [p.values.copy() for p in params]
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p.values = snap
    report.epochs_run = len(report.train_losses)
    report.final_test = report.test_metrics[report.best_epoch]
    report.wall_time = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# task loops
# ---------------------------------------------------------------------------


def train_transfer(cfg: TrainConfig, datasets, model_kind: str = "gbn") -> RunReport:
    """Masked-MSE training on a transfer split triple."""
    train_b, val_b, test_b = datasets
    if cfg.task != "transfer":
        raise ValueError(f"config task is {cfg.task!r}, expected 'transfer'")
    if cfg.n_layers != train_b.n:
        raise ValueError(
            f"transfer depth must equal the task size parameter: "
            f"n_layers={cfg.n_layers}, task n={train_b.n}"
        )
    tg, tx, ty, trows = _batch_arrays(train_b)
    vg, vx, vy, vrows = _batch_arrays(val_b)
    sg, sx, sy, srows = _batch_arrays(test_b)
    model = _build_model(model_kind, cfg, in_dim=1, out_dim=1)

    def train_loss(epoch: int) -> ad.Tensor:
        out, _ = model.forward(
            tg, tx, training=True, rng=rngmod.stream(cfg.seed, rngmod.DROPOUT, epoch)
        )
        return ad.masked_mse(out, ty, trows)

    def masked_eval(g, x, y, rows) -> float:
        out, _ = model.forward(g, x)
        diff = out.values[rows] - y[rows]
        return float(np.mean(diff * diff))

    def evaluate() -> Tuple[float, float]:
        return masked_eval(vg, vx, vy, vrows), masked_eval(sg, sx, sy, srows)

    report = _fit(model, cfg, train_loss, evaluate, lower_is_better=True)
    _, trace = model.forward(sg, sx, record=True)
    report.final_energies = np.asarray(trace.energies)
    report.model = model
    return report


def constant_predictor_mse(batch: TransferBatch) -> float:
    """MSE of the best constant guess on the masked rows (label variance)."""
    masked = np.concatenate(
        [
            np.full(batch.num_graphs, batch.labels[batch.source, 0]),
            np.full(batch.num_graphs, batch.labels[batch.target, 0]),
        ]
    )
    return float(np.var(masked))


def train_classify(
    cfg: TrainConfig,
    g: Graph,
    features: np.ndarray,
    labels: np.ndarray,
    split: dict,
    model_kind: str = "gbn",
) -> RunReport:
    """Cross-entropy training with early stopping on validation accuracy."""
    if cfg.task != "classification":
        raise ValueError(f"config task is {cfg.task!r}, expected 'classification'")
    for name in ("train", "val", "test"):
        if name not in split:
            raise ValueError(f"missing split {name!r}")
    labels = np.asarray(labels)
    classes = int(labels.max()) + 1
    model = _build_model(model_kind, cfg, in_dim=features.shape[1], out_dim=classes)
    train_rows = np.asarray(split["train"])
    val_rows = np.asarray(split["val"])
    test_rows = np.asarray(split["test"])

    def train_loss(epoch: int) -> ad.Tensor:
        out, _ = model.forward(
            g,
            features,
            training=True,
            rng=rngmod.stream(cfg.seed, rngmod.DROPOUT, epoch),
        )
        return ad.cross_entropy(out, labels, train_rows)

    def accuracy(rows: np.ndarray, logits: np.ndarray) -> float:
        pred = np.argmax(logits[rows], axis=1)  # ties -> lowest class index
        return float(np.mean(pred == labels[rows]))

    def evaluate() -> Tuple[float, float]:
        out, _ = model.forward(g, features)
        return accuracy(val_rows, out.values), accuracy(test_rows, out.values)

    report = _fit(model, cfg, train_loss, evaluate, lower_is_better=False)
    _, trace = model.forward(g, features, record=True)
    report.final_energies = np.asarray(trace.energies)
    report.model = model
    return report


def train_bottleneck(cfg: TrainConfig, case: BottleneckCase, model_kind: str = "gbn") -> RunReport:
    """Full-node MSE training toward the swapped clique values."""
    if cfg.task != "bottleneck":
        raise ValueError(f"config task is {cfg.task!r}, expected 'bottleneck'")
    g = case.graph
    x = case.values
    y = case.swap_targets
    model = _build_model(model_kind, cfg, in_dim=1, out_dim=1)

    def train_loss(epoch: int) -> ad.Tensor:
        out, _ = model.forward(
            g, x, training=True, rng=rngmod.stream(cfg.seed, rngmod.DROPOUT, epoch)
        )
        return ad.mse(out, y)

    def evaluate() -> Tuple[float, float]:
        out, _ = model.forward(g, x)
        mae = float(np.mean(np.abs(out.values - y)))
        return mae, mae

    report = _fit(model, cfg, train_loss, evaluate, lower_is_better=True)
    _, trace = model.forward(g, x, record=True)
    report.final_energies = np.asarray(trace.energies)
    report.model = model
    return report


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JacobianProbe:
    i: int
    j: int
    depth: int
    norm: float
    bound: float

    @property
    def ratio(self) -> float:
        if self.bound <= 0.0:
            return float("inf") if self.norm > 0 else 0.0
        return self.norm / self.bound


def propagation_bound_series(model, g: Graph, x0: np.ndarray, K: int) -> np.ndarray:
    """(sum_{k<=K} T^k) for T frozen at the current coefficients.

    Returns the dense cumulative matrices stacked as (K+1, n, n); entry [K]
    is the bound matrix at depth K. For the boundary-conditioned model T is
    the sum of the two one-sweep propagators at the indicator/coefficients
    computed from the encoded input; for the GCN baseline it is I - L.
    """
    x_enc = model.encode(x0)
    if isinstance(model, GbnModel):
        ind = model.indicator(x_enc, g.n).values.ravel()
        _, _, _, p = model.coefficients(x_enc)
        p_vals = p.values.ravel() if p is not None else np.zeros(g.n)
        part = make_partition(g, ind, p_vals)
        u, v = propagators(g, part)
        T = np.asarray((u.materialize() + v.materialize()).todense())
    else:
        from .graphs import normalized_laplacian

        T = np.eye(g.n) - normalized_laplacian(g).toarray()
    out = np.empty((K + 1, g.n, g.n))
    acc = np.eye(g.n)
    term = np.eye(g.n)
    out[0] = acc
    for k in range(1, K + 1):
        term = term @ T
        acc = acc + term
        out[k] = acc
    return out


def jacobian_probe(model, g: Graph, x0: np.ndarray, i: int, j: int, K: Optional[int] = None) -> JacobianProbe:
    """Exact Jacobian block norm of layer-K output w.r.t. layer-0 input at j.

    One backward pass per output coordinate builds the full block
    d x_i^(K) / d x_j^(0); the bound side freezes the propagation operator at
    the current coefficients and sums its powers.
    """
    if i == j:
        raise ValueError("probe needs two distinct nodes")
    depth = model.config.layers if K is None else K
    base = model.encode(x0).values
    d = base.shape[1]
    block = np.zeros((d, d))
    for c in range(d):
        with ad.Tape():
            leaf = ad.tensor(base)
            xk, _ = model.propagate(g, leaf, k=depth)
            ad.backward(ad.pick(xk, i, c))
        block[c, :] = leaf.grad[j]
    norm = float(np.linalg.norm(block, 2))
    bound = float(propagation_bound_series(model, g, x0, depth)[depth, i, j])
    return JacobianProbe(i=i, j=j, depth=depth, norm=norm, bound=bound)


def energy_curve(model, g: Graph, x0: np.ndarray, k_max: Optional[int] = None) -> np.ndarray:
    """Per-layer Dirichlet energies of a recorded forward pass."""
    _, trace = model.forward(g, x0, k=k_max, record=True)
    return np.asarray(trace.energies)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_metrics_csv(path, report: RunReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_metric,test_metric\n")
        for epoch, (loss, val, test) in enumerate(
            zip(report.train_losses, report.val_metrics, report.test_metrics)
        ):
            fh.write(f"{epoch},{loss!r},{val!r},{test!r}\n")


def write_summary_json(path, metrics: Sequence[float], seeds: Sequence[int], config: dict) -> dict:
    summary = {
        "mean": float(np.mean(metrics)),
        "std": float(np.std(metrics)),
        "seeds": [int(s) for s in seeds],
        "config_hash": config_hash(config),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def worker_count(n_jobs: int) -> int:
    """Worker cap: GBN_THREADS bounds the fan-out, default serial."""
    raw = os.environ.get("GBN_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ValueError(f"GBN_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(n_jobs, cap))


def run_seeds(worker: Callable[[int], object], seeds: Sequence[int]):
    """Run one job per seed, fanning out up to GBN_THREADS workers."""
    workers = worker_count(len(seeds))
    if workers == 1:
        return [worker(int(s)) for s in seeds]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, [int(s) for s in seeds]))
