"""Command-line entry point for experiments and diagnostics.

Every verb resolves a full config (defaults, then the config file, then
flags), writes it back out as ``config_echo.json`` with a content hash, and
emits plain CSV/JSON artifacts. Re-running with ``--config config_echo.json``
reproduces the artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import ACTIVATIONS
from .graphs import complete_graph, cycle_graph, normalized_laplacian, path_graph
from .spectral import cylinder_gap_experiment, eig_sym
from .synth import (
    TOPOLOGIES,
    gen_bottleneck,
    gen_community,
    gen_transfer,
    gen_transfer_split,
    save_transfer_dataset,
)
from .training import (
    TrainConfig,
    _build_model,
    config_hash,
    constant_predictor_mse,
    energy_curve,
    jacobian_probe,
    run_seeds,
    train_bottleneck,
    train_classify,
    train_transfer,
    write_metrics_csv,
    write_summary_json,
)

__all__ = ["ConfigError", "UsageError", "load_config", "run", "main"]

VERBS = (
    "transfer",
    "classify",
    "energy",
    "jacobian",
    "spectral",
    "cylinder",
    "bottleneck",
    "gen",
)

NORM_KINDS = ("batch", "layer", "none")
MODEL_KINDS = ("gbn", "gcn")
SPECTRAL_TOPOLOGIES = ("path", "cycle", "complete")


class UsageError(Exception):
    """Bad invocation: unknown verb, malformed flags."""


class ConfigError(Exception):
    """Invalid config content; ``pointer`` is the JSON pointer of the field."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"config error at {pointer}: {message}")


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _as_float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _as_str(options=None):
    def cast(v):
        if not isinstance(v, str):
            raise ValueError(f"expected a string, got {v!r}")
        if options is not None and v not in options:
            raise ValueError(f"expected one of {list(options)}, got {v!r}")
        return v

    return cast


def _positive_int(v):
    v = _as_int(v)
    if v < 1:
        raise ValueError(f"must be >= 1, got {v}")
    return v


def _seed_list(v):
    if not isinstance(v, list) or not v:
        raise ValueError(f"expected a non-empty list of integers, got {v!r}")
    return [_as_int(s) for s in v]


def _counts(v):
    if not isinstance(v, list) or len(v) != 3:
        raise ValueError(f"expected [train, val, test] counts, got {v!r}")
    return v  # elements validated with their own pointers


_TRAIN_SCHEMA = {
    "n_layers": _positive_int,
    "hid_dim": _positive_int,
    "activation": _as_str(ACTIVATIONS),
    "dropout": _as_float,
    "norm": _as_str(NORM_KINDS),
    "lr": _as_float,
    "w_decay": _as_float,
    "epochs": _positive_int,
    "seed": _as_int,
    "patience": _positive_int,
}

_VERB_SCHEMA = {
    "transfer": {
        **_TRAIN_SCHEMA,
        "task": _as_str(("transfer",)),
        "topology": _as_str(TOPOLOGIES),
        "distance": _positive_int,
        "counts": _counts,
        "model": _as_str(MODEL_KINDS),
        "seeds": _seed_list,
    },
    "classify": {
        **_TRAIN_SCHEMA,
        "task": _as_str(("classification",)),
        "model": _as_str(MODEL_KINDS),
        "seeds": _seed_list,
        "n_per_block": _positive_int,
    },
    "bottleneck": {
        **_TRAIN_SCHEMA,
        "task": _as_str(("bottleneck",)),
        "clique": _positive_int,
        "path_len": _positive_int,
        "model": _as_str(MODEL_KINDS),
        "seeds": _seed_list,
    },
    "energy": {
        **_TRAIN_SCHEMA,
        "task": _as_str(("classification",)),
        "model": _as_str(MODEL_KINDS),
        "n_per_block": _positive_int,
    },
    "jacobian": {
        **_TRAIN_SCHEMA,
        "task": _as_str(("transfer",)),
        "topology": _as_str(TOPOLOGIES),
        "distance": _positive_int,
        "model": _as_str(MODEL_KINDS),
        "source": _as_int,
        "target": _as_int,
        "depth": _positive_int,
    },
    "spectral": {
        "topology": _as_str(SPECTRAL_TOPOLOGIES),
        "nodes": _positive_int,
        "seed": _as_int,
    },
    "cylinder": {
        "length": _positive_int,
        "ring": _positive_int,
        "profile": _as_str(("constant", "cosh")),
        "seed": _as_int,
    },
    "gen": {
        "topology": _as_str(TOPOLOGIES),
        "distance": _positive_int,
        "counts": _counts,
        "seed": _as_int,
    },
}

_TASK_DEFAULTS = {
    "transfer": {"hid_dim": 64, "activation": "tanh"},
    "classification": {"hid_dim": 512, "activation": "gelu"},
    "bottleneck": {"hid_dim": 64, "activation": "tanh"},
}

_VERB_TASK = {
    "transfer": "transfer",
    "classify": "classification",
    "energy": "classification",
    "jacobian": "transfer",
    "bottleneck": "bottleneck",
}


def _base_config(verb: str) -> dict:
    if verb == "spectral":
        return {"topology": "cycle", "nodes": 10, "seed": 0}
    if verb == "cylinder":
        return {"length": 20, "ring": 6, "profile": "constant", "seed": 0}
    if verb == "gen":
        return {"topology": "line", "distance": 5, "counts": [1000, 100, 100], "seed": 0}
    task = _VERB_TASK[verb]
    cfg = {
        "task": task,
        "n_layers": 2,
        "dropout": 0.0,
        "norm": "batch",
        "lr": 1e-3,
        "w_decay": 0.0,
        "epochs": 2000,
        "seed": 0,
        "patience": 100,
        "model": "gbn",
        **_TASK_DEFAULTS[task],
    }
    if verb == "transfer":
        cfg.update(topology="ring", distance=10, counts=[1000, 100, 100], seeds=None)
    elif verb == "classify":
        cfg.update(seeds=None, n_per_block=100)
    elif verb == "energy":
        cfg.update(n_per_block=100)
    elif verb == "jacobian":
        cfg.update(topology="ring", distance=10, source=None, target=None, depth=None)
    if verb == "bottleneck":
        cfg.update(clique=5, path_len=3, seeds=None)
    return cfg


def _validate(verb: str, raw: dict) -> dict:
    schema = _VERB_SCHEMA[verb]
    out = {}
    for key, value in raw.items():
        if key in ("config_hash", "verb"):
            continue  # echo metadata, recomputed on write
        if key not in schema:
            raise ConfigError(f"/{key}", "unknown key")
        if key == "counts":
            counts = _counts(value)
            for idx, c in enumerate(counts):
                try:
                    _positive_int(c)
                except ValueError as exc:
                    raise ConfigError(f"/counts/{idx}", str(exc)) from exc
            out[key] = [int(c) for c in counts]
            continue
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"/{key}", str(exc)) from exc
    if "lr" in out and out["lr"] <= 0:
        raise ConfigError("/lr", f"must be positive, got {out['lr']}")
    if "w_decay" in out and out["w_decay"] < 0:
        raise ConfigError("/w_decay", f"must be >= 0, got {out['w_decay']}")
    if "dropout" in out and not 0.0 <= out["dropout"] < 1.0:
        raise ConfigError("/dropout", f"must be in [0, 1), got {out['dropout']}")
    return out


def _read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return raw


def _resolve_config(verb: str, config_path, overrides: dict) -> dict:
    """Defaults, then the config file, then flag overrides; strict at each step.

    When the caller never names n_layers, the transfer-family verbs tie the
    depth to the task's distance parameter.
    """
    cfg = _base_config(verb)
    provided = set(overrides)
    if config_path is not None:
        file_cfg = _validate(verb, _read_config_file(config_path))
        provided |= set(file_cfg)
        cfg.update(file_cfg)
    cfg.update(_validate(verb, overrides))
    if verb in ("transfer", "jacobian") and "n_layers" not in provided:
        cfg["n_layers"] = cfg["distance"]
    if verb == "transfer" and cfg["n_layers"] != cfg["distance"]:
        raise ConfigError("/n_layers", "transfer depth must equal the distance parameter")
    return cfg


def load_config(path, verb: str = "transfer") -> TrainConfig:
    """Strict config file loading for the training verbs."""
    return _train_config(verb, _resolve_config(verb, path, {}))


def _train_config(verb: str, cfg: dict) -> TrainConfig:
    return TrainConfig(
        task=_VERB_TASK[verb],
        n_layers=cfg["n_layers"],
        hid_dim=cfg["hid_dim"],
        activation=cfg["activation"],
        dropout=cfg["dropout"],
        norm=cfg["norm"],
        lr=cfg["lr"],
        w_decay=cfg["w_decay"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        patience=cfg["patience"],
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _echo_config(out_dir: Path, verb: str, cfg: dict) -> dict:
    serializable = {k: v for k, v in cfg.items() if v is not None}
    echo = dict(serializable)
    echo["verb"] = verb
    echo["config_hash"] = config_hash(serializable)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config_echo.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return serializable


def _seed_metrics_name(seed: int, seeds) -> str:
    return "metrics.csv" if len(seeds) == 1 else f"metrics_seed{seed}.csv"


def _run_training_verb(verb: str, cfg: dict, out_dir: Path) -> str:
    seeds = cfg.get("seeds") or [cfg["seed"]]
    kind = cfg["model"]

    if verb == "transfer":
        data = gen_transfer_split(cfg["topology"], cfg["distance"], tuple(cfg["counts"]), cfg["seed"])

        def one(seed: int):
            run_cfg = _train_config(verb, {**cfg, "seed": seed})
            return train_transfer(run_cfg, data, kind)

        extra = f"const_mse={constant_predictor_mse(data[2])!r}"
    elif verb == "classify":
        data = gen_community(seed=cfg["seed"], n_per_block=cfg["n_per_block"])

        def one(seed: int):
            run_cfg = _train_config(verb, {**cfg, "seed": seed})
            return train_classify(run_cfg, data.graph, data.features, data.labels, data.split, kind)

        extra = f"nodes={data.graph.n}"
    else:
        case = gen_bottleneck(cfg["clique"], cfg["path_len"], cfg["seed"])

        def one(seed: int):
            run_cfg = _train_config(verb, {**cfg, "seed": seed})
            return train_bottleneck(run_cfg, case, kind)

        extra = f"nodes={case.graph.n}"

    reports = run_seeds(one, seeds)
    for seed, report in zip(seeds, reports):
        write_metrics_csv(out_dir / _seed_metrics_name(seed, seeds), report)
    finals = [r.final_test for r in reports]
    summary = write_summary_json(out_dir / "summary.json", finals, seeds, cfg)
    return (
        f"{verb} model={kind} seeds={len(seeds)} "
        f"mean={summary['mean']:.6g} std={summary['std']:.6g} {extra}"
    )


def _run_energy(cfg: dict, out_dir: Path) -> str:
    data = gen_community(seed=cfg["seed"], n_per_block=cfg["n_per_block"])
    run_cfg = _train_config("energy", cfg)
    model = _build_model(cfg["model"], run_cfg, data.features.shape[1], 2)
    curve = energy_curve(model, data.graph, data.features)
    with open(out_dir / "energy.csv", "w", encoding="utf-8") as fh:
        fh.write("layer,dirichlet_energy\n")
        for k, value in enumerate(curve, start=1):
            fh.write(f"{k},{float(value)!r}\n")
    return (
        f"energy model={cfg['model']} layers={cfg['n_layers']} "
        f"first={curve[0]:.6g} last={curve[-1]:.6g}"
    )


def _run_jacobian(cfg: dict, out_dir: Path) -> str:
    task = gen_transfer(cfg["topology"], cfg["distance"], cfg["seed"])
    source = cfg["source"] if cfg.get("source") is not None else task.source
    target = cfg["target"] if cfg.get("target") is not None else task.target
    depth = cfg["depth"] if cfg.get("depth") is not None else cfg["n_layers"]
    run_cfg = _train_config("jacobian", cfg)
    model = _build_model(cfg["model"], run_cfg, 1, 1)
    probe = jacobian_probe(model, task.graph, task.features, target, source, K=depth)
    payload = {
        "source": int(source),
        "target": int(target),
        "depth": int(probe.depth),
        "norm": probe.norm,
        "bound": probe.bound,
        "ratio": probe.ratio,
    }
    with open(out_dir / "jacobian.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return (
        f"jacobian model={cfg['model']} {cfg['topology']} n={cfg['distance']} "
        f"depth={depth} norm={probe.norm:.6g} bound={probe.bound:.6g}"
    )


def _run_spectral(cfg: dict, out_dir: Path) -> str:
    builders = {"path": path_graph, "cycle": cycle_graph, "complete": complete_graph}
    g = builders[cfg["topology"]](cfg["nodes"])
    rep = eig_sym(normalized_laplacian(g).toarray())
    with open(out_dir / "spectrum.csv", "w", encoding="utf-8") as fh:
        fh.write("index,eigenvalue\n")
        for idx, lam in enumerate(rep.eigenvalues):
            fh.write(f"{idx},{float(lam)!r}\n")
    return (
        f"spectral {cfg['topology']} n={cfg['nodes']} "
        f"gap={rep.spectral_gap:.6g} lambda_max={rep.eigenvalues[-1]:.6g}"
    )


def _run_cylinder(cfg: dict, out_dir: Path) -> str:
    gaps = cylinder_gap_experiment(cfg["length"], cfg["ring"], profile=cfg["profile"])
    with open(out_dir / "cylinder.json", "w", encoding="utf-8") as fh:
        fh.write(gaps.to_json())
        fh.write("\n")
    verdict = "ordered" if gaps.ordered else "violated"
    return (
        f"cylinder m={cfg['length']} r={cfg['ring']} profile={cfg['profile']} "
        f"dirichlet={gaps.dirichlet:.6g} closed={gaps.closed:.6g} "
        f"neumann={gaps.neumann:.6g} {verdict}"
    )


def _run_gen(cfg: dict, out_dir: Path) -> str:
    splits = gen_transfer_split(cfg["topology"], cfg["distance"], tuple(cfg["counts"]), cfg["seed"])
    for name, batch in zip(("train", "val", "test"), splits):
        save_transfer_dataset(batch, out_dir / name)
    sizes = ", ".join(str(b.num_graphs) for b in splits)
    return f"gen {cfg['topology']} n={cfg['distance']} splits=({sizes}) -> {out_dir}"


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gbnlab", description=__doc__)
    sub = parser.add_subparsers(dest="verb", metavar="|".join(VERBS))

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("transfer", help="train on a source-to-target transfer split")
    common(p)
    p.add_argument("--topology", choices=TOPOLOGIES, default=None)
    p.add_argument("--distance", type=int, default=None)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated training seeds")

    p = sub.add_parser("classify", help="train on the two-community stand-in")
    common(p)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated training seeds")

    p = sub.add_parser("energy", help="per-layer Dirichlet energy of one forward pass")
    common(p)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--layers", type=int, default=None)

    p = sub.add_parser("jacobian", help="input-output Jacobian norm vs the series bound")
    common(p)
    p.add_argument("--topology", choices=TOPOLOGIES, default=None)
    p.add_argument("--distance", type=int, default=None)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--source", type=int, default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)

    p = sub.add_parser("spectral", help="Laplacian spectrum of a named graph family")
    common(p)
    p.add_argument("--topology", choices=SPECTRAL_TOPOLOGIES, default=None)
    p.add_argument("--nodes", type=int, default=None)

    p = sub.add_parser("cylinder", help="absorbing/free/reflecting gap ordering on a tube")
    common(p)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--ring", type=int, default=None)
    p.add_argument("--profile", choices=("constant", "cosh"), default=None)

    p = sub.add_parser("bottleneck", help="train the two-clique swap case study")
    common(p)
    p.add_argument("--clique", type=int, default=None)
    p.add_argument("--path-len", type=int, default=None)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated training seeds")

    p = sub.add_parser("gen", help="write a transfer dataset to disk")
    common(p)
    p.add_argument("--topology", choices=TOPOLOGIES, default=None)
    p.add_argument("--distance", type=int, default=None)

    return parser


def _flag_overrides(verb: str, args: argparse.Namespace) -> dict:
    overrides = {}

    def put(key, value):
        if value is not None:
            overrides[key] = value

    put("seed", args.seed)
    if verb in ("transfer", "jacobian", "gen"):
        put("topology", getattr(args, "topology", None))
        put("distance", getattr(args, "distance", None))
    if verb == "spectral":
        put("topology", args.topology)
        put("nodes", args.nodes)
    if verb == "cylinder":
        put("length", args.length)
        put("ring", args.ring)
        put("profile", args.profile)
    if verb in ("transfer", "classify", "energy", "jacobian", "bottleneck"):
        put("model", getattr(args, "model", None))
    if verb in ("classify", "energy"):
        put("n_layers", getattr(args, "layers", None))
    if verb == "jacobian":
        put("source", args.source)
        put("target", args.target)
        put("depth", args.depth)
    if verb == "bottleneck":
        put("clique", args.clique)
        put("path_len", args.path_len)
        put("n_layers", getattr(args, "depth", None))
    if verb in ("transfer", "classify", "bottleneck"):
        raw = getattr(args, "seeds", None)
        if raw is not None:
            try:
                overrides["seeds"] = [int(part) for part in str(raw).split(",") if part != ""]
            except ValueError as exc:
                raise UsageError(f"--seeds must be comma-separated integers, got {raw!r}") from exc
    return overrides


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.verb is None:
            raise UsageError("a verb is required")
        verb = args.verb
        cfg = _resolve_config(verb, args.config, _flag_overrides(verb, args))
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)

    out_dir = Path(args.out) if args.out is not None else Path("runs") / verb
    try:
        cfg = _echo_config(out_dir, verb, cfg)
        if verb in ("transfer", "classify", "bottleneck"):
            line = _run_training_verb(verb, cfg, out_dir)
        elif verb == "energy":
            line = _run_energy(cfg, out_dir)
        elif verb == "jacobian":
            line = _run_jacobian(cfg, out_dir)
        elif verb == "spectral":
            line = _run_spectral(cfg, out_dir)
        elif verb == "cylinder":
            line = _run_cylinder(cfg, out_dir)
        else:
            line = _run_gen(cfg, out_dir)
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    print(line)
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
