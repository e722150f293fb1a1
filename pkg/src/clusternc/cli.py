"""Command-line entry point.

Each subcommand reads an optional JSON config with ``task``, ``scaffold``,
``train``, ``weights`` and ``experiment`` blocks, applies flag overrides, and
writes its report under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .embedding import write_embedding_csv
from .errors import ClusterNCError, DivergenceDetected
from .experiments import (
    DESK_TASK,
    DESK_TRAIN,
    STABILITY_VARIANTS,
    _config_comment,
    _csv,
    _jsonable,
    run_ablation,
    run_cluster_sweep,
    run_clustering_ablation,
    run_stability,
    run_sweep,
)
from .losses import LossWeights
from .scaffold import Algorithm, cluster, cosine_silhouette, partition_agreement, select_scaffold, single_cluster
from .synth import generate_task
from .trainer import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PROPERTY = 0, 2, 3, 4
BLOCKS = ("task", "scaffold", "train", "weights", "experiment")
DEFAULT_EXPERIMENT = {
    "which_lambda": "lambda_tetf",
    "factors": [0.5, 1.0, 2.0],
    "taus": None,
    "variants": list(STABILITY_VARIANTS),
    "sizes": [4, 8, 16, 32],
    "algorithms": [a.value for a in Algorithm],
}


class ConfigError(ClusterNCError):
    pass


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Desk defaults, then the JSON file, then ``block.key=value`` overrides."""
    cfg = {
        "task": dict(DESK_TASK),
        "scaffold": {"algorithm": Algorithm.KMEANS_COSINE.value, "M": 4, "seed": 0},
        "train": dict(DESK_TRAIN),
        "weights": {},
        "experiment": dict(DEFAULT_EXPERIMENT),
    }
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict) or set(user) - set(BLOCKS):
            raise ConfigError(f"config must be an object with blocks {BLOCKS}")
        for block, values in user.items():
            if not isinstance(values, dict):
                raise ConfigError(f"block {block!r} must be an object")
            cfg[block].update(values)
    for item in overrides:
        key, sep, raw = item.partition("=")
        block, dot, name = key.partition(".")
        if not sep or not dot or block not in BLOCKS:
            raise ConfigError(f"override {item!r} must look like block.key=value")
        try:
            cfg[block][name] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[block][name] = raw
    return cfg


def build_train_config(cfg: dict, seed: int = 0) -> TrainConfig:
    try:
        weights = LossWeights(**cfg["weights"])
        return TrainConfig(**{**cfg["train"], "weights": weights, "seed": seed})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_task(cfg: dict, **changes):
    try:
        return generate_task(**{**cfg["task"], **changes})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_scaffold(task, block: dict):
    protos = task.frozen_prototypes
    algorithm = Algorithm(block.get("algorithm", Algorithm.KMEANS_COSINE.value))
    if "candidate_Ms" in block:
        return select_scaffold(protos, block["candidate_Ms"], algorithm, block.get("seeds", [block.get("seed", 0)]))
    m = int(block.get("M", 4))
    if m == 1:
        return single_cluster(protos)
    return cluster(protos, m, algorithm, int(block.get("seed", 0)))


def _seed_list(args) -> list[int]:
    return list(range(args.seed, args.seed + args.seeds))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _emit(result, cfg: dict, args) -> int:
    if args.out:
        result.write(args.out, cfg)
    print(_csv(result.summary), end="")
    for name, ok in result.checks.items():
        print(f"check {name}: {'PASS' if ok else 'FAIL'}")
    if args.assert_props and not result.passed:
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_gen_task(args, cfg) -> int:
    task = build_task(cfg)
    out = Path(args.out or "task")
    task.save(out)
    _write_json(out / "config.json", cfg)
    print(f"wrote task with {len(task.classes)} classes to {out}")
    return EXIT_OK


def cmd_cluster(args, cfg) -> int:
    task = build_task(cfg)
    sc = build_scaffold(task, cfg["scaffold"])
    info = {
        "M": sc.n_clusters,
        "silhouette": cosine_silhouette(task.frozen_prototypes, sc) if 2 <= sc.n_clusters < len(task.classes) else None,
        "agreement_with_planted": partition_agreement(sc.mapping, task.planted_clusters),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sc.save(out / "scaffold.json")
        _write_json(out / "cluster_report.json", {"config": cfg, **info})
    print(json.dumps(_jsonable(info), sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    task = build_task(cfg)
    sc = build_scaffold(task, cfg["scaffold"])
    state, report = train(task, sc, build_train_config(cfg, args.seed))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        full = {**report.to_json(), "cli_config": cfg}
        _write_json(out / "report.json", full)
        rows = [{"epoch": i, **b.to_json()} for i, b in enumerate(report.per_epoch)]
        (out / "history.csv").write_text(_config_comment(cfg) + _csv(rows))
        write_embedding_csv(out / "prototypes.csv", state.prototypes)
    print(json.dumps(_jsonable(report.final_metrics["accuracy"]), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    task = build_task(cfg)
    sc = build_scaffold(task, cfg["scaffold"])
    result = run_ablation(task, sc, build_train_config(cfg), _seed_list(args), args.workers)
    return _emit(result, cfg, args)


def cmd_sweep(args, cfg) -> int:
    exp = cfg["experiment"]
    which = exp["which_lambda"]
    base = build_train_config(cfg)
    default = getattr(base.weights, which, None)
    if default is None:
        raise ConfigError(f"unknown weight {which!r}")
    values = exp.get("values") or [default * f for f in exp["factors"]]
    taus = exp.get("taus") or [cfg["task"].get("tau", DESK_TASK["tau"])]
    results = []
    for tau in taus:
        task = build_task(cfg, tau=tau)
        sc = build_scaffold(task, cfg["scaffold"])
        results.append(run_sweep(task, sc, base, which, values, _seed_list(args), args.workers))
    merged = results[0]
    for r in results[1:]:
        merged.records += r.records
        merged.summary += r.summary
        merged.checks = {k: merged.checks[k] and r.checks[k] for k in merged.checks}
    merged.info = {"harmonic_spread_by_tau": {str(r.info["tau"]): r.info["harmonic_spread"] for r in results}}
    return _emit(merged, cfg, args)


def cmd_stability(args, cfg) -> int:
    task = build_task(cfg)
    sc = build_scaffold(task, cfg["scaffold"])
    result = run_stability(task, sc, build_train_config(cfg), _seed_list(args), cfg["experiment"]["variants"], args.workers)
    return _emit(result, cfg, args)


def cmd_cluster_sweep(args, cfg) -> int:
    task = build_task(cfg)
    block = cfg["scaffold"]
    result = run_cluster_sweep(
        task,
        build_train_config(cfg),
        cfg["experiment"]["sizes"],
        _seed_list(args),
        Algorithm(block.get("algorithm", Algorithm.KMEANS_COSINE.value)),
        int(block.get("seed", 0)),
        args.workers,
    )
    return _emit(result, cfg, args)


def cmd_cluster_ablate(args, cfg) -> int:
    task = build_task(cfg)
    block = cfg["scaffold"]
    result = run_clustering_ablation(
        task,
        build_train_config(cfg),
        cfg["experiment"]["algorithms"],
        _seed_list(args),
        int(block.get("M", 4)),
        int(block.get("seed", 0)),
        args.workers,
    )
    return _emit(result, cfg, args)


COMMANDS = {
    "gen-task": (cmd_gen_task, "generate a synthetic task and save it"),
    "cluster": (cmd_cluster, "cluster the frozen prototypes once"),
    "train": (cmd_train, "train prototypes for one seed"),
    "ablate": (cmd_ablate, "loss-component ablation over seeds"),
    "sweep": (cmd_sweep, "sweep one loss weight"),
    "stability": (cmd_stability, "seed spread of baseline, single-cluster ETF and CPT"),
    "cluster-sweep": (cmd_cluster_sweep, "vary the number of classes per cluster"),
    "cluster-ablate": (cmd_cluster_ablate, "compare clustering algorithms"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusternc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="BLOCK.KEY=VALUE", help="override one config value (JSON literal)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="first training seed")
        p.add_argument("--seeds", type=int, default=10, help="number of consecutive training seeds")
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--assert", dest="assert_props", action="store_true", help="exit 4 when a property check fails")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        if args.seeds < 1 or args.workers < 1:
            raise ConfigError("--seeds and --workers must be >= 1")
        cfg = load_config(args.config, args.set)
        return handler(args, cfg)
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ClusterNCError, KeyError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
