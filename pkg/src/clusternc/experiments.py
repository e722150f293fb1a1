"""Seeded experiment runners: ablation, lambda sweeps, stability, cluster sweeps.

Every runner fans independent (variant, seed) cells out to a process pool
and sorts the results by (variant order, seed) before aggregating, so output
does not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidConfig
from .losses import loss_tetf
from .metrics import config_hash
from .scaffold import Algorithm, ClusterScaffold, cluster, partition_agreement, single_cluster
from .synth import SyntheticTask
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# Desk-scale defaults. Features carry no cluster-center component and the
# within-cluster class directions form a simplex, so the learnable prototypes
# start more clustered than the data they must separate.
DESK_TASK = {
    "m_planted": 4,
    "classes_per_cluster": 8,
    "d": 32,
    "intra_cluster_angle": 30.0,
    "feature_angle": 90.0,
    "simplex_tilts": True,
    "feature_noise": 0.25,
    "tau": 0.06,
    "seed": 0,
}
DESK_TRAIN = {"lr0": 0.1, "init_noise": 0.1, "epochs": 60}

ABLATION_ROWS = (
    ("1", "none", {"use_tetf": False, "use_cc": False, "use_rs": False}),
    ("2", "tetf", {"use_tetf": True, "use_cc": False, "use_rs": False}),
    ("3", "tetf+cc", {"use_tetf": True, "use_cc": True, "use_rs": False}),
    ("4", "tetf+rs", {"use_tetf": True, "use_cc": False, "use_rs": True}),
    ("5", "tetf+cc+rs", {"use_tetf": True, "use_cc": True, "use_rs": True}),
)
STABILITY_VARIANTS = ("standard", "global_etf", "cpt_no_rs", "cpt")
SWEEP_SPREAD_LIMIT = 3.0
STD_RATIO_LIMIT = 0.75
METRICS = ("base", "new", "harmonic", "head", "tail", "etf_max", "intra_spread", "rank_before", "rank_after", "drift", "tetf_centered")
ACCURACY_KEYS = {"base", "new", "harmonic", "head", "tail"}


def desk_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_TRAIN, **overrides})


@dataclass(frozen=True)
class Cell:
    """One training run: a variant label, a seed, and what to train."""

    variant: str
    seed: int
    task: SyntheticTask
    scaffold: ClusterScaffold
    cfg: TrainConfig
    extra: tuple = ()


def run_cell(cell: Cell) -> dict:
    state, report = train(cell.task, cell.scaffold, cell.cfg)
    acc = report.final_metrics["accuracy"]
    geo = report.final_metrics["geometry"]
    conf = list(geo["etf_conformance"].values())
    _, centered, _ = loss_tetf(state.prototypes, cell.scaffold)
    row = {"variant": cell.variant, "seed": cell.seed, **dict(cell.extra)}
    row.update({k: acc[k] for k in ("base", "new", "harmonic", "head", "tail")})
    row.update(
        etf_max=max(conf) if conf else 0.0,
        intra_spread=geo["intra_class_spread"],
        rank_before=geo["effective_rank_before"],
        rank_after=geo["effective_rank_after"],
        drift=geo["centroid_drift"],
        tetf_centered=centered,
    )
    return row


def run_cells(cells: Sequence[Cell], workers: int = 1) -> list[dict]:
    """Run cells, serially or on a process pool; results keep input order."""
    if workers <= 1 or len(cells) <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells))


def _check_seeds(seeds: Sequence[int], minimum: int = 1) -> list[int]:
    seeds = sorted(int(s) for s in seeds)
    if len(seeds) < minimum:
        raise InvalidConfig(f"need at least {minimum} seed(s), got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise InvalidConfig("seeds must be distinct")
    return seeds


@dataclass
class ExperimentResult:
    """Per-(variant, seed) records, a seed-aggregated summary and named checks."""

    kind: str
    records: list
    summary: list
    checks: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def column(self, variant: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.records if r["variant"] == variant], dtype=float)

    def stat(self, variant: str, metric: str, what: str = "mean") -> float:
        for row in self.summary:
            if row["variant"] == variant:
                return row[f"{metric}_{what}"]
        raise KeyError(variant)

    def to_json(self, config: dict | None = None) -> dict:
        out = {
            "kind": self.kind,
            "records": self.records,
            "summary": self.summary,
            "checks": self.checks,
            "info": self.info,
        }
        if config is not None:
            out = {"config": config, "config_hash": config_hash(config), **out}
        return out

    def write(self, directory, config: dict) -> Path:
        """Write runs.csv, summary.csv and report.json under ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        header = _config_comment(config)
        (out / "runs.csv").write_text(header + _csv(self.records))
        (out / "summary.csv").write_text(header + _csv(self.summary))
        (out / "report.json").write_text(json.dumps(_jsonable(self.to_json(config)), indent=2, sort_keys=True) + "\n")
        return out


def summarize(records: Sequence[dict], order: Sequence[str], keys: Sequence[str] = ()) -> list[dict]:
    """Seed mean and population std of every metric, per variant in ``order``."""
    out = []
    for variant in order:
        rows = [r for r in records if r["variant"] == variant]
        if not rows:
            continue
        row = {"variant": variant, "n_seeds": len(rows)}
        for k in keys:
            row[k] = rows[0][k]
        for m in METRICS:
            vals = np.array([r[m] for r in rows], dtype=float)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def _fmt(key: str, value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            return "nan"
        base = key.rsplit("_", 1)[0] if key.endswith(("_mean", "_std")) else key
        return f"{value:.2f}" if base in ACCURACY_KEYS else f"{value:.6f}"
    return str(value)


def _csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    writer.writerow(cols)
    for r in rows:
        writer.writerow([_fmt(c, r[c]) for c in cols])
    return buf.getvalue()


def _config_comment(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return f"# config_hash={config_hash(config)} config={blob}\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# -- runners -------------------------------------------------------------------


def run_ablation(task, scaffold, base_cfg: TrainConfig, seeds, workers: int = 1) -> ExperimentResult:
    """The five component rows: none, TETF, TETF+CC, TETF+RS, TETF+CC+RS."""
    seeds = _check_seeds(seeds)
    cells = [
        Cell(name, s, task, scaffold, replace(base_cfg, seed=s, **flags), (("row", row),))
        for row, name, flags in ABLATION_ROWS
        for s in seeds
    ]
    records = run_cells(cells, workers)
    summary = summarize(records, [name for _, name, _ in ABLATION_ROWS], keys=("row",))
    tail = {row: next(r["tail_mean"] for r in summary if r["row"] == row) for row, _, _ in ABLATION_ROWS}
    checks = {
        "row5_tail_ge_row1": tail["5"] >= tail["1"],
        "tail_row5_ge_row2_ge_row1": tail["5"] >= tail["2"] >= tail["1"],
    }
    return ExperimentResult("ablation", records, summary, checks)


def run_sweep(task, scaffold, cfg: TrainConfig, which_lambda: str, values, seeds, workers: int = 1) -> ExperimentResult:
    """Vary one loss weight over ``values`` with the other two fixed."""
    if which_lambda not in ("lambda_tetf", "lambda_cc", "lambda_rs"):
        raise InvalidConfig(f"unknown weight {which_lambda!r}")
    values = [float(v) for v in values]
    if not values:
        raise InvalidConfig("sweep needs at least one value")
    seeds = _check_seeds(seeds)
    cells = []
    for v in values:
        weights = replace(cfg.weights, **{which_lambda: v})
        label = f"{which_lambda}={v:g}"
        extra = (("tau", task.tau), ("lambda", which_lambda), ("value", v))
        cells += [Cell(label, s, task, scaffold, replace(cfg, weights=weights, seed=s), extra) for s in seeds]
    records = run_cells(cells, workers)
    order = list(dict.fromkeys(c.variant for c in cells))
    summary = summarize(records, order, keys=("tau", "lambda", "value"))
    h = [r["harmonic_mean"] for r in summary]
    spread = max(h) - min(h)
    info = {"harmonic_spread": spread, "tau": task.tau}
    return ExperimentResult("sweep", records, summary, {"spread_le_3": spread <= SWEEP_SPREAD_LIMIT}, info)


def stability_cells(task, scaffold, cfg: TrainConfig, seeds, variants=STABILITY_VARIANTS) -> list[Cell]:
    flat = single_cluster(task.frozen_prototypes)
    spec = {
        "standard": (scaffold, {"use_tetf": False, "use_cc": False, "use_rs": False}),
        "global_etf": (flat, {"use_tetf": True, "use_cc": False, "use_rs": False}),
        "cpt_no_rs": (scaffold, {"use_tetf": True, "use_cc": True, "use_rs": False}),
        "cpt": (scaffold, {"use_tetf": True, "use_cc": True, "use_rs": True}),
    }
    unknown = set(variants) - set(spec)
    if unknown:
        raise InvalidConfig(f"unknown stability variants {sorted(unknown)}")
    return [Cell(v, s, task, spec[v][0], replace(cfg, seed=s, **spec[v][1])) for v in variants for s in seeds]


def run_stability(task, scaffold, cfg: TrainConfig, seeds, variants=STABILITY_VARIANTS, workers: int = 1) -> ExperimentResult:
    """Seed spread of H for the baseline, the single-cluster ETF and CPT with/without RS."""
    seeds = _check_seeds(seeds, minimum=5)
    variants = [v for v in STABILITY_VARIANTS if v in set(variants)]
    records = run_cells(stability_cells(task, scaffold, cfg, seeds, variants), workers)
    result = ExperimentResult("stability", records, summarize(records, variants))
    names = set(variants)
    if {"cpt", "cpt_no_rs"} <= names:
        with_rs = result.stat("cpt", "harmonic", "std")
        without = result.stat("cpt_no_rs", "harmonic", "std")
        result.info["std_ratio"] = with_rs / without if without > 0 else (0.0 if with_rs == 0 else math.inf)
        result.checks["rs_std_ratio_le_0.75"] = with_rs <= STD_RATIO_LIMIT * without
    if {"cpt", "global_etf"} <= names:
        cpt, flat = result.column("cpt", "rank_after"), result.column("global_etf", "rank_after")
        result.checks["global_rank_le_cpt_rank_every_seed"] = bool(np.all(flat <= cpt))
    return result


def run_cluster_sweep(task, cfg: TrainConfig, per_cluster_sizes, seeds, algorithm=Algorithm.KMEANS_COSINE, cluster_seed: int = 0, workers: int = 1) -> ExperimentResult:
    """H as a function of the average number of classes per cluster."""
    seeds = _check_seeds(seeds)
    n_classes = len(task.classes)
    cells = []
    for size in per_cluster_sizes:
        size = int(size)
        if not 1 <= size <= n_classes:
            log.warning("skipping cluster size %d: outside [1, %d]", size, n_classes)
            continue
        m = max(1, round(n_classes / size))
        sc = single_cluster(task.frozen_prototypes) if m == 1 else cluster(task.frozen_prototypes, m, algorithm, cluster_seed)
        extra = (("size", size), ("M", m))
        cells += [Cell(f"size={size}", s, task, sc, replace(cfg, seed=s), extra) for s in seeds]
    if not cells:
        raise InvalidConfig("no feasible cluster size")
    records = run_cells(cells, workers)
    order = list(dict.fromkeys(c.variant for c in cells))
    return ExperimentResult("cluster_sweep", records, summarize(records, order, keys=("size", "M")))


def run_clustering_ablation(task, cfg: TrainConfig, algorithms, seeds, n_clusters: int = 4, cluster_seed: int = 0, workers: int = 1) -> ExperimentResult:
    """H mean and seed std per clustering algorithm, plus planted-partition agreement."""
    seeds = _check_seeds(seeds)
    algorithms = [Algorithm(a) for a in algorithms]
    if not algorithms:
        raise InvalidConfig("no clustering algorithm requested")
    cells, agreement = [], {}
    for alg in algorithms:
        sc = cluster(task.frozen_prototypes, n_clusters, alg, cluster_seed)
        agreement[alg.value] = partition_agreement(sc.mapping, task.planted_clusters)
        extra = (("agreement", agreement[alg.value]),)
        cells += [Cell(alg.value, s, task, sc, replace(cfg, seed=s), extra) for s in seeds]
    records = run_cells(cells, workers)
    summary = summarize(records, [a.value for a in algorithms], keys=("agreement",))
    checks = {}
    cos, euc = Algorithm.KMEANS_COSINE.value, Algorithm.KMEANS_EUCLIDEAN.value
    if cos in agreement and euc in agreement:
        checks["cosine_agreement_ge_euclidean"] = agreement[cos] >= agreement[euc]
    return ExperimentResult("clustering_ablation", records, summary, checks, {"agreement": agreement})
