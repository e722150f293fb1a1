"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run with pytest (lines are collected into the terminal summary) or directly
with ``python tests/test_acceptance.py``.
"""
import math
import time
from dataclasses import replace

import numpy as np

from clusternc import cli
from clusternc.embedding import EmbeddingMatrix
from clusternc.experiments import DESK_TASK, desk_train_config, run_ablation, run_stability, run_sweep
from clusternc.losses import LossWeights, finite_diff_grad, loss_cc, loss_clip, loss_rs, loss_tetf, loss_total
from clusternc.scaffold import ClusterScaffold, cosine_silhouette, kmeans_cosine, partition_agreement, single_cluster
from clusternc.synth import SyntheticTask, generate_task, sample_counts
from clusternc.trainer import TrainConfig, train

RESULTS = []


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def default_task():
    task = generate_task(**DESK_TASK)
    return task, kmeans_cosine(task.frozen_prototypes, 4, 0)


# 1 ---------------------------------------------------------------------------

def _rel(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def test_criterion_1_gradient_suite():
    d, k, m, batch = 16, 12, 3, 6
    start = time.perf_counter()
    worst = {"clip": 0.0, "tetf": 0.0, "cc": 0.0, "rs": 0.0, "total": 0.0}
    labels = tuple(range(k))
    sc = ClusterScaffold({c: c % m for c in labels}, np.zeros((m, d)))
    w = LossWeights()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((k, d))
        frozen = EmbeddingMatrix(x + rng.uniform(0.05, 0.5, x.shape) * rng.choice([-1.0, 1.0], x.shape))
        feats = rng.standard_normal((batch, d))
        blabels = list(rng.integers(0, k, batch))
        grouped = {c: feats[[i for i, b in enumerate(blabels) if b == c]] for c in dict.fromkeys(blabels)}

        def em(y):
            return EmbeddingMatrix(y, labels)

        t = rng.standard_normal((batch, d))
        _, gi, gt = loss_clip(feats, t, w.temperature)
        worst["clip"] = max(
            worst["clip"],
            _rel(gi, finite_diff_grad(lambda y: loss_clip(y, t, w.temperature)[0], feats)),
            _rel(gt, finite_diff_grad(lambda y: loss_clip(feats, y, w.temperature)[0], t)),
        )
        g = loss_tetf(em(x), sc)[2]
        worst["tetf"] = max(worst["tetf"], _rel(g, finite_diff_grad(lambda y: loss_tetf(em(y), sc)[0], x)))
        g = loss_cc(grouped, em(x))[1]
        worst["cc"] = max(worst["cc"], _rel(g, finite_diff_grad(lambda y: loss_cc(grouped, em(y))[0], x)))
        g = loss_rs(em(x), frozen)[1]
        worst["rs"] = max(worst["rs"], _rel(g, finite_diff_grad(lambda y: loss_rs(em(y), frozen)[0], x)))
        g = loss_total(em(x), frozen, sc, feats, blabels, w)[1]
        num = finite_diff_grad(lambda y: loss_total(em(y), frozen, sc, feats, blabels, w)[0].total, x)
        worst["total"] = max(worst["total"], _rel(g, num))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 10.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(1, ok, f"max relative error {detail} (limit 1e-5); {elapsed:.1f}s (limit 10s)")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_etf_fixpoint():
    rng = np.random.default_rng(0)
    d = 8
    tilt = rng.standard_normal((3, d))
    tilt[:, 0] = 0.0
    tilt /= np.linalg.norm(tilt, axis=1, keepdims=True)
    alpha = np.deg2rad(20.0)
    protos = np.cos(alpha) * np.eye(d)[0] + np.sin(alpha) * tilt
    labels = (0, 1, 2)
    feats = {c: protos[c] + 0.1 * rng.standard_normal((4, d)) for c in labels}
    task = SyntheticTask(
        EmbeddingMatrix(protos, labels), EmbeddingMatrix(protos, labels), feats, feats,
        {c: 4 for c in labels}, 1.0, 4, labels, (), {c: 0 for c in labels}, 0,
    )
    sc = single_cluster(task.frozen_prototypes)
    # 12 samples, batch 4: 3 steps per epoch, 166 epochs = 498 steps
    cfg = TrainConfig(epochs=166, lr0=0.1, use_clip=False, use_cc=False, use_rs=False)
    state, _ = train(task, sc, cfg, evaluate_run=False)
    unit = state.prototypes.data / np.linalg.norm(state.prototypes.data, axis=1, keepdims=True)
    off = (unit @ unit.T)[~np.eye(3, dtype=bool)]
    centered = loss_tetf(state.prototypes, sc)[1]
    ok = state.step <= 500 and np.all(np.abs(off + 0.5) <= 0.05) and centered <= 0.01
    report(2, ok, f"{state.step} steps, off-diagonal cosines in [{off.min():.4f}, {off.max():.4f}] (target -0.5 +- 0.05), centered {centered:.2e} (limit 0.01)")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_ablation_ordering():
    task, sc = default_task()
    start = time.perf_counter()
    res = run_ablation(task, sc, desk_train_config(), range(10))
    elapsed = time.perf_counter() - start
    tail = {r["row"]: r["tail_mean"] for r in res.summary}
    ok = tail["5"] >= tail["2"] >= tail["1"] and elapsed < 300
    report(3, ok, f"seed-mean tail accuracy row5={tail['5']:.2f} >= row2={tail['2']:.2f} >= row1={tail['1']:.2f}; {elapsed:.0f}s (limit 300s)")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_rs_stability():
    task, sc = default_task()
    res = run_stability(task, sc, desk_train_config(), range(10), variants=("cpt_no_rs", "cpt"))
    on, off = res.stat("cpt", "harmonic", "std"), res.stat("cpt_no_rs", "harmonic", "std")
    ok = on <= 0.75 * off
    report(4, ok, f"std of H with RS {on:.3f} vs without {off:.3f}, ratio {on / off:.3f} (limit 0.75)")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_rank_preservation():
    task, sc = default_task()
    res = run_stability(task, sc, desk_train_config(), range(5), variants=("global_etf", "cpt"))
    cpt, flat = res.column("cpt", "rank_after"), res.column("global_etf", "rank_after")
    centered = res.column("global_etf", "tetf_centered")
    k = len(task.classes)
    deviations = []
    for s in range(5):
        state, _ = train(task, sc, replace(desk_train_config(), seed=s), evaluate_run=False)
        unit = state.prototypes.data / np.linalg.norm(state.prototypes.data, axis=1, keepdims=True)
        gram = unit @ unit.T
        cross = np.array([[sc.mapping[i] != sc.mapping[j] for j in range(k)] for i in range(k)])
        deviations.append(float(np.max(np.abs(gram[cross] + 1.0 / (k - 1)))))
    rank_ok = bool(np.all(cpt >= flat))
    flat_ok = bool(np.all(centered <= 0.01))
    sep_ok = all(v > 0.1 for v in deviations)
    detail = (
        f"effective rank CPT {np.round(cpt, 2).tolist()} vs global ETF {np.round(flat, 2).tolist()} ({'ok' if rank_ok else 'violated'}); "
        f"global centered TETF max {centered.max():.4f} (limit 0.01, {'ok' if flat_ok else 'violated'}); "
        f"CPT max cross-cluster deviation min over seeds {min(deviations):.3f} (> 0.1, {'ok' if sep_ok else 'violated'})"
    )
    report(5, rank_ok and flat_ok and sep_ok, detail)


# 6 ---------------------------------------------------------------------------

def test_criterion_6_imbalance_protocol():
    bad = []
    for tau in (1.0, 0.25, 0.06):
        for k in (4, 32, 100):
            counts = sample_counts(k, tau, 16)
            if max(counts) != 16 or abs(min(counts) / max(counts) - tau) > 1 / 16:
                bad.append((tau, k, min(counts)))
    # oracle: 16 * 0.25^(k/3) = 16, 10.08, 6.35, 4 rounded
    oracle = [int(math.floor(16 * 0.25 ** (i / 3) + 0.5)) for i in range(4)]
    exact = sample_counts(4, 0.25, 16)
    ok = not bad and exact == oracle == [16, 10, 6, 4]
    report(6, ok, f"9 (tau, K) grids checked, violations {bad}; K=4 tau=0.25 gives {exact}")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_weight_sensitivity():
    task, sc = default_task()
    cfg = desk_train_config()
    changes = {}
    for name in ("lambda_tetf", "lambda_cc", "lambda_rs"):
        base = getattr(cfg.weights, name)
        res = run_sweep(task, sc, cfg, name, [0.5 * base, base, 2.0 * base], range(10))
        h = [r["harmonic_mean"] for r in res.summary]
        changes[name] = max(abs(h[0] - h[1]), abs(h[2] - h[1]))
    ok = all(v <= 3.0 for v in changes.values())
    detail = ", ".join(f"{k} {v:.2f}" for k, v in changes.items())
    report(7, ok, f"max change of seed-mean H under 0.5x/2x: {detail} (limit 3 points)")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_cli_determinism(tmp_path, capsys=None):
    small = ["--set", "task.m_planted=2", "--set", "task.classes_per_cluster=4", "--set", "task.d=12", "--set", "train.epochs=4", "--set", "scaffold.M=2"]
    commands = {
        "ablate": ["--seeds", "3"],
        "sweep": ["--seeds", "2"],
        "stability": ["--seeds", "5"],
        "cluster-sweep": ["--seeds", "2", "--set", "experiment.sizes=[2,4,8]"],
        "cluster-ablate": ["--seeds", "2"],
    }
    mismatched = []
    for name, extra in commands.items():
        outputs = []
        for run, workers in enumerate(("1", "1", "3")):
            out = tmp_path / f"{name}-{run}"
            code = cli.main([name, *small, *extra, "--workers", workers, "--out", str(out)])
            outputs.append((code, (out / "summary.csv").read_bytes()))
        if len(set(outputs)) != 1 or outputs[0][0] != 0:
            mismatched.append(name)
    report(8, not mismatched, f"{len(commands)} subcommands run 3 times (workers 1, 1, 3); mismatched summary.csv: {mismatched or 'none'}")


# 9 ---------------------------------------------------------------------------

def test_criterion_9_clustering():
    recovered, monotone, silhouette_wins = [], True, 0
    clean = [
        generate_task(m_planted=2, classes_per_cluster=2, d=8, intra_cluster_angle=20.0, prototype_noise=0.0, seed=0),
        generate_task(**{**DESK_TASK, "prototype_noise": 0.0}),
        generate_task(intra_cluster_angle=20.0, prototype_noise=0.0, seed=0),
    ]
    for task in clean:
        sc = kmeans_cosine(task.frozen_prototypes, len(set(task.planted_clusters.values())), 0)
        recovered.append(partition_agreement(sc.mapping, task.planted_clusters))
    for seed in range(10):
        task = generate_task(**{**DESK_TASK, "seed": seed})
        sc = kmeans_cosine(task.frozen_prototypes, 4, seed)
        monotone &= bool(np.all(np.diff(sc.objective_history) <= 1e-12))
        planted = ClusterScaffold(task.planted_clusters, np.zeros((4, task.dim)))
        rng = np.random.default_rng(seed)
        random = ClusterScaffold(dict(zip(task.classes, rng.permutation([c % 4 for c in task.classes]).tolist())), np.zeros((4, task.dim)))
        silhouette_wins += cosine_silhouette(task.frozen_prototypes, planted) > cosine_silhouette(task.frozen_prototypes, random)
    ok = all(a == 1.0 for a in recovered) and monotone and silhouette_wins == 10
    report(9, ok, f"planted agreement {recovered}; objective monotone on all runs: {monotone}; planted silhouette beats random on {silhouette_wins}/10 seeds")


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in sorted(((k, v) for k, v in dict(globals()).items() if k.startswith("test_criterion_")), key=lambda kv: int(kv[0].split("_")[2])):
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
