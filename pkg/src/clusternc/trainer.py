"""SGD on learnable class prototypes under the combined objective."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import DimensionMismatch, DivergenceDetected, InvalidConfig, InvalidSchedule
from .losses import LossBreakdown, LossWeights, loss_total
from .metrics import RunReport, evaluate
from .scaffold import ClusterScaffold


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 4
    lr0: float = 0.0025
    warmup_epochs: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    use_tetf: bool = True
    use_cc: bool = True
    use_rs: bool = True
    use_clip: bool = True
    symmetric_clip: bool = False
    init_noise: float = 0.01
    grad_clip: float | None = 10.0
    # evaluate the prototype-only losses on the batch's classes instead of all classes
    per_batch_geometry: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if self.lr0 < 0 or self.init_noise < 0:
            raise InvalidConfig("lr0 and init_noise must be >= 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidConfig("need 0 <= warmup_epochs < epochs")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return replace(
            w,
            lambda_tetf=w.lambda_tetf if self.use_tetf else 0.0,
            lambda_cc=w.lambda_cc if self.use_cc else 0.0,
            lambda_rs=w.lambda_rs if self.use_rs else 0.0,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "weights" in obj:
            obj["weights"] = LossWeights(**obj["weights"])
        return cls(**obj)


@dataclass
class TrainState:
    prototypes: EmbeddingMatrix
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Linear warmup from 0 to lr0, then cosine annealing to 0 at the last step."""
    if not 0 <= warmup_steps < total_steps:
        raise InvalidSchedule(f"need 0 <= warmup ({warmup_steps}) < total ({total_steps})")
    if not 0 <= step < total_steps:
        raise InvalidSchedule(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return lr0 * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(state: TrainState, grad: np.ndarray, lr: float) -> TrainState:
    """Plain SGD update, no momentum; returns a new state."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.prototypes.data.shape:
        raise DimensionMismatch(f"grad {grad.shape} vs prototypes {state.prototypes.data.shape}")
    return TrainState(state.prototypes.replace(state.prototypes.data - lr * grad), state.epoch, state.step + 1, state.history)


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    arr = np.array([[b.clip, b.tetf_raw, b.tetf_centered, b.cc, b.rs, b.total] for b in items])
    return LossBreakdown(*(float(v) for v in arr.mean(axis=0)))


def train(task, scaffold: ClusterScaffold, cfg: TrainConfig = TrainConfig(), evaluate_run: bool = True):
    """Optimize all class prototypes, starting from the frozen ones plus
    seeded Gaussian noise, on the task's long-tailed training pool.

    Each step draws ``batch_size`` samples (an epoch is one pass over a seeded
    permutation). The contrastive and convergence terms use the batch; the
    ETF and anchoring terms use every prototype unless ``per_batch_geometry``.

    Returns ``(TrainState, RunReport)``.
    """
    frozen = task.frozen_prototypes
    missing = [c for c in task.base_classes if c not in scaffold.mapping]
    if missing:
        raise InvalidConfig(f"scaffold does not cover base classes {missing[:5]}")
    pool, pool_labels = task.train_pool()
    if not len(pool_labels):
        raise InvalidConfig("empty training pool")

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    init = frozen.data + cfg.init_noise * init_rng.standard_normal(frozen.data.shape)
    state = TrainState(EmbeddingMatrix(init, frozen.labels))

    weights = cfg.effective_weights()
    steps_per_epoch = math.ceil(len(pool_labels) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    per_epoch: list[LossBreakdown] = []

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        order = batch_rng.permutation(len(pool_labels))
        epoch_items = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            labels = [pool_labels[i] for i in batch]
            protos, ref, sc = state.prototypes, frozen, scaffold
            if cfg.per_batch_geometry:
                present = sorted(set(labels))
                protos = EmbeddingMatrix(state.prototypes.rows(present), tuple(present))
                ref = EmbeddingMatrix(frozen.rows(present), tuple(present))
                sc = scaffold.restricted(present)
            breakdown, grad = loss_total(
                protos,
                ref,
                sc,
                pool[batch],
                labels,
                weights,
                use_clip=cfg.use_clip,
                symmetric_clip=cfg.symmetric_clip,
            )
            if cfg.per_batch_geometry:
                full = np.zeros_like(state.prototypes.data)
                idx = state.prototypes.index()
                full[[idx[c] for c in protos.labels]] = grad
                grad = full
            if not np.isfinite(breakdown.total) or not np.all(np.isfinite(grad)):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}, step {state.step}", state)
            if cfg.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > cfg.grad_clip:
                    grad = grad * (cfg.grad_clip / norm)
            lr = lr_schedule(state.step, total_steps, warmup_steps, cfg.lr0)
            history = state.history
            history.append(breakdown)
            state = sgd_step(state, grad, lr)
            state.epoch = epoch
            epoch_items.append(breakdown)
        per_epoch.append(_mean_breakdown(epoch_items))

    report = RunReport(config=_config_json(task, scaffold, cfg), seed=cfg.seed, per_epoch=per_epoch)
    if evaluate_run:
        report.final_metrics = evaluate(task, state.prototypes, scaffold)
    return state, report


def _config_json(task, scaffold: ClusterScaffold, cfg: TrainConfig) -> dict:
    return {
        "task": dict(getattr(task, "params", {}) or {}),
        "scaffold": {"algorithm": scaffold.algorithm.value, "M": scaffold.n_clusters, "seed": scaffold.seed},
        "train": cfg.to_json(),
    }
