"""Episodic training and the evaluation protocol."""
from __future__ import annotations

import copy
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .episodes import (
    ClassPool,
    PoolError,
    Task,
    enumerate_tasks,
    eval_episode,
    make_episode,
    one_class_batch,
    sample_task,
)
from .hypernet import TargetSpec, backward, config_hash, emit, init_params
from .metrics import auprc, harmonic_mean, mean_and_sem
from .numerics import OptimState, sgd_momentum_step
from .target import episode_loss, one_class_loss, one_class_scores, predict

log = logging.getLogger(__name__)

MAX_EVAL_TASKS = 1000

# hypernetwork optimizer search space
HPO_GRID = {
    "learning_rate": (0.001, 0.005, 0.01, 0.05, 0.1),
    "momentum": (0.1, 0.3, 0.9),
    "weight_decay": (0.00001, 0.0001, 0.001, 0.1),
    "epochs": (50, 70, 100),
    "batch_size": (16, 32, 64, 128),
    "trunk_width": (30, 50, 120, 300),
}


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, step: int, last_good, log_records: list):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.last_good = last_good
        self.log = log_records


@dataclass
class TrainConfig:
    seed: int
    k_train: int = 2
    epochs: int = 50
    tasks_per_epoch: int = 200
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    trunk_widths: list = field(default_factory=lambda: [50])
    target_layers: int = 1
    hidden_dim: int = 16
    emit_biases: bool = True
    kind: str = "ev"
    normalize_descriptors: bool = True
    pooling: str = "sum"
    task: str = "multiclass"

    def __post_init__(self):
        for name in ("k_train", "epochs", "tasks_per_epoch", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("optimizer hyperparameters out of range")
        if self.kind not in ("ev", "nonev"):
            raise ValueError("kind must be 'ev' or 'nonev'")
        if self.pooling not in ("sum", "mean"):
            raise ValueError("pooling must be 'sum' or 'mean'")
        if self.task not in ("multiclass", "one_class"):
            raise ValueError("task must be 'multiclass' or 'one_class'")
        if self.task == "one_class" and self.k_train != 1:
            raise ValueError("one_class training uses k_train = 1")
        if self.task == "multiclass" and self.k_train < 2:
            raise ValueError("multiclass training needs k_train >= 2")
        self.trunk_widths = [int(w) for w in self.trunk_widths]
        TargetSpec(1, self.target_layers, self.hidden_dim, self.emit_biases)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ValueError("training config must set 'seed'")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def off_grid(self) -> list[str]:
        """Hyperparameters set outside the tuning grid (allowed, but logged)."""
        out = [name for name in ("learning_rate", "momentum", "weight_decay", "epochs", "batch_size")
               if getattr(self, name) not in HPO_GRID[name]]
        if any(w not in HPO_GRID["trunk_width"] for w in self.trunk_widths):
            out.append("trunk_widths")
        return out

    def target_spec(self, feature_dim: int) -> TargetSpec:
        return TargetSpec(feature_dim, self.target_layers,
                          self.hidden_dim if self.target_layers == 2 else 0, self.emit_biases)


def prepare_pool(pool: ClassPool, normalize: bool) -> ClassPool:
    return pool.normalized() if normalize else pool


def task_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, task) so sampling never depends on order."""
    return np.random.default_rng([seed, *index])


def train(cfg: TrainConfig, pool: ClassPool, callback: Callable[[dict], None] | None = None):
    """Fit the hypernetwork on episodes drawn from the seen classes.

    Returns ``(params, log)`` where ``log`` holds one record per epoch.
    """
    off = cfg.off_grid()
    if off:
        log.info("hyperparameters outside the tuning grid: %s", ", ".join(off))
    pool = prepare_pool(pool, cfg.normalize_descriptors)
    if len(pool.partition.seen) < max(cfg.k_train, 2):
        raise PoolError(f"need at least {max(cfg.k_train, 2)} seen classes to train")
    spec = cfg.target_spec(pool.feature_dim)
    params = init_params(cfg.kind, spec, cfg.trunk_widths, cfg.seed, pool.descriptor_dim,
                         k=cfg.k_train, pooling=cfg.pooling)
    views = [a for _, a in params.named_arrays()]
    flat = params.flatten()
    state = OptimState.zeros(flat.size, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                             weight_decay=cfg.weight_decay, decay_mask=params.decay_mask())
    seen = pool.partition.seen
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow surfaces as a non-finite loss or gradient and aborts below
        records = _train_loop(cfg, pool, params, views, flat, state, seen, callback)
    return params, records


def _train_loop(cfg, pool, params, views, flat, state, seen, callback):
    records = []
    last_good = copy.deepcopy(params)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for step in range(cfg.tasks_per_epoch):
            rng = task_rng(cfg.seed, epoch, step)
            if cfg.task == "multiclass":
                task = sample_task(pool, cfg.k_train, "seen", rng)
                ep = make_episode(task, pool, cfg.batch_size, "train", rng)
                W, cache = emit(ep.descriptors, params)
                loss, dW = episode_loss(ep, W)
            else:
                cid = seen[rng.integers(len(seen))]
                pos, neg = one_class_batch(cid, pool, cfg.batch_size, "train", rng)
                W, cache = emit(pool.descriptors[cid][rng.integers(len(pool.descriptors[cid]))][None],
                                params)
                loss, dW = one_class_loss(pos, neg, W)
            grads = backward(dW, cache).flatten()
            if not (math.isfinite(loss) and np.all(np.isfinite(grads))):
                raise TrainingDiverged(epoch, step, last_good, records)
            flat = sgd_momentum_step(flat, grads, state)
            _load_flat(views, flat)
            total += loss
        rec = {"epoch": epoch, "mean_loss": total / cfg.tasks_per_epoch,
               "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3)}
        records.append(rec)
        if callback is not None:
            callback(rec)
        if not np.all(np.isfinite(flat)):
            raise TrainingDiverged(epoch, cfg.tasks_per_epoch, last_good, records)
        last_good = copy.deepcopy(params)
    return records


def _load_flat(views: list[np.ndarray], flat: np.ndarray) -> None:
    pos = 0
    for a in views:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size


# ---------------------------------------------------------------- evaluation


@dataclass
class TaskResult:
    class_ids: tuple
    accuracy: float
    n_rows: int


@dataclass
class SplitResult:
    split: str
    k: int
    mean: float
    sem: float
    tasks: list
    n_possible: int
    enumerated: bool
    metric: str = "accuracy"

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "k": self.k,
            "metric": self.metric,
            "mean": self.mean,
            "sem": self.sem,
            "n_tasks": len(self.tasks),
            "n_possible_tasks": self.n_possible,
            "task_selection": "all subsets" if self.enumerated
            else f"{len(self.tasks)} subsets sampled uniformly without replacement",
            "tasks": [{"class_ids": list(t.class_ids), self.metric: t.accuracy, "n_rows": t.n_rows}
                      for t in self.tasks],
        }


def select_tasks(pool: ClassPool, k: int, split: str, max_tasks: int = MAX_EVAL_TASKS,
                 seed: int = 0) -> tuple[list[Task], int, bool]:
    """All k-subsets of the split if there are at most ``max_tasks``; else a uniform sample."""
    ids = pool.classes(split)
    if not 1 <= k <= len(ids):
        raise PoolError(f"split {split!r} has {len(ids)} classes, cannot evaluate k={k}")
    n_possible = math.comb(len(ids), k)
    if n_possible <= max_tasks:
        return enumerate_tasks(pool, k, split), n_possible, True
    rng = np.random.default_rng([seed, k, len(ids)])
    chosen = set()
    while len(chosen) < max_tasks:
        chosen.add(tuple(sorted(rng.choice(len(ids), size=k, replace=False).tolist())))
    tasks = [Task(tuple(ids[i] for i in c), (0,) * k) for c in sorted(chosen)]
    return tasks, n_possible, False


def split_tag(split: str) -> str:
    if split == "seen":
        return "seen_eval"
    if split == "unseen":
        return "unseen_eval"
    raise ValueError(f"split must be 'seen' or 'unseen', got {split!r}")


def run_protocol(pool: ClassPool, k: int, split: str,
                 make_predictor: Callable[[np.ndarray], Callable[[np.ndarray], np.ndarray]],
                 max_tasks: int = MAX_EVAL_TASKS, threads: int = 1, seed: int = 0) -> SplitResult:
    """Evaluate any descriptor-conditioned classifier over the task protocol.

    ``make_predictor(descriptors)`` returns a function mapping feature rows to
    predicted labels. Results are sorted by class ids, so the outcome is the
    same for every thread count.
    """
    tag = split_tag(split)
    tasks, n_possible, enumerated = select_tasks(pool, k, split, max_tasks, seed)

    def one(task: Task) -> TaskResult:
        ep = eval_episode(task, pool, tag)
        pred = make_predictor(ep.descriptors)(ep.features)
        return TaskResult(task.class_ids, float(np.mean(pred == ep.labels)), ep.n)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    results.sort(key=lambda r: r.class_ids)
    mean, sem = mean_and_sem([r.accuracy for r in results])
    return SplitResult(split, k, mean, sem, results, n_possible, enumerated)


def hypernet_predictor(params):
    def make(descriptors):
        W, _ = emit(descriptors, params)
        return lambda X: predict(X, W)
    return make


def evaluate(params, pool: ClassPool, k_eval: int, split: str, normalize: bool = True,
             max_tasks: int = MAX_EVAL_TASKS, threads: int = 1, seed: int = 0) -> SplitResult:
    """Mean accuracy of emitted classifiers over k-class tasks of one split."""
    pool = prepare_pool(pool, normalize)
    return run_protocol(pool, k_eval, split, hypernet_predictor(params), max_tasks, threads, seed)


def evaluate_one_class(params, pool: ClassPool, split: str, normalize: bool = True,
                       threads: int = 1, seed: int = 0) -> SplitResult:
    """Per-class AUPRC; positives are the class rows, negatives an equal number from other classes."""
    pool = prepare_pool(pool, normalize)
    tag = split_tag(split)
    ids = pool.classes(split)

    def one(i_cid):
        i, cid = i_cid
        rng = np.random.default_rng([seed, i])
        pos = pool.rows(cid, tag)
        others = [c for c in ids if c != cid]
        pool_rows = np.vstack([pool.rows(c, tag) for c in others])
        neg = pool_rows[rng.choice(len(pool_rows), size=len(pos), replace=len(pos) > len(pool_rows))]
        W, _ = emit(pool.descriptors[cid][:1], params)
        scores = one_class_scores(np.vstack([pos, neg]), W)
        labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        return TaskResult((cid,), auprc(scores, labels), len(labels))

    items = list(enumerate(ids))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, items))
    else:
        results = [one(it) for it in items]
    mean, sem = mean_and_sem([r.accuracy for r in results])
    return SplitResult(split, 1, mean, sem, results, len(ids), True, metric="auprc")


@dataclass
class MetricsReport:
    seen: SplitResult | None
    unseen: SplitResult | None
    metadata: dict = field(default_factory=dict)
    auprc: dict | None = None
    wall_time_s: float = 0.0  # kept out of to_dict so reports stay byte-stable

    @property
    def seen_acc(self) -> float | None:
        return None if self.seen is None else self.seen.mean

    @property
    def unseen_acc(self) -> float | None:
        return None if self.unseen is None else self.unseen.mean

    @property
    def harmonic(self) -> float | None:
        if self.seen is None or self.unseen is None:
            return None
        return harmonic_mean(self.seen.mean, self.unseen.mean)

    def to_dict(self) -> dict:
        out = {
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "harmonic": self.harmonic,
            "seen_sem": None if self.seen is None else self.seen.sem,
            "unseen_sem": None if self.unseen is None else self.unseen.sem,
            "metadata": self.metadata,
            "splits": {r.split: r.to_dict() for r in (self.seen, self.unseen) if r is not None},
        }
        if self.auprc is not None:
            out["auprc"] = self.auprc
        return out


def full_report(params, pool: ClassPool, k: int, splits=("seen", "unseen"), normalize: bool = True,
                threads: int = 1, max_tasks: int = MAX_EVAL_TASKS, metadata: dict | None = None,
                one_class: bool = False) -> MetricsReport:
    t0 = time.perf_counter()
    results = {}
    auprc_table = None
    if one_class:
        auprc_table = {}
        for s in splits:
            r = evaluate_one_class(params, pool, s, normalize, threads)
            auprc_table[s] = r.to_dict()
    else:
        for s in splits:
            results[s] = evaluate(params, pool, k, s, normalize, max_tasks, threads)
    meta = dict(metadata or {})
    meta.setdefault("k", k)
    report = MetricsReport(results.get("seen"), results.get("unseen"), meta, auprc_table)
    report.wall_time_s = time.perf_counter() - t0
    return report


def describe_config(cfg: TrainConfig) -> dict:
    return {"config_hash": config_hash(cfg.to_dict()), "seed": cfg.seed}
