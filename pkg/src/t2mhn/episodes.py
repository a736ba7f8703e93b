"""Class pools, task sampling, the synthetic benchmark and the text data formats.

Data files
----------
Descriptor file (UTF-8)::

    #dim <e>
    <class_id>\t<display_name>\t<e space-separated floats>

Feature file::

    #dim <m>
    <class_id>\t<split_tag>\t<m space-separated floats>

The ``#dim`` header is mandatory. Later lines starting with ``#`` and blank
lines are skipped. A class may appear on several descriptor lines; each line
is an alternative description of that class.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .target import SPLIT_TAGS, Episode

DESCRIPTOR_FILE = "descriptors.txt"
FEATURE_FILE = "features.txt"
PARTITION_FILE = "partition.json"
ORACLE_FILE = "oracle.tsv"


class PoolError(ValueError):
    """Raised when a class pool is inconsistent or too small for a request."""


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


# ---------------------------------------------------------------- pools


@dataclass(frozen=True)
class Partition:
    seen: tuple
    unseen: tuple
    backbone: tuple = ()  # seen classes reserved for backbone training
    hypernet: tuple = ()  # seen classes the backbone never saw


def _take(ids: list, n: int, rng: np.random.Generator) -> tuple[tuple, tuple]:
    order = rng.permutation(len(ids))
    chosen = sorted(ids[i] for i in order[:n])
    rest = sorted(ids[i] for i in order[n:])
    return tuple(chosen), tuple(rest)


def partition_by_count(class_ids, n_unseen: int, n_inner: int, seed: int) -> Partition:
    ids = sorted(class_ids)
    if len(set(ids)) != len(ids):
        raise PoolError("class ids must be unique")
    if not 1 <= n_unseen < len(ids):
        raise PoolError(f"cannot hold out {n_unseen} of {len(ids)} classes as unseen")
    n_seen = len(ids) - n_unseen
    if not 0 <= n_inner < n_seen:
        raise PoolError(f"cannot reserve {n_inner} of {n_seen} seen classes for the hypernet")
    rng = np.random.default_rng(seed)
    unseen, seen = _take(ids, n_unseen, rng)
    hypernet, backbone = _take(list(seen), n_inner, rng)
    return Partition(seen, unseen, backbone, hypernet)


def split_classes(class_ids, unseen_fraction: float, inner_fraction: float, seed: int) -> Partition:
    """Seeded seen/unseen split plus an inner backbone/hypernet split of the seen classes."""
    for name, frac in (("unseen_fraction", unseen_fraction), ("inner_fraction", inner_fraction)):
        if not 0.0 < frac < 1.0:
            raise PoolError(f"{name} must lie in (0, 1), got {frac}")
    n = len(class_ids)
    n_unseen = int(round(unseen_fraction * n))
    n_seen = n - n_unseen
    n_inner = int(round(inner_fraction * n_seen))
    if n_unseen < 1 or n_seen < 1 or n_inner < 1 or n_inner >= n_seen:
        raise PoolError(
            f"{n} classes are too few for unseen_fraction={unseen_fraction}, "
            f"inner_fraction={inner_fraction}"
        )
    return partition_by_count(class_ids, n_unseen, n_inner, seed)


@dataclass
class ClassPool:
    """Descriptors and tagged feature rows for a set of classes.

    Immutable by convention once built; samplers only read from it.
    """

    descriptors: dict           # class_id -> (n_desc, e) array
    features: dict              # class_id -> (n_rows, m) array
    row_tags: dict              # class_id -> (n_rows,) array of split tags
    partition: Partition
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.partition
        seen, unseen = set(p.seen), set(p.unseen)
        if seen & unseen:
            raise PoolError(f"classes both seen and unseen: {sorted(seen & unseen)}")
        if seen | unseen != set(self.descriptors):
            raise PoolError("seen/unseen partition must cover exactly the described classes")
        if (p.backbone or p.hypernet) and set(p.backbone) | set(p.hypernet) != seen:
            raise PoolError("backbone/hypernet partition must cover exactly the seen classes")
        for cid, d in self.descriptors.items():
            if d.ndim != 2 or d.shape[0] < 1:
                raise PoolError(f"class {cid!r} has no descriptor")
        for cid in self.features:
            if cid not in self.descriptors:
                raise PoolError(f"features for undescribed class {cid!r}")
            if len(self.row_tags[cid]) != len(self.features[cid]):
                raise PoolError(f"class {cid!r}: tag count does not match row count")
        audit_split(self)

    @property
    def class_ids(self) -> list:
        return sorted(self.descriptors)

    @property
    def descriptor_dim(self) -> int:
        return next(iter(self.descriptors.values())).shape[1]

    @property
    def feature_dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def classes(self, split: str) -> tuple:
        if split in ("seen", "train", "seen_eval"):
            return self.partition.seen
        if split in ("unseen", "unseen_eval"):
            return self.partition.unseen
        raise PoolError(f"unknown split {split!r}")

    def rows(self, cid, tag: str) -> np.ndarray:
        feats = self.features.get(cid)
        if feats is None:
            return np.empty((0, 0))
        return feats[self.row_tags[cid] == tag]

    def normalized(self) -> "ClassPool":
        """Copy with every descriptor scaled to unit L2 norm."""
        descs = {}
        for cid, d in self.descriptors.items():
            norms = np.linalg.norm(d, axis=1, keepdims=True)
            descs[cid] = np.where(norms > 0, d / np.where(norms > 0, norms, 1.0), d)
        return ClassPool(descs, self.features, self.row_tags, self.partition, self.names)


def audit_split(pool: ClassPool) -> dict:
    """Check split hygiene; return row counts per tag.

    Seen classes may only carry train/seen_eval rows and unseen classes only
    unseen_eval rows, so the three evaluation groups are disjoint by construction.
    """
    counts = dict.fromkeys(SPLIT_TAGS, 0)
    allowed = {cid: ("train", "seen_eval") for cid in pool.partition.seen}
    allowed.update({cid: ("unseen_eval",) for cid in pool.partition.unseen})
    for cid, tags in pool.row_tags.items():
        for tag in np.unique(tags):
            if tag not in allowed[cid]:
                raise PoolError(f"class {cid!r} has rows tagged {tag!r}")
            counts[str(tag)] += int(np.sum(tags == tag))
    return counts


# ---------------------------------------------------------------- tasks


@dataclass(frozen=True)
class Task:
    class_ids: tuple
    descriptor_index: tuple

    def descriptors(self, pool: ClassPool) -> np.ndarray:
        return np.stack([pool.descriptors[c][i] for c, i in zip(self.class_ids, self.descriptor_index)])

    def reordered(self, perm) -> "Task":
        return Task(tuple(self.class_ids[i] for i in perm),
                    tuple(self.descriptor_index[i] for i in perm))


def sample_task(pool: ClassPool, k: int, split: str, rng: np.random.Generator) -> Task:
    """k distinct classes uniformly without replacement, one random description each."""
    ids = pool.classes(split)
    if not 1 <= k <= len(ids):
        raise PoolError(f"cannot draw k={k} classes from a split of {len(ids)}")
    chosen = rng.choice(len(ids), size=k, replace=False)
    cids = tuple(ids[i] for i in chosen)
    idx = tuple(int(rng.integers(pool.descriptors[c].shape[0])) for c in cids)
    return Task(cids, idx)


def enumerate_tasks(pool: ClassPool, k: int, split: str) -> list[Task]:
    """All unordered k-subsets of a split, first description per class."""
    ids = pool.classes(split)
    if not 1 <= k <= len(ids):
        raise PoolError(f"cannot form tasks of k={k} from a split of {len(ids)} classes")
    return [Task(c, (0,) * k) for c in itertools.combinations(ids, k)]


def _balanced_counts(batch_size: int, k: int) -> list[int]:
    base, extra = divmod(batch_size, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def make_episode(task: Task, pool: ClassPool, batch_size: int, split_tag: str,
                 rng: np.random.Generator) -> Episode:
    """Balanced labelled batch; label ``i`` is the class at position ``i`` of the task."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    feats, labels = [], []
    for label, (cid, count) in enumerate(zip(task.class_ids, _balanced_counts(batch_size, len(task.class_ids)))):
        rows = pool.rows(cid, split_tag)
        if len(rows) == 0:
            raise PoolError(f"class {cid!r} has no {split_tag} feature rows")
        idx = rng.choice(len(rows), size=count, replace=count > len(rows))
        feats.append(rows[idx])
        labels.append(np.full(count, label))
    return Episode(
        descriptors=task.descriptors(pool),
        features=np.vstack(feats),
        labels=np.concatenate(labels),
        split_tag=split_tag,
        class_ids=task.class_ids,
        row_tags=(split_tag,) * batch_size,
    )


def eval_episode(task: Task, pool: ClassPool, split_tag: str) -> Episode:
    """Episode holding every ``split_tag`` row of the task's classes."""
    feats, labels = [], []
    for label, cid in enumerate(task.class_ids):
        rows = pool.rows(cid, split_tag)
        if len(rows) == 0:
            raise PoolError(f"class {cid!r} has no {split_tag} feature rows")
        feats.append(rows)
        labels.append(np.full(len(rows), label))
    n = sum(len(f) for f in feats)
    return Episode(task.descriptors(pool), np.vstack(feats), np.concatenate(labels),
                   split_tag, task.class_ids, (split_tag,) * n)


def one_class_batch(cid, pool: ClassPool, batch_size: int, split_tag: str,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Positives from ``cid`` and as many negatives drawn uniformly from other classes of the split."""
    n_pos = max(1, batch_size // 2)
    rows = pool.rows(cid, split_tag)
    if len(rows) == 0:
        raise PoolError(f"class {cid!r} has no {split_tag} feature rows")
    pos = rows[rng.choice(len(rows), size=n_pos, replace=n_pos > len(rows))]
    others = [c for c in pool.classes(split_tag) if c != cid and len(pool.rows(c, split_tag))]
    if not others:
        raise PoolError(f"no negative classes available for {cid!r}")
    neg = []
    for c in rng.choice(len(others), size=n_pos, replace=True):
        r = pool.rows(others[c], split_tag)
        neg.append(r[rng.integers(len(r))])
    return pos, np.stack(neg)


# ---------------------------------------------------------------- synthetic benchmark


@dataclass
class SyntheticConfig:
    feature_dim: int = 16
    descriptor_dim: int = 24
    n_classes: int = 50
    n_seen: int = 40
    n_unseen: int = 10
    samples_per_class: int = 100
    sigma_x: float = 1.7
    sigma_s: float = 0.05
    descriptors_per_class: int = 1
    seen_eval_fraction: float = 0.1
    inner_fraction: float = 0.2
    seed: int = 0
    # when set, sigma_x is replaced by the value giving this mean unseen-pair Bayes accuracy
    target_bayes_accuracy: float | None = None

    def __post_init__(self):
        for name in ("feature_dim", "descriptor_dim", "n_classes", "samples_per_class",
                     "descriptors_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_seen < 1 or self.n_unseen < 1:
            raise ValueError("need at least one seen and one unseen class")
        if self.n_seen + self.n_unseen != self.n_classes:
            raise ValueError("n_seen + n_unseen must equal n_classes")
        if self.sigma_x < 0 or self.sigma_s < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 < self.seen_eval_fraction < 1.0:
            raise ValueError("seen_eval_fraction must lie in (0, 1)")
        if not 0.0 <= self.inner_fraction < 1.0:
            raise ValueError("inner_fraction must lie in [0, 1)")
        if self.target_bayes_accuracy is not None and not 0.5 < self.target_bayes_accuracy < 1.0:
            raise ValueError("target_bayes_accuracy must lie in (0.5, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ValueError("synthetic config must set 'seed'")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def bayes_pair_accuracy(mu_a, mu_b, sigma_x: float) -> float:
    """Optimal accuracy for two equiprobable isotropic Gaussians: Phi(|mu_a - mu_b| / (2 sigma))."""
    gap = float(np.linalg.norm(np.asarray(mu_a) - np.asarray(mu_b)))
    if gap == 0.0:
        return 0.5
    if sigma_x == 0.0:
        return 1.0
    return 0.5 * math.erfc(-gap / (2.0 * sigma_x) / math.sqrt(2.0))


@dataclass
class SyntheticOracle:
    means: dict
    sigma_x: float
    projection: np.ndarray

    def pair_accuracy(self, a, b) -> float:
        return bayes_pair_accuracy(self.means[a], self.means[b], self.sigma_x)

    def table(self, class_ids) -> list[tuple]:
        return [(a, b, self.pair_accuracy(a, b)) for a, b in itertools.combinations(sorted(class_ids), 2)]

    def mean_pair_accuracy(self, class_ids) -> float:
        return float(np.mean([acc for _, _, acc in self.table(class_ids)]))


def _streams(seed: int) -> list[np.random.Generator]:
    # independent streams: partition, means, projection, descriptor noise, features
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def synthetic_means(cfg: SyntheticConfig) -> dict:
    ids = [f"c{i:03d}" for i in range(cfg.n_classes)]
    rng = _streams(cfg.seed)[1]
    return {cid: rng.standard_normal(cfg.feature_dim) for cid in ids}


def calibrate_sigma_x(cfg: SyntheticConfig, target: float = 0.95, split: str = "unseen") -> float:
    """Noise level giving a mean pairwise Bayes accuracy of ``target`` on a split.

    Means do not depend on ``sigma_x``, so a bisection over the closed-form
    oracle is enough.
    """
    if not 0.5 < target < 1.0:
        raise ValueError("target accuracy must lie in (0.5, 1)")
    means = synthetic_means(cfg)
    part = partition_by_count(list(means), cfg.n_unseen,
                              int(round(cfg.inner_fraction * cfg.n_seen)), _partition_seed(cfg))
    ids = part.unseen if split == "unseen" else part.seen
    pairs = list(itertools.combinations(ids, 2))

    def mean_acc(sigma):
        return np.mean([bayes_pair_accuracy(means[a], means[b], sigma) for a, b in pairs])

    lo, hi = 1e-6, 1.0
    while mean_acc(hi) > target:
        hi *= 2.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mean_acc(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _partition_seed(cfg: SyntheticConfig) -> int:
    return int(_streams(cfg.seed)[0].integers(2**31))


def gen_synthetic(cfg: SyntheticConfig) -> tuple[ClassPool, SyntheticOracle]:
    """Gaussian classes whose descriptors are a fixed noisy linear image of their means.

    x = mu_c + N(0, sigma_x^2 I),  s_c = M mu_c + N(0, sigma_s^2 I).
    """
    if cfg.target_bayes_accuracy is not None:
        cfg = replace(cfg, sigma_x=calibrate_sigma_x(cfg, cfg.target_bayes_accuracy),
                      target_bayes_accuracy=None)
    _, _, r_proj, r_desc, r_feat = _streams(cfg.seed)
    means = synthetic_means(cfg)
    ids = sorted(means)
    part = partition_by_count(ids, cfg.n_unseen, int(round(cfg.inner_fraction * cfg.n_seen)),
                              _partition_seed(cfg))
    M = r_proj.standard_normal((cfg.descriptor_dim, cfg.feature_dim)) / math.sqrt(cfg.feature_dim)
    seen = set(part.seen)
    n = cfg.samples_per_class
    n_eval = max(1, int(round(cfg.seen_eval_fraction * n)))
    descriptors, features, tags = {}, {}, {}
    for cid in ids:
        mu = means[cid]
        noise = r_desc.standard_normal((cfg.descriptors_per_class, cfg.descriptor_dim))
        descriptors[cid] = (M @ mu)[None, :] + cfg.sigma_s * noise
        features[cid] = mu + cfg.sigma_x * r_feat.standard_normal((n, cfg.feature_dim))
        if cid in seen:
            t = np.array(["train"] * n, dtype=object)
            t[r_feat.permutation(n)[:n_eval]] = "seen_eval"
        else:
            t = np.array(["unseen_eval"] * n, dtype=object)
        tags[cid] = t
    pool = ClassPool(descriptors, features, tags, part, names={c: c for c in ids})
    return pool, SyntheticOracle(means, cfg.sigma_x, M)


# ---------------------------------------------------------------- text formats


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def _read_records(path):
    """Yield ``(lineno, fields, dim)`` for each data line of a tab-separated file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#dim"):
        raise ParseError(path, 1, "missing '#dim <n>' header")
    try:
        dim = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise ParseError(path, 1, f"bad header {lines[0]!r}") from None
    if dim < 1:
        raise ParseError(path, 1, "dimension must be >= 1")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        try:
            values = np.array([float(t) for t in parts[2].split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if values.size != dim:
            raise ParseError(path, lineno, f"expected {dim} floats, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ParseError(path, lineno, "non-finite value")
        yield lineno, parts[0], parts[1], values


def load_descriptors(path) -> tuple[dict, dict]:
    """Return ``({class_id: (n_desc, e) array}, {class_id: display_name})``."""
    rows, names = {}, {}
    for _, cid, name, values in _read_records(path):
        rows.setdefault(cid, []).append(values)
        names.setdefault(cid, name)
    return {c: np.vstack(v) for c, v in rows.items()}, names


def load_features(path) -> tuple[dict, dict]:
    """Return ``({class_id: (n, m) array}, {class_id: (n,) tag array})``."""
    rows, tags = {}, {}
    for lineno, cid, tag, values in _read_records(path):
        if tag not in SPLIT_TAGS:
            raise ParseError(path, lineno, f"unknown split tag {tag!r}")
        rows.setdefault(cid, []).append(values)
        tags.setdefault(cid, []).append(tag)
    return ({c: np.vstack(v) for c, v in rows.items()},
            {c: np.array(t, dtype=object) for c, t in tags.items()})


def write_descriptors(path, descriptors: dict, names: dict | None = None) -> None:
    names = names or {}
    dim = next(iter(descriptors.values())).shape[1]
    lines = [f"#dim {dim}"]
    for cid in sorted(descriptors):
        for row in descriptors[cid]:
            lines.append(f"{cid}\t{names.get(cid, cid)}\t{_fmt(row)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_features(path, features: dict, tags: dict) -> None:
    dim = next(iter(features.values())).shape[1]
    lines = [f"#dim {dim}"]
    for cid in sorted(features):
        for row, tag in zip(features[cid], tags[cid]):
            lines.append(f"{cid}\t{tag}\t{_fmt(row)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pool(data_dir, pool: ClassPool, oracle: SyntheticOracle | None = None) -> list[Path]:
    d = Path(data_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_descriptors(d / DESCRIPTOR_FILE, pool.descriptors, pool.names)
    write_features(d / FEATURE_FILE, pool.features, pool.row_tags)
    p = pool.partition
    (d / PARTITION_FILE).write_text(json.dumps(
        {"seen": list(p.seen), "unseen": list(p.unseen),
         "backbone": list(p.backbone), "hypernet": list(p.hypernet)}, indent=1) + "\n",
        encoding="utf-8")
    written = [d / DESCRIPTOR_FILE, d / FEATURE_FILE, d / PARTITION_FILE]
    if oracle is not None:
        lines = ["#class_a\tclass_b\tsplit\tbayes_accuracy"]
        for split, ids in (("seen", p.seen), ("unseen", p.unseen)):
            for a, b, acc in oracle.table(ids):
                lines.append(f"{a}\t{b}\t{split}\t{format(acc, '.17g')}")
        (d / ORACLE_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(d / ORACLE_FILE)
    return written


def load_oracle_table(path) -> dict:
    table = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        a, b, split, acc = line.split("\t")
        table[(a, b)] = (split, float(acc))
    return table


def load_pool(data_dir) -> ClassPool:
    """Read a pool from a data directory.

    Without ``partition.json`` the seen/unseen split is inferred from the row
    tags: classes with ``unseen_eval`` rows are unseen, the rest are seen.
    """
    d = Path(data_dir)
    for name in (DESCRIPTOR_FILE, FEATURE_FILE):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing data file: {d / name}")
    descriptors, names = load_descriptors(d / DESCRIPTOR_FILE)
    features, tags = load_features(d / FEATURE_FILE)
    widths = {f.shape[1] for f in features.values()}
    if len(widths) != 1:
        raise PoolError(f"inconsistent feature widths {sorted(widths)}")
    if (d / PARTITION_FILE).is_file():
        p = json.loads((d / PARTITION_FILE).read_text(encoding="utf-8"))
        part = Partition(tuple(p["seen"]), tuple(p["unseen"]),
                         tuple(p.get("backbone", ())), tuple(p.get("hypernet", ())))
    else:
        unseen = sorted(c for c, t in tags.items() if np.any(t == "unseen_eval"))
        seen = sorted(c for c in descriptors if c not in set(unseen))
        part = Partition(tuple(seen), tuple(unseen))
    return ClassPool(descriptors, features, tags, part, names)
