"""Synthetic data, labeled/unlabeled splits and cross-set mixup."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, UsageError

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Deterministic generator; same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class SplitDataset:
    """Labeled samples ``(labeled_x, labeled_y)`` plus unlabeled ``unlabeled_x``."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labeled_x = np.asarray(self.labeled_x, dtype=np.float64)
        self.labeled_y = np.asarray(self.labeled_y, dtype=np.int64)
        if self.labeled_x.ndim != 2 or len(self.labeled_x) == 0:
            raise UsageError("labeled set must be a non-empty [n, D] array")
        dim = self.labeled_x.shape[1]
        self.unlabeled_x = np.asarray(self.unlabeled_x, dtype=np.float64)
        if self.unlabeled_x.size == 0:
            self.unlabeled_x = self.unlabeled_x.reshape(0, dim)
        if self.unlabeled_x.ndim != 2 or self.unlabeled_x.shape[1] != dim:
            raise UsageError("labeled and unlabeled features must share one dimensionality")
        if self.labeled_y.shape != (len(self.labeled_x),):
            raise UsageError("one label per labeled sample is required")
        if self.num_classes < 1:
            raise UsageError("num_classes must be positive")
        if np.any(self.labeled_y < 0) or np.any(self.labeled_y >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")

    @property
    def dim(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_x)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_x)

    def __eq__(self, other):
        if not isinstance(other, SplitDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labeled_x, other.labeled_x)
            and np.array_equal(self.labeled_y, other.labeled_y)
            and np.array_equal(self.unlabeled_x, other.unlabeled_x)
        )


@dataclass
class MixBatch:
    """Interpolated inputs with soft class targets and soft domain targets.

    Domain column 0 is the labeled set and column 1 the unlabeled set, so a
    row built with mixing weight ``lam`` has domain target ``(lam, 1 - lam)``.
    """

    inputs: np.ndarray
    class_targets: np.ndarray
    domain_targets: np.ndarray
    lambdas: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


def moon_coordinates(theta, label: int) -> np.ndarray:
    """Noise-free points on the upper (label 0) or lower (label 1) arc."""
    theta = np.asarray(theta, dtype=np.float64)
    if label == 0:
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    if label == 1:
        return np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=-1)
    raise UsageError(f"two-moon label must be 0 or 1, got {label}")


def make_two_moons(n: int, noise_sd: float = 0.1,
                   rng: np.random.Generator | None = None) -> SplitDataset:
    """Fully labeled two-moon pool of ``n`` points (class 0 first)."""
    if n < 2:
        raise UsageError(f"two-moon pool needs n >= 2, got {n}")
    if not noise_sd >= 0:
        raise ConfigError(f"noise_sd must be non-negative, got {noise_sd}", field="noise_sd")
    rng = make_rng(0) if rng is None else rng
    n0 = math.ceil(n / 2)
    n1 = n - n0
    upper = moon_coordinates(rng.uniform(0.0, math.pi, n0), 0)
    lower = moon_coordinates(rng.uniform(0.0, math.pi, n1), 1)
    x = np.concatenate([upper, lower])
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, size=x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return SplitDataset(x, y, np.empty((0, 2)), num_classes=2)


def _stratified_quota(counts: np.ndarray, n_labeled: int, rng: np.random.Generator) -> np.ndarray:
    n_classes = len(counts)
    quota = np.zeros(n_classes, dtype=np.int64)
    remaining = n_labeled
    while remaining > 0:
        open_classes = np.flatnonzero(quota < counts)
        share, extra = divmod(remaining, len(open_classes))
        take = np.full(len(open_classes), share)
        if extra:
            take[rng.choice(len(open_classes), size=extra, replace=False)] += 1
        room = counts[open_classes] - quota[open_classes]
        take = np.minimum(take, room)
        quota[open_classes] += take
        remaining -= int(take.sum())
    return quota


def split_ssl(pool: SplitDataset, n_labeled: int, rng: np.random.Generator) -> SplitDataset:
    """Keep ``n_labeled`` stratified samples labeled, drop labels of the rest."""
    total = pool.n_labeled
    if n_labeled < 1 or n_labeled > total:
        raise UsageError(f"n_labeled must be in [1, {total}], got {n_labeled}")
    counts = np.bincount(pool.labeled_y, minlength=pool.num_classes)
    quota = _stratified_quota(counts, n_labeled, rng)
    chosen = []
    for c in range(pool.num_classes):
        members = np.flatnonzero(pool.labeled_y == c)
        if quota[c]:
            chosen.append(rng.choice(members, size=quota[c], replace=False))
    picked = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(total), picked)
    unlabeled = np.concatenate([pool.unlabeled_x, pool.labeled_x[rest]])
    return SplitDataset(pool.labeled_x[picked], pool.labeled_y[picked], unlabeled,
                        pool.num_classes)


def sample_beta(alpha: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. draws from the symmetric Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}", field="alpha")
    return rng.beta(alpha, alpha, size=count)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_set_mixup(x_l, y_l, x_u, y_u, lambdas) -> MixBatch:
    """Pair the b-th labeled and unlabeled samples with weight ``lambdas[b]``.

    ``y_l`` is one-hot and ``y_u`` holds soft pseudo-labels.
    """
    x_l, y_l, x_u, y_u = (np.asarray(a, dtype=np.float64) for a in (x_l, y_l, x_u, y_u))
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    batch = len(x_l)
    if not (len(y_l) == len(x_u) == len(y_u) == len(lam) == batch):
        raise UsageError(
            f"batch sizes differ: x_l={len(x_l)} y_l={len(y_l)} x_u={len(x_u)} "
            f"y_u={len(y_u)} lambdas={len(lam)}"
        )
    if x_l.shape != x_u.shape or y_l.shape != y_u.shape:
        raise UsageError("labeled and unlabeled batches must have matching shapes")
    if np.any(~np.isfinite(lam)) or np.any(lam < 0) or np.any(lam > 1):
        raise UsageError("mixing weights must lie in [0, 1]")
    col = lam[:, None]
    return MixBatch(
        inputs=col * x_l + (1.0 - col) * x_u,
        class_targets=col * y_l + (1.0 - col) * y_u,
        domain_targets=np.stack([lam, 1.0 - lam], axis=1),
        lambdas=lam,
    )


def unmixed_batch(x_l, y_l, x_u, y_u) -> MixBatch:
    """Labeled rows (weight 1) stacked over unlabeled rows (weight 0).

    Used when alignment runs without augmentation: the domain branch sees
    the raw samples with hard domain labels and only labeled rows carry
    classification weight.
    """
    x_l, y_l, x_u, y_u = (np.asarray(a, dtype=np.float64) for a in (x_l, y_l, x_u, y_u))
    lam = np.concatenate([np.ones(len(x_l)), np.zeros(len(x_u))])
    return MixBatch(
        inputs=np.concatenate([x_l, x_u]),
        class_targets=np.concatenate([y_l, y_u]),
        domain_targets=np.stack([lam, 1.0 - lam], axis=1),
        lambdas=lam,
    )


def write_dataset_csv(dataset: SplitDataset, path) -> None:
    """Write ``f1,...,fD,label`` rows; unlabeled rows carry label -1."""
    lines = [f"# D={dataset.dim} C={dataset.num_classes}"]
    for x, y in zip(dataset.labeled_x, dataset.labeled_y):
        lines.append(",".join(repr(float(v)) for v in x) + f",{int(y)}")
    for x in dataset.unlabeled_x:
        lines.append(",".join(repr(float(v)) for v in x) + ",-1")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset_csv(path) -> SplitDataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ParseError("missing '# D=<dims> C=<classes>' header", line=1)
    try:
        fields = dict(tok.split("=", 1) for tok in text[0][1:].split())
        dim, n_classes = int(fields["D"]), int(fields["C"])
    except (KeyError, ValueError):
        raise ParseError(f"bad header {text[0]!r}", line=1) from None
    if dim < 1 or n_classes < 1:
        raise ParseError("header dimensions must be positive", line=1)

    lab_x, lab_y, unl_x = [], [], []
    for lineno, row in enumerate(text[1:], start=2):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != dim + 1:
            raise ParseError(f"expected {dim + 1} fields, got {len(parts)}", line=lineno)
        try:
            feats = [float(p) for p in parts[:-1]]
            label = int(parts[-1])
        except ValueError:
            raise ParseError(f"malformed row {row!r}", line=lineno) from None
        if not all(math.isfinite(v) for v in feats):
            raise ParseError("non-finite feature value", line=lineno)
        if label == -1:
            unl_x.append(feats)
        elif 0 <= label < n_classes:
            lab_x.append(feats)
            lab_y.append(label)
        else:
            raise ParseError(f"label {label} outside [0, {n_classes}) and not -1", line=lineno)
    if not lab_x:
        raise ParseError("file contains no labeled rows")
    return SplitDataset(np.array(lab_x), np.array(lab_y), np.array(unl_x).reshape(-1, dim),
                        n_classes)
