"""Two-sample statistics: MMD, energy distance and 1-D kernel density."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .datagen import SplitDataset, sample_beta
from .errors import ConfigError, DegenerateInputError, ParseError, UsageError

# Above this many (pairs x dims) energy_distance_sq switches to the
# moment form, which is algebraically identical for the V-statistic.
PAIRWISE_BUDGET = 10_000_000


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian RBF kernel ``exp(-|x-y|^2 / (2 bandwidth^2))``.

    ``bandwidth=None`` selects the median heuristic on the pooled samples
    at evaluation time.  ``bound`` is the kernel's supremum.
    """

    kind: str = "rbf"
    bandwidth: float | None = None
    bound: float = 1.0

    def __post_init__(self):
        if self.kind != "rbf":
            raise ConfigError(f"unsupported kernel kind {self.kind!r}", field="kind")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}",
                              field="bandwidth")


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def _as_samples(x) -> np.ndarray:
    if isinstance(x, SplitDataset):
        x = np.concatenate([x.labeled_x, x.unlabeled_x])
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise UsageError(f"sample set must be [N, D], got shape {arr.shape}")
    return arr


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_samples(a), _as_samples(b)
    if len(a) == 0 or len(b) == 0:
        raise UsageError("sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"dimensionality differs: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared euclidean distances via the Gram expansion, clipped at 0."""
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def median_heuristic(samples) -> float:
    """Median pairwise euclidean distance, or 1.0 if that median is 0."""
    x = _as_samples(samples)
    if len(x) < 2:
        return 1.0
    med = float(np.median(pdist(x)))
    return med if med > 0 else 1.0


def rbf_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sq_distances(a, b) / (2.0 * bandwidth * bandwidth))


def _canonical(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # A fixed argument order makes mmd(A, B) and mmd(B, A) run the same sums.
    ka = (a.shape, a.tobytes())
    kb = (b.shape, b.tobytes())
    return (a, b) if ka <= kb else (b, a)


def mmd(a, b, kernel: KernelSpec | None = None) -> float:
    """Biased (V-statistic) MMD estimate between two sample sets."""
    a, b = _check_pair(a, b)
    kernel = KernelSpec() if kernel is None else kernel
    a, b = _canonical(a, b)
    sigma = kernel.bandwidth
    if sigma is None:
        sigma = median_heuristic(np.concatenate([a, b]))
    k_aa = rbf_kernel(a, a, sigma).mean()
    k_bb = rbf_kernel(b, b, sigma).mean()
    k_ab = rbf_kernel(a, b, sigma).mean()
    return math.sqrt(max(k_aa + k_bb - 2.0 * k_ab, 0.0))


def mmd_deviation_bound(n: int, m: int, bound: float, epsilon: float) -> tuple[float, float]:
    """Concentration bound for MMD between two samples of one distribution.

    Returns ``(threshold, prob_bound)`` such that
    ``P(MMD > threshold) <= prob_bound`` with
    ``threshold = 2 (sqrt(K/n) + sqrt(K/m) + eps)`` and
    ``prob_bound = 2 exp(-eps^2 n m / (2 K (n + m)))``.
    """
    if n < 1 or m < 1:
        raise UsageError("sample sizes must be at least 1")
    if not bound > 0 or not epsilon >= 0:
        raise ConfigError("kernel bound must be positive and epsilon non-negative")
    threshold = 2.0 * (math.sqrt(bound / n) + math.sqrt(bound / m) + epsilon)
    prob = 2.0 * math.exp(-(epsilon ** 2) * n * m / (2.0 * bound * (n + m)))
    return threshold, prob


def _mean_sq_pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(cdist(a, b, "sqeuclidean").mean())


def _mean_sq_pair_distance_moments(a: np.ndarray, b: np.ndarray) -> float:
    # mean_{i,j} |a_i - b_j|^2 = mean|a|^2 + mean|b|^2 - 2 mean(a).mean(b)
    return float((a * a).sum(axis=1).mean() + (b * b).sum(axis=1).mean()
                 - 2.0 * a.mean(axis=0) @ b.mean(axis=0))


def energy_distance_sq(a, b, method: str = "auto") -> float:
    """Energy distance with squared euclidean ground distance (V-statistic).

    ``2 E|a-b|^2 - E|a-a'|^2 - E|b-b'|^2``, self-pairs included.  For this
    estimator the value equals ``2 |mean(a) - mean(b)|^2``.

    ``method`` is ``"pairwise"`` (explicit pair sums), ``"moments"`` (first
    and second moments, O(N D)) or ``"auto"`` (pairwise while cheap).
    """
    a, b = _check_pair(a, b)
    if method == "auto":
        pairs = len(a) * len(b) + len(a) ** 2 + len(b) ** 2
        method = "pairwise" if pairs * a.shape[1] <= PAIRWISE_BUDGET else "moments"
    if method == "pairwise":
        f = _mean_sq_pair_distance
    elif method == "moments":
        f = _mean_sq_pair_distance_moments
    else:
        raise ConfigError(f"unknown method {method!r}", field="method")
    return 2.0 * f(a, b) - f(a, a) - f(b, b)


LambdaSampler = Callable[[int, np.random.Generator], np.ndarray]


def mixup_energy_ratio(labeled, unlabeled, alpha: float, n_mix: int,
                       rng: np.random.Generator,
                       lambda_sampler: LambdaSampler | None = None) -> float:
    """Energy distance of cross-set interpolants to U, relative to that of L.

    Draws ``n_mix`` random (labeled, unlabeled) pairs, mixes each with
    ``lam ~ Beta(alpha, alpha)`` (or ``lambda_sampler``) and returns
    ``J^2(mixed, U) / J^2(L, U)``.  Expected to be close to 1/4.
    """
    lab, unl = _check_pair(labeled, unlabeled)
    if n_mix < 1:
        raise UsageError("n_mix must be positive")
    base = energy_distance_sq(lab, unl)
    if base < 1e-12:
        raise DegenerateInputError(f"J^2(L, U) = {base:.3g}; ratio undefined")
    i = rng.integers(0, len(lab), n_mix)
    j = rng.integers(0, len(unl), n_mix)
    if lambda_sampler is None:
        lam = sample_beta(alpha, n_mix, rng)
    else:
        lam = np.asarray(lambda_sampler(n_mix, rng), dtype=np.float64)
    mixed = lam[:, None] * lab[i] + (1.0 - lam[:, None]) * unl[j]
    return energy_distance_sq(mixed, unl) / base


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        return 1.0
    return 0.9 * spread * len(x) ** (-0.2)


def kde_density(samples, grid=None, bandwidth: float | None = None,
                grid_size: int = 256) -> DensityCurve:
    """Gaussian kernel density estimate of 1-D ``samples`` on ``grid``."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if len(s) == 0:
        raise UsageError("kde needs at least one sample")
    h = silverman_bandwidth(s) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}", field="bandwidth")
    if grid is None:
        grid = np.linspace(s.min() - 4 * h, s.max() + 4 * h, grid_size)
    g = np.asarray(grid, dtype=np.float64).ravel()
    if np.any(np.diff(g) < 0):
        raise UsageError("grid must be sorted ascending")
    z = (g[:, None] - s[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (len(s) * h * math.sqrt(2.0 * math.pi))
    return DensityCurve(g, density, h)


@dataclass
class MMDCurveRow:
    n: int
    mean_mmd: float
    sd_mmd: float


def mmd_vs_labeled_size(pool, sizes: Sequence[int], trials: int,
                        kernel: KernelSpec | None, rng: np.random.Generator,
                        n_unlabeled: int = 1000) -> list[MMDCurveRow]:
    """MMD between n random labeled draws and an unlabeled draw, per n.

    Each trial draws the unlabeled set (``min(n_unlabeled, |pool|)`` points)
    and the labeled set independently from ``pool`` without replacement.
    A missing bandwidth is fixed once by the median heuristic on the pool.
    """
    x = _as_samples(pool)
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise UsageError("sizes must be non-empty")
    if min(sizes) < 1 or max(sizes) > len(x):
        raise UsageError(f"sizes must lie in [1, {len(x)}]")
    if trials < 1:
        raise UsageError("trials must be positive")
    kernel = KernelSpec() if kernel is None else kernel
    if kernel.bandwidth is None:
        kernel = KernelSpec(bandwidth=median_heuristic(x), bound=kernel.bound)
    m = min(n_unlabeled, len(x))
    rows = []
    for n in sizes:
        vals = np.empty(trials)
        for t in range(trials):
            unl = x[rng.choice(len(x), size=m, replace=False)]
            lab = x[rng.choice(len(x), size=n, replace=False)]
            vals[t] = mmd(lab, unl, kernel)
        sd = float(np.std(vals, ddof=1)) if trials > 1 else 0.0
        rows.append(MMDCurveRow(n, float(vals.mean()), sd))
    return rows


@dataclass
class ExceedanceRow:
    epsilon: float
    threshold: float
    prob_bound: float
    exceedance_rate: float

    @property
    def holds(self) -> bool:
        return self.exceedance_rate <= self.prob_bound


def mmd_exceedance(pool, n: int, m: int, epsilons: Sequence[float], trials: int,
                   kernel: KernelSpec | None, rng: np.random.Generator) -> list[ExceedanceRow]:
    """Empirical ``P(MMD > threshold(eps))`` over disjoint pool resamples."""
    x = _as_samples(pool)
    if n + m > len(x):
        raise UsageError(f"pool of {len(x)} cannot supply disjoint sets of {n} and {m}")
    kernel = KernelSpec() if kernel is None else kernel
    if kernel.bandwidth is None:
        kernel = KernelSpec(bandwidth=median_heuristic(x), bound=kernel.bound)
    vals = np.empty(trials)
    for t in range(trials):
        idx = rng.permutation(len(x))
        vals[t] = mmd(x[idx[:n]], x[idx[n:n + m]], kernel)
    rows = []
    for eps in epsilons:
        threshold, prob = mmd_deviation_bound(n, m, kernel.bound, eps)
        rows.append(ExceedanceRow(float(eps), threshold, prob, float(np.mean(vals > threshold))))
    return rows


def write_density_csv(curve: DensityCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "density"])
        for g, d in zip(curve.grid, curve.density):
            w.writerow([repr(float(g)), repr(float(d))])


def read_density_csv(path) -> DensityCurve:
    rows = _read_table(path, ["grid", "density"])
    grid = np.array([float(r[0]) for r in rows])
    density = np.array([float(r[1]) for r in rows])
    return DensityCurve(grid, density, bandwidth=float("nan"))


def write_mmd_curve_csv(rows: Sequence[MMDCurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "mean_mmd", "sd_mmd"])
        for r in rows:
            w.writerow([r.n, repr(r.mean_mmd), repr(r.sd_mmd)])


def read_mmd_curve_csv(path) -> list[MMDCurveRow]:
    rows = _read_table(path, ["n", "mean_mmd", "sd_mmd"])
    return [MMDCurveRow(int(r[0]), float(r[1]), float(r[2])) for r in rows]


def _read_table(path, header: list[str]) -> list[list[str]]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ParseError(f"expected header {','.join(header)}", line=1)
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields", line=lineno)
        try:
            [float(v) for v in r]
        except ValueError:
            raise ParseError(f"non-numeric field in {r!r}", line=lineno) from None
    return rows[1:]
