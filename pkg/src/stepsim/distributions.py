"""Latency distribution algebra for kernel execution times.

Every kernel's execution time is a probability law over nonnegative seconds.
Three concrete representations cover everything the simulator needs:

* :class:`Gaussian` -- parametric (mean, population sigma) fit; sampled by
  inverse transform with draws clamped at zero.
* :class:`Empirical` -- a sorted sample set with type-7 (linearly
  interpolated) quantiles.
* :class:`PointMass` -- a degenerate value, indistinguishable from
  ``Gaussian(v, 0)`` under every operation.

Two composition rules do the heavy lifting: independent serial execution adds
means and variances (:func:`compose_serial`), and concurrent execution
multiplies CDFs, i.e. takes the distribution of the maximum, realised
numerically on a shared grid (:func:`compose_parallel`).
"""

from __future__ import annotations

import json
import math
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "LatencyDistribution",
    "Gaussian",
    "Empirical",
    "PointMass",
    "DistributionCatalog",
    "UnknownKernelError",
    "fit_gaussian",
    "compose_serial",
    "compose_parallel",
    "ks_distance",
    "from_percentiles",
    "PARALLEL_GRID_POINTS",
]

# Shared numerical grid for parallel composition: common support between the
# 1e-4 and 1-1e-4 quantiles of the inputs, 4096 uniform points.
PARALLEL_GRID_POINTS = 4096
_TAIL_PROB = 1e-4

# Uniform draws are clipped away from {0, 1} before inverse-transform so a
# pathological 0.0 from the generator cannot map to -inf.
_U_EPS = 1e-16


class UnknownKernelError(KeyError):
    """A task's kernel key has no distribution in the catalog."""


def _as_prob(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.size == 0 or np.any((arr <= 0.0) | (arr >= 1.0)):
        raise ValueError("probability must lie strictly inside (0, 1)")
    return arr


def _maybe_scalar(arr: np.ndarray, scalar_in: bool):
    return float(np.asarray(arr).item()) if scalar_in else arr


def gaussian_inverse_cdf(u, mu: float, sigma: float, allow_negative: bool = False):
    """Inverse CDF of a (zero-clamped) Gaussian applied to uniform draws.

    Single source of truth for both :meth:`Gaussian.sample` and the vectorised
    sampling path in the simulation engine, so the two stay bit-identical.
    """
    u = np.clip(np.asarray(u, dtype=float), _U_EPS, 1.0 - _U_EPS)
    x = mu + sigma * ndtri(u)
    if not allow_negative:
        x = np.maximum(x, 0.0)
    return x


# ---------------------------------------------------------------------------
# Distribution types
# ---------------------------------------------------------------------------


class LatencyDistribution:
    """Base interface shared by all latency laws.

    Instances are immutable values: every "modifying" operation returns a new
    distribution, so they are safe to share across concurrent simulation
    replicates.
    """

    def mean(self) -> float:
        raise NotImplementedError

    def std(self) -> float:
        raise NotImplementedError

    def quantile(self, p):
        """Quantile function; ``p`` may be a scalar or an array in (0, 1)."""
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def inverse_cdf(self, u):
        """Inverse CDF without the open-interval check; used for sampling."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Draw ``n`` values (or one scalar) by inverse transform of uniforms.

        Exactly one uniform is consumed per draw regardless of the concrete
        distribution, which keeps seed-coupled comparisons between catalogs
        meaningful.
        """
        u = rng.random() if n is None else rng.random(n)
        out = self.inverse_cdf(u)
        return float(out) if n is None else out

    def summary(self) -> tuple[float, float]:
        return self.mean(), self.std()

    # -- perturbation helpers -------------------------------------------------

    def with_mean(self, new_mean: float) -> "LatencyDistribution":
        """Same shape shifted so the mean equals ``new_mean`` (clamped at 0)."""
        raise NotImplementedError

    def with_sigma(self, new_sigma: float) -> "LatencyDistribution":
        """Same mean with the standard deviation rescaled to ``new_sigma``."""
        raise NotImplementedError

    def shifted(self, offset: float) -> "LatencyDistribution":
        """Distribution of (X + offset) for a deterministic offset."""
        raise NotImplementedError

    # -- serialization --------------------------------------------------------

    def to_json_obj(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_json_obj(obj: Mapping) -> "LatencyDistribution":
        kind = obj.get("type")
        if kind == "gaussian":
            return Gaussian(float(obj["mu"]), float(obj["sigma"]))
        if kind == "empirical":
            return Empirical(np.asarray(obj["samples"], dtype=float))
        raise ValueError(f"unknown distribution type {kind!r}")


class Gaussian(LatencyDistribution):
    """Normal law over latencies, clamped at zero when sampled or queried.

    Clamping (rather than re-drawing) keeps the sample mean predictable for
    high-CV kernels; it only has an effect when sigma is large relative to mu.
    ``allow_negative=True`` disables the clamp; it exists solely so validation
    tests can exercise closed forms on full normal support.
    """

    __slots__ = ("mu", "sigma", "allow_negative")

    def __init__(self, mu: float, sigma: float, allow_negative: bool = False):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.mu = float(mu)
        self.sigma = float(sigma)
        self.allow_negative = bool(allow_negative)

    def mean(self) -> float:
        return self.mu

    def std(self) -> float:
        return self.sigma

    def quantile(self, p):
        arr = _as_prob(p)
        if self.sigma == 0.0:
            q = np.full_like(arr, self.mu)
        else:
            q = self.mu + self.sigma * ndtri(arr)
        if not self.allow_negative:
            q = np.maximum(q, 0.0)
        return _maybe_scalar(q, np.isscalar(p))

    def cdf(self, x):
        arr = np.asarray(x, dtype=float)
        if self.sigma == 0.0:
            point = self.mu if self.allow_negative else max(self.mu, 0.0)
            out = np.where(arr >= point, 1.0, 0.0)
        else:
            out = ndtr((arr - self.mu) / self.sigma)
            if not self.allow_negative:
                # Mass below zero collapses onto the atom at zero.
                out = np.where(arr < 0.0, 0.0, out)
        return _maybe_scalar(out, np.isscalar(x))

    def inverse_cdf(self, u):
        return gaussian_inverse_cdf(u, self.mu, self.sigma, self.allow_negative)

    def with_mean(self, new_mean: float) -> "Gaussian":
        return Gaussian(new_mean, self.sigma, self.allow_negative)

    def with_sigma(self, new_sigma: float) -> "Gaussian":
        return Gaussian(self.mu, new_sigma, self.allow_negative)

    def shifted(self, offset: float) -> "Gaussian":
        return Gaussian(self.mu + offset, self.sigma, self.allow_negative)

    def to_json_obj(self) -> dict:
        return {"type": "gaussian", "mu": self.mu, "sigma": self.sigma}

    def __repr__(self):
        return f"Gaussian(mu={self.mu:g}, sigma={self.sigma:g})"


class Empirical(LatencyDistribution):
    """Sample-backed law with type-7 interpolated quantiles.

    Samples are stored sorted ascending; the quantile function is the usual
    piecewise-linear interpolation between order statistics with clamped
    endpoints, and the CDF is its inverse.
    """

    __slots__ = ("samples",)

    def __init__(self, samples: Sequence[float] | np.ndarray):
        arr = np.sort(np.asarray(samples, dtype=float).ravel())
        if arr.size == 0:
            raise ValueError("empirical distribution needs at least one sample")
        self.samples = arr

    def mean(self) -> float:
        return float(self.samples.mean())

    def std(self) -> float:
        return float(self.samples.std())

    def quantile(self, p):
        arr = _as_prob(p)
        return _maybe_scalar(self._interp_quantile(arr), np.isscalar(p))

    def _interp_quantile(self, p: np.ndarray) -> np.ndarray:
        n = self.samples.size
        if n == 1:
            return np.full_like(np.asarray(p, dtype=float), self.samples[0])
        return np.interp(np.asarray(p, dtype=float) * (n - 1), np.arange(n), self.samples)

    def cdf(self, x):
        arr = np.atleast_1d(np.asarray(x, dtype=float))
        n = self.samples.size
        xs = np.unique(self.samples)
        if xs.size == 1:
            out = np.where(arr >= self.samples[0], 1.0, 0.0)
        else:
            # At a tied value the CDF jumps to the position of the last tie.
            fs = (np.searchsorted(self.samples, xs, side="right") - 1) / (n - 1)
            # Ratio-first interpolation: np.interp forms the slope df/dx up
            # front, which overflows for denormal-scale sample spacing.
            idx = np.clip(np.searchsorted(xs, arr, side="right"), 1, xs.size - 1)
            x0, x1 = xs[idx - 1], xs[idx]
            w = np.clip((arr - x0) / (x1 - x0), 0.0, 1.0)
            out = fs[idx - 1] + w * (fs[idx] - fs[idx - 1])
            out = np.where(arr < xs[0], 0.0, np.where(arr >= xs[-1], 1.0, out))
        return _maybe_scalar(out, np.isscalar(x))

    def inverse_cdf(self, u):
        u = np.clip(np.asarray(u, dtype=float), _U_EPS, 1.0 - _U_EPS)
        return self._interp_quantile(u)

    def with_mean(self, new_mean: float) -> "Empirical":
        return Empirical(np.maximum(self.samples + (new_mean - self.mean()), 0.0))

    def with_sigma(self, new_sigma: float) -> "LatencyDistribution":
        mu, sd = self.mean(), self.std()
        if sd == 0.0:
            return Gaussian(mu, new_sigma)
        return Empirical(np.maximum(mu + (self.samples - mu) * (new_sigma / sd), 0.0))

    def shifted(self, offset: float) -> "Empirical":
        return Empirical(self.samples + offset)

    def to_json_obj(self) -> dict:
        return {"type": "empirical", "samples": self.samples.tolist()}

    def __repr__(self):
        return f"Empirical(n={self.samples.size}, mean={self.mean():g})"


class PointMass(LatencyDistribution):
    """Deterministic latency; behaves exactly like ``Gaussian(v, 0)``."""

    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)

    def mean(self) -> float:
        return self.value

    def std(self) -> float:
        return 0.0

    def quantile(self, p):
        arr = _as_prob(p)
        return _maybe_scalar(np.full_like(arr, self.value), np.isscalar(p))

    def cdf(self, x):
        arr = np.asarray(x, dtype=float)
        return _maybe_scalar(np.where(arr >= self.value, 1.0, 0.0), np.isscalar(x))

    def inverse_cdf(self, u):
        return np.full_like(np.asarray(u, dtype=float), self.value)

    def with_mean(self, new_mean: float) -> "PointMass":
        return PointMass(new_mean)

    def with_sigma(self, new_sigma: float) -> LatencyDistribution:
        if new_sigma == 0.0:
            return PointMass(self.value)
        return Gaussian(self.value, new_sigma)

    def shifted(self, offset: float) -> "PointMass":
        return PointMass(self.value + offset)

    def to_json_obj(self) -> dict:
        # Serialized in the gaussian form; PointMass(v) == Gaussian(v, 0).
        return {"type": "gaussian", "mu": self.value, "sigma": 0.0}

    def __repr__(self):
        return f"PointMass({self.value:g})"


# ---------------------------------------------------------------------------
# Fitting and composition
# ---------------------------------------------------------------------------


def fit_gaussian(samples: Sequence[float] | np.ndarray) -> Gaussian:
    """Fit a Gaussian with the arithmetic mean and population sigma."""
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("no samples")
    if np.any(arr < 0):
        raise ValueError("negative latency")
    return Gaussian(float(arr.mean()), float(arr.std()))


def compose_serial(dists: Iterable[LatencyDistribution]) -> Gaussian:
    """Law of the sum of independent latencies: means add, variances add.

    Empirical inputs are first summarized to (mean, sd); exact convolution is
    deliberately out of scope. ``math.fsum`` keeps the result independent of
    operand order.
    """
    items = list(dists)
    if not items:
        raise ValueError("cannot compose an empty list of distributions")
    mu = math.fsum(d.mean() for d in items)
    var = math.fsum(d.std() ** 2 for d in items)
    return Gaussian(mu, math.sqrt(var))


def compose_parallel(
    dists: Iterable[LatencyDistribution],
    grid_points: int = PARALLEL_GRID_POINTS,
) -> Empirical:
    """Law of the maximum of independent latencies via a CDF product.

    The product CDF is evaluated pointwise on a shared uniform grid spanning
    the common support, then converted back to an empirical distribution by
    inverse transform at ``grid_points`` midpoint probability levels. Cost is
    O(n * grid) and the error is controlled by the grid resolution; no Monte
    Carlo noise is introduced by this operator.
    """
    items = list(dists)
    if not items:
        raise ValueError("cannot compose an empty list of distributions")
    lo = min(d.quantile(_TAIL_PROB) for d in items)
    hi = max(d.quantile(1.0 - _TAIL_PROB) for d in items)
    if hi <= lo:
        return Empirical(np.full(grid_points, hi))
    grid = np.linspace(lo, hi, grid_points)
    cdf = np.ones(grid_points)
    for d in items:
        cdf *= d.cdf(grid)
    cdf = np.maximum.accumulate(cdf)

    levels = (np.arange(grid_points) + 0.5) / grid_points
    idx = np.clip(np.searchsorted(cdf, levels, side="left"), 1, grid_points - 1)
    f0 = cdf[idx - 1]
    f1 = cdf[idx]
    span = np.where(f1 > f0, f1 - f0, 1.0)
    w = np.clip(np.where(f1 > f0, (levels - f0) / span, 0.0), 0.0, 1.0)
    samples = grid[idx - 1] + w * (grid[idx] - grid[idx - 1])
    return Empirical(samples)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov distance
# ---------------------------------------------------------------------------

SamplesOrDist = Union[Sequence[float], np.ndarray, LatencyDistribution]


def _ks_side(x: SamplesOrDist):
    """Normalize one KS argument to ('samples', array) or ('cdf', dist)."""
    if isinstance(x, Empirical):
        return "samples", x.samples
    if isinstance(x, PointMass):
        return "samples", np.array([x.value])
    if isinstance(x, Gaussian):
        if x.sigma == 0.0:
            v = x.mu if x.allow_negative else max(x.mu, 0.0)
            return "samples", np.array([v])
        return "cdf", x
    if isinstance(x, LatencyDistribution):
        return "cdf", x
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty sample set")
    return "samples", np.sort(arr)


def ks_distance(a: SamplesOrDist, b: SamplesOrDist) -> float:
    """Two-sample Kolmogorov-Smirnov statistic, sup_t |F_a(t) - F_b(t)|.

    Sample sets (and sample-backed distributions) are compared exactly at
    every ECDF step point. A parametric side is evaluated by its exact CDF; two
    parametric sides fall back to a dense quantile grid.
    """
    kind_a, side_a = _ks_side(a)
    kind_b, side_b = _ks_side(b)

    if kind_a == "samples" and kind_b == "samples":
        xs, ys = side_a, side_b
        pts = np.concatenate([xs, ys])
        fa = np.searchsorted(xs, pts, side="right") / xs.size
        fb = np.searchsorted(ys, pts, side="right") / ys.size
        return float(np.max(np.abs(fa - fb)))

    if kind_a == "cdf" and kind_b == "cdf":
        probs = np.linspace(_TAIL_PROB, 1.0 - _TAIL_PROB, 4097)
        ts = np.union1d(side_a.quantile(probs), side_b.quantile(probs))
        return float(np.max(np.abs(side_a.cdf(ts) - side_b.cdf(ts))))

    if kind_a == "cdf":
        side_a, side_b = side_b, side_a  # samples first
    xs, dist = side_a, side_b
    n = xs.size
    f = np.asarray(dist.cdf(xs), dtype=float)
    upper = np.abs(f - (np.arange(1, n + 1) / n))
    lower = np.abs(f - (np.arange(n) / n))
    return float(max(np.max(upper), np.max(lower)))


# ---------------------------------------------------------------------------
# Fixture construction from percentile anchors
# ---------------------------------------------------------------------------


def from_percentiles(anchors: Mapping[float, float], n: int = 1024) -> Empirical:
    """Empirical law through percentile anchors, e.g. ``{5: 2.6, 50: 3.0, 95: 5.7}``.

    The CDF is piecewise linear through the anchors with flat extrapolation
    beyond the outermost ones (quantile queries clamp to the end values).
    Intended for fixtures built from reported percentile triples.
    """
    if len(anchors) < 2:
        raise ValueError("need at least two percentile anchors")
    ps = np.asarray(sorted(anchors), dtype=float)
    if np.any((ps <= 0) | (ps >= 100)):
        raise ValueError("percentiles must lie strictly inside (0, 100)")
    vs = np.asarray([anchors[p] for p in sorted(anchors)], dtype=float)
    if np.any(np.diff(vs) < 0):
        raise ValueError("anchor values must be nondecreasing in percentile")
    levels = (np.arange(n) + 0.5) / n
    samples = np.interp(levels, ps / 100.0, vs)
    return Empirical(samples)


# ---------------------------------------------------------------------------
# Distribution catalog
# ---------------------------------------------------------------------------

CatalogKey = tuple[str, Union[int, None]]


class DistributionCatalog:
    """Immutable map from (kernel name, rank) to a latency distribution.

    Lookup falls back from the exact ``(kernel, rank)`` entry to the any-rank
    default ``(kernel, None)``; a miss on both is a hard error, never a silent
    zero. Perturbations never mutate a catalog; they build a new one.
    """

    def __init__(self, entries: Mapping[CatalogKey, LatencyDistribution]):
        normalized: dict[CatalogKey, LatencyDistribution] = {}
        for key, dist in entries.items():
            if isinstance(key, str):
                key = (key, None)
            kernel, rank = key
            normalized[(str(kernel), None if rank is None else int(rank))] = dist
        self._entries = normalized

    # -- queries --------------------------------------------------------------

    def lookup(self, kernel: str, rank: int | None = None) -> LatencyDistribution:
        hit = self._entries.get((kernel, rank))
        if hit is None and rank is not None:
            hit = self._entries.get((kernel, None))
        if hit is None:
            raise UnknownKernelError(
                f"no distribution for kernel {kernel!r} (rank {rank})"
            )
        return hit

    def __contains__(self, key: CatalogKey) -> bool:
        if isinstance(key, str):
            key = (key, None)
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def kernels(self) -> list[str]:
        return sorted({kernel for kernel, _ in self._entries})

    def has_kernel(self, kernel: str) -> bool:
        return any(k == kernel for k, _ in self._entries)

    # -- derivation -----------------------------------------------------------

    def with_entries(
        self, updates: Mapping[CatalogKey, LatencyDistribution]
    ) -> "DistributionCatalog":
        merged = dict(self._entries)
        merged.update(DistributionCatalog(updates)._entries)
        return DistributionCatalog(merged)

    # -- serialization --------------------------------------------------------
    # Keys on disk are "<kernel>@<rank>" with "*" for the any-rank default.

    def to_json(self) -> str:
        doc = {}
        for (kernel, rank), dist in self._entries.items():
            suffix = "*" if rank is None else str(rank)
            doc[f"{kernel}@{suffix}"] = dist.to_json_obj()
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_json(cls, text: str) -> "DistributionCatalog":
        doc = json.loads(text)
        entries: dict[CatalogKey, LatencyDistribution] = {}
        for key, obj in doc.items():
            kernel, _, suffix = key.rpartition("@")
            if not kernel:
                raise ValueError(f"malformed catalog key {key!r}")
            rank = None if suffix == "*" else int(suffix)
            entries[(kernel, rank)] = LatencyDistribution.from_json_obj(obj)
        return cls(entries)

    @classmethod
    def load(cls, path) -> "DistributionCatalog":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def __repr__(self):
        return f"DistributionCatalog({len(self._entries)} entries)"
