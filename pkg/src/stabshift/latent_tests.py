"""Two-sample statistics on latent samples, permutation calibration, and the
oracle constructions used to sanity-check the latent reformulation.

Samples are ``(n, d)`` arrays; 1-D input is treated as ``d = 1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special, stats
from scipy.spatial.distance import cdist, pdist

from .errors import UnsupportedDimensionError

BANDWIDTH_FLOOR = 1e-3
DEFAULT_N_PERM = 199
_MEDIAN_MAX_POINTS = 2000


def as_samples(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("samples must be a nonempty (n, d) array")
    return a


def _same_dim(a, b):
    a, b = as_samples(a), as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise UnsupportedDimensionError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting this

    method: str
    statistic: float
    p_value: float
    threshold: float
    reject: bool
    n_resamples: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "TestResult":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# kernels and statistics


def median_bandwidth(z, floor: float = BANDWIDTH_FLOOR) -> float:
    """Median pairwise Euclidean distance of the rows of ``z``, floored.

    Large pools are thinned to an evenly spaced subset so the cost stays bounded.
    """
    z = as_samples(z)
    if z.shape[0] > _MEDIAN_MAX_POINTS:
        idx = np.linspace(0, z.shape[0] - 1, _MEDIAN_MAX_POINTS).astype(int)
        z = z[idx]
    if z.shape[0] < 2:
        return float(floor)
    return float(max(np.median(pdist(z)), floor))


def gaussian_kernel(a, b, bandwidth: float) -> np.ndarray:
    d2 = cdist(as_samples(a), as_samples(b), "sqeuclidean")
    return np.exp(-d2 / (2.0 * bandwidth**2))


def mmd2_vstat(a, b, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel.

    ``bandwidth=None`` uses the median heuristic on the pooled sample.
    """
    a, b = _same_dim(a, b)
    if bandwidth is None:
        bandwidth = median_bandwidth(np.vstack([a, b]))
    val = (
        gaussian_kernel(a, a, bandwidth).mean()
        + gaussian_kernel(b, b, bandwidth).mean()
        - 2.0 * gaussian_kernel(a, b, bandwidth).mean()
    )
    return float(max(val, 0.0))


def energy_distance(a, b) -> float:
    a, b = _same_dim(a, b)
    val = 2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return float(max(val, 0.0))


def ks_two_sample(a, b, alpha: float = 0.1) -> TestResult:
    """Two-sample KS with the asymptotic Kolmogorov p-value at effective size nm/(n+m)."""
    a, b = _same_dim(a, b)
    if a.shape[1] != 1:
        raise UnsupportedDimensionError("KS test needs one-dimensional samples")
    xa, xb = np.sort(a[:, 0]), np.sort(b[:, 0])
    n, m = len(xa), len(xb)
    grid = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, grid, side="right") / n
    fb = np.searchsorted(xb, grid, side="right") / m
    d = float(np.max(np.abs(fa - fb)))
    n_eff = n * m / (n + m)
    p = float(special.kolmogorov(np.sqrt(n_eff) * d))
    thr = float(special.kolmogi(alpha) / np.sqrt(n_eff))
    return TestResult("ks", d, p, thr, p <= alpha)


def ks_uniform(latents, alpha: float = 0.01) -> TestResult:
    """One-sample KS against Unif(0,1); a diagnostic for trained encoders."""
    x = as_samples(latents)
    if x.shape[1] != 1:
        raise UnsupportedDimensionError("KS test needs one-dimensional samples")
    res = stats.kstest(x[:, 0], "uniform")
    thr = float(stats.kstwo.ppf(1 - alpha, len(x)))
    return TestResult("ks_uniform", float(res.statistic), float(res.pvalue), thr, float(res.statistic) > thr)


def welch_t_test(a, b, alpha: float = 0.1) -> TestResult:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Welch test needs at least two values per sample")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TestResult("welch", 0.0, 1.0, np.inf, False)
        return TestResult("welch", float(np.copysign(np.inf, diff)), 0.0, np.inf, True)
    t = diff / np.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = float(min(1.0, 2.0 * special.stdtr(df, -abs(t))))
    thr = float(stats.t.ppf(1 - alpha / 2, df))
    return TestResult("welch", float(t), p, thr, p <= alpha)


def permutation_test(
    a,
    b,
    statistic: str = "mmd",
    n_perm: int = DEFAULT_N_PERM,
    alpha: float = 0.1,
    seed: int | None = None,
    bandwidth: float | None = None,
) -> TestResult:
    """Permutation two-sample test with the add-one p-value.

    Both statistics are quadratic forms ``w' M w`` in the signed group weights
    ``w`` (``1/n`` on A, ``-1/m`` on B), so relabelings reduce to permuting ``w``.
    The kernel bandwidth is fixed once from the pooled sample.
    """
    if n_perm < 19:
        raise ValueError("n_perm must be at least 19")
    a, b = _same_dim(a, b)
    z = np.vstack([a, b])
    n, m = len(a), len(b)
    if statistic == "mmd":
        bw = median_bandwidth(z) if bandwidth is None else float(bandwidth)
        M = gaussian_kernel(z, z, bw)
    elif statistic == "energy":
        M = -cdist(z, z)
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    w = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    observed = float(w @ M @ w)

    rng = np.random.default_rng(seed)
    perm_stats = np.empty(n_perm)
    chunk = 64
    for start in range(0, n_perm, chunk):
        k = min(chunk, n_perm - start)
        W = np.stack([rng.permutation(w) for _ in range(k)], axis=1)
        perm_stats[start : start + k] = np.einsum("ij,ij->j", W, M @ W)
    # ties count against rejection; tolerance absorbs summation-order noise
    tol = 1e-12 * max(abs(observed), 1e-300)
    exceed = int(np.sum(perm_stats >= observed - tol))
    p = (1 + exceed) / (n_perm + 1)
    thr = float(np.quantile(perm_stats, 1 - alpha, method="higher"))
    return TestResult(f"perm_{statistic}", max(observed, 0.0), p, thr, p <= alpha, n_perm, seed)


# ---------------------------------------------------------------------------
# oracle constructions


def tv_mixture(p1: float, alpha: float) -> float:
    """TV between the oracle latent law with unstable fraction ``p1`` and Unif[0,1]."""
    if not 0 <= p1 <= 1:
        raise ValueError("p1 must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return abs(p1 - alpha / 2)


def construct_oracle_latents(stable, alpha: float, seed=None) -> np.ndarray:
    """Unstable contexts map to Unif[0, a/2], stable ones to Unif[a/2, 1]."""
    stable = np.asarray(stable, dtype=bool).ravel()
    if stable.size == 0:
        raise ValueError("labels must be nonempty")
    rng = np.random.default_rng(seed)
    r = rng.random(stable.size)
    half = alpha / 2
    u = np.where(stable, half + (1 - half) * r, half * r)
    return u[:, None]


@dataclass(frozen=True)
class ApproxBoundInputs:
    eps_suf: float
    eps0: float
    eps1: float
    p_hat1: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not 0 <= v <= 1:
                raise ValueError(f"{k}={v} must lie in [0, 1]")


def approx_band(inputs: ApproxBoundInputs) -> float:
    return inputs.eps_suf + inputs.p_hat1 * inputs.eps0 + (1 - inputs.p_hat1) * inputs.eps1


def default_tv_edges(alpha: float, n_upper: int = 19) -> np.ndarray:
    return np.concatenate([[0.0], alpha / 2 + (1 - alpha / 2) * np.linspace(0, 1, n_upper + 1)])


def empirical_tv_piecewise(latents, alpha: float = 0.1, bins=None) -> float:
    """Histogram estimate of TV(latent law, Unif[0,1]).

    ``bins`` is either ``None`` (``[0, a/2]`` plus 19 equal bins on ``[a/2, 1]``),
    an int (number of equal bins on ``[a/2, 1]``), or explicit edges covering
    ``[0, 1]`` that include ``a/2``.
    """
    x = as_samples(latents)
    if x.shape[1] != 1:
        raise UnsupportedDimensionError("piecewise TV is defined for d = 1")
    if bins is None:
        edges = default_tv_edges(alpha)
    elif np.isscalar(bins):
        edges = default_tv_edges(alpha, int(bins))
    else:
        edges = np.asarray(bins, dtype=float)
        if len(edges) < 3 or edges[0] != 0 or edges[-1] != 1 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must increase from 0 to 1 with at least two bins")
        if not np.any(np.isclose(edges, alpha / 2)):
            raise ValueError("edges must include alpha/2")
    counts, _ = np.histogram(np.clip(x[:, 0], 0, 1), bins=edges)
    return float(0.5 * np.abs(counts / len(x) - np.diff(edges)).sum())


def tv_exceeds(latents, alpha: float = 0.1, bins=None) -> bool:
    """One-sample oracle test 1{TV_hat > alpha/2} (rejects the safe hypothesis)."""
    return empirical_tv_piecewise(latents, alpha, bins) > alpha / 2


def perturbed_oracle_latents(
    n: int, p1: float, alpha: float, eps_suf: float, eps0: float, eps1: float, seed=None
):
    """Oracle latents degraded by known amounts.

    Labels are flipped at rate ``eps_suf`` before encoding, and each class-conditional
    uniform is mixed (weight ``2*eps``) with the uniform on the lower half of its
    interval, which is at TV distance exactly ``eps`` from the ideal conditional.
    Returns ``(latents, stable_true, stable_observed)``.
    """
    if max(eps0, eps1) > 0.5:
        raise ValueError("eps0, eps1 must be at most 0.5")
    rng = np.random.default_rng(seed)
    stable = rng.random(n) >= p1
    flip = rng.random(n) < eps_suf
    observed = stable ^ flip
    half = alpha / 2
    lo = np.where(observed, half, 0.0)
    width = np.where(observed, 1 - half, half)
    eps = np.where(observed, eps1, eps0)
    squeeze = rng.random(n) < 2 * eps
    width = np.where(squeeze, width / 2, width)
    u = lo + width * rng.random(n)
    return u[:, None], stable, observed
