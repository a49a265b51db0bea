"""Generation-quality measurement and empirical contraction verification.

Quality is the Frechet distance between Gaussian fits of real and generated
points:

    F = ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}).

The matrix square root uses the symmetric composition
sqrt(S_r) * sqrt(sqrt(S_r) S_g sqrt(S_r)) via eigendecomposition, which keeps
every factor symmetric PSD.  Contraction checks iterate a weighted average of
client maps under additive noise and compare the mean distance to the fixed
point against the geometric bound L^t * d0 + sigma / (1 - L).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .denoiser import MlpDenoiser, ParamVector, noise_predictor
from .diffusion import NoiseSchedule, reverse_step
from .errors import ContractionError
from .rng import derive_seed

PointMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class GaussianStats:
    """Mean vector and symmetric PSD covariance of a point cloud."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean dim {mean.size}")
        if cov.size and np.max(np.abs(cov - cov.T)) > 1e-10:
            raise ValueError("covariance must be symmetric within 1e-10")
        if cov.size and np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return int(self.mean.size)


def fit_gaussian(samples) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance."""
    pts = np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    mean = pts.mean(axis=0)
    cov = np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, cov=cov)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    sym = 0.5 * (mat + mat.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return 0.5 * (root + root.T)


def frechet_distance(r: GaussianStats, g: GaussianStats) -> float:
    """Frechet distance between two Gaussians, clamped at zero."""
    if r.dim != g.dim:
        raise ValueError(f"dimension mismatch: {r.dim} vs {g.dim}")
    root_r = _sqrtm_psd(r.cov)
    cross = _sqrtm_psd(root_r @ g.cov @ root_r)
    diff = r.mean - g.mean
    value = float(
        diff @ diff + np.trace(r.cov) + np.trace(g.cov) - 2.0 * np.trace(cross)
    )
    return max(value, 0.0)


def estimate_lipschitz(
    fn: PointMap, domain_samples, pairs: int, seed: int
) -> float:
    """Max of ||f(x) - f(y)|| / ||x - y|| over sampled pairs; a lower bound on L.

    ``fn`` must be vectorized over the leading axis of an (m, d) array.
    """
    pts = np.asarray(domain_samples, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n < 2:
        raise ValueError("need at least 2 domain samples")
    if pairs < 1:
        raise ValueError("need at least 1 pair")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, n, size=pairs)
    ib = rng.integers(0, n - 1, size=pairs)
    ib = np.where(ib >= ia, ib + 1, ib)
    dist = np.linalg.norm(pts[ia] - pts[ib], axis=1)
    keep = dist > 0.0
    if not np.any(keep):
        raise ValueError("all sampled domain points are identical")
    fa = np.asarray(fn(pts[ia[keep]]), dtype=float)
    fb = np.asarray(fn(pts[ib[keep]]), dtype=float)
    ratios = np.linalg.norm(fa - fb, axis=1) / dist[keep]
    return float(ratios.max())


@dataclass(frozen=True, eq=False)
class ContractionProbe:
    """Estimates and trajectory produced by a contraction check."""

    lipschitz_estimates: np.ndarray
    aggregate_estimate: float
    noise_std: float
    fixed_point: Optional[np.ndarray]
    trajectory: np.ndarray
    bound: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None
    satisfied: Optional[bool] = None

    def to_dict(self) -> dict:
        def _arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "lipschitz_estimates": _arr(self.lipschitz_estimates),
            "aggregate_estimate": self.aggregate_estimate,
            "noise_std": self.noise_std,
            "fixed_point": _arr(self.fixed_point),
            "trajectory": _arr(self.trajectory),
            "bound": _arr(self.bound),
            "stderr": _arr(self.stderr),
            "satisfied": self.satisfied,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _averaged_map(maps: Sequence[PointMap], weights: np.ndarray) -> PointMap:
    def avg(x: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(x)
        for w, m in zip(weights, maps):
            acc = acc + w * np.asarray(m(x), dtype=float)
        return acc

    return avg


def _find_fixed_point(avg: PointMap, x0: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    x = x0.copy()
    for _ in range(100_000):
        nxt = avg(x[None, :])[0]
        step = float(np.linalg.norm(nxt - x))
        x = nxt
        if step <= tol:
            return x
        if not math.isfinite(step) or step > 1e12:
            raise ContractionError("fixed-point iteration diverged")
    raise ContractionError("fixed-point iteration did not converge")


def verify_contraction_bound(
    maps: Sequence[PointMap],
    weights,
    noise_std: float,
    x0,
    steps: int,
    trials: int,
    seed: int,
) -> ContractionProbe:
    """Check E||x_t - x*|| <= L^t ||x0 - x*|| + sigma / (1 - L) empirically.

    Iterates x_{t+1} = avg(x_t) + zeta_t with zeta_t ~ N(0, sigma^2 / d * I),
    so E||zeta||^2 <= sigma^2.  With sigma = 0 the check is exact to 1e-9;
    otherwise the mean trajectory must stay below the bound within three
    standard errors at every step.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    dim = x0.size
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(maps) != w.size:
        raise ValueError("one weight per map required")
    if abs(float(w.sum()) - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    if steps < 1 or trials < 1:
        raise ValueError("steps and trials must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")

    probe = x0 + np.random.default_rng(derive_seed(seed, "domain")).standard_normal(
        (64, dim)
    )
    estimates = np.array(
        [
            estimate_lipschitz(m, probe, pairs=256, seed=derive_seed(seed, "pairs", i))
            for i, m in enumerate(maps)
        ]
    )
    if np.any(estimates >= 1.0):
        warnings.warn(
            "per-client map does not look contractive on the probe domain "
            f"(estimates {estimates})",
            stacklevel=2,
        )
    aggregate = float(w @ estimates)
    if aggregate >= 1.0:
        raise ContractionError(
            f"aggregate Lipschitz estimate {aggregate:.6f} >= 1; no fixed point guaranteed"
        )

    avg = _averaged_map(maps, w)
    x_star = _find_fixed_point(avg, x0)

    if noise_std > 0:
        scale = noise_std / math.sqrt(dim)
        noise = np.empty((trials, steps, dim))
        for i in range(trials):
            noise[i] = (
                np.random.default_rng(derive_seed(seed, "trial", i)).standard_normal(
                    (steps, dim)
                )
                * scale
            )
    else:
        noise = np.zeros((trials, steps, dim))

    x = np.tile(x0, (trials, 1))
    dists = np.zeros((trials, steps + 1))
    dists[:, 0] = np.linalg.norm(x - x_star, axis=1)
    for t in range(steps):
        x = avg(x) + noise[:, t, :]
        dists[:, t + 1] = np.linalg.norm(x - x_star, axis=1)

    mean = dists.mean(axis=0)
    stderr = (
        dists.std(axis=0, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(steps + 1)
    )
    powers = aggregate ** np.arange(steps + 1)
    bound = powers * mean[0]
    if noise_std > 0:
        bound = bound + noise_std / (1.0 - aggregate)
    slack = 3.0 * stderr if noise_std > 0 else 1e-9
    satisfied = bool(np.all(mean <= bound + slack))
    return ContractionProbe(
        lipschitz_estimates=estimates,
        aggregate_estimate=aggregate,
        noise_std=noise_std,
        fixed_point=x_star,
        trajectory=mean,
        bound=bound,
        stderr=stderr,
        satisfied=satisfied,
    )


def probe_trained_model(
    arch: MlpDenoiser,
    theta: ParamVector,
    sched: NoiseSchedule,
    samples: int = 256,
    seed: int = 0,
) -> ContractionProbe:
    """Lipschitz estimate of one reverse step at t = T for a trained denoiser.

    Diagnostic only: the estimate is reported whether or not it is below 1.
    """
    t_last = sched.timesteps
    predict = noise_predictor(arch, theta, sched)

    def step(x: np.ndarray) -> np.ndarray:
        return reverse_step(x, t_last, predict(x, t_last), sched, np.zeros_like(x))

    domain = np.random.default_rng(derive_seed(seed, "domain")).standard_normal(
        (samples, arch.data_dim)
    )
    estimate = estimate_lipschitz(step, domain, pairs=samples, seed=derive_seed(seed, "pairs"))
    return ContractionProbe(
        lipschitz_estimates=np.array([estimate]),
        aggregate_estimate=estimate,
        noise_std=0.0,
        fixed_point=None,
        trajectory=np.zeros(0),
        satisfied=estimate < 1.0,
    )
