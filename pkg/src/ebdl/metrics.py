"""Evaluation metrics comparing a learned energy against exact references.

Score-space (Fisher divergence), density-space (classification loss,
importance-sampling ESS, offset-corrected R^2), and sample-space (MMD,
sliced distances, mode-weight TV) measurements, all at desk scale.
"""

from __future__ import annotations

import numpy as np

from .losses import diffclf_value
from .mixtures import GaussianMixture, gmm_sample

__all__ = [
    "fisher_divergence",
    "clf_metric",
    "is_ess",
    "mmd",
    "sliced_w2",
    "sliced_ks",
    "r2",
    "mode_tv",
]

N_PROJECTIONS = 128


def fisher_divergence(model_score_fn, oracle_score_fn, samples) -> float:
    """Mean squared difference of the two score fields over the samples."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    diff = np.asarray(model_score_fn(x)) - np.asarray(oracle_score_fn(x))
    return float(np.mean(np.sum(diff**2, axis=1)))


def clf_metric(model, fam, time_grid, per_class: int, rng: np.random.Generator) -> float:
    """Classification loss on oracle samples across the whole time grid."""
    times = np.asarray(time_grid, dtype=np.float64)
    blocks = [gmm_sample(fam.mixture_at(float(t)), per_class, rng) for t in times]
    return diffclf_value(model, times, np.stack(blocks))


def is_ess(model, fam, t: float, samples) -> float:
    """Importance-sampling effective sample size, in percent.

    Weights are exp(model log-density - exact log-density) on exact
    samples; the normalizer cancels, so unnormalized models are fine.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    lw = np.asarray(model.log_density(float(t), x)) - np.asarray(fam.log_density(float(t), x))
    w = np.exp(lw - np.max(lw))
    return float(100.0 * np.sum(w) ** 2 / (x.shape[0] * np.sum(w**2)))


def _median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([x, y], axis=0)
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2)
    off_diag = d2[np.triu_indices(z.shape[0], k=1)]
    med = float(np.sqrt(np.median(off_diag)))
    return med if med > 0.0 else 1.0


def _rbf(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return np.exp(-d2 / (2.0 * bandwidth**2))


def mmd(x, y, bandwidth: float | None = None) -> float:
    """Unbiased U-statistic estimate of squared MMD with an RBF kernel.

    The bandwidth defaults to the median pairwise distance of the pooled
    samples.  The unbiased estimate can be slightly negative.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("mmd needs at least two samples per side")
    h = bandwidth if bandwidth is not None else _median_bandwidth(x, y)
    kxx = _rbf(x, x, h)
    kyy = _rbf(y, y, h)
    kxy = _rbf(x, y, h)
    m, n = x.shape[0], y.shape[0]
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def _projections(d: int, n_proj: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.standard_normal((n_proj, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sliced_w2(x, y, n_proj: int = N_PROJECTIONS, rng: np.random.Generator | None = None) -> float:
    """Mean over random directions of the 1-D quantile-matching W2 distance."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    rng = rng if rng is not None else np.random.default_rng(0)
    proj = _projections(x.shape[1], n_proj, rng)
    xp = x @ proj.T
    yp = y @ proj.T
    if x.shape[0] == y.shape[0]:
        qx = np.sort(xp, axis=0)
        qy = np.sort(yp, axis=0)
    else:
        k = min(x.shape[0], y.shape[0])
        q = (np.arange(k) + 0.5) / k
        qx = np.quantile(xp, q, axis=0)
        qy = np.quantile(yp, q, axis=0)
    return float(np.mean(np.sqrt(np.mean((qx - qy) ** 2, axis=0))))


def _ks_1d(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(a)
    b = np.sort(b)
    pooled = np.concatenate([a, b])
    ca = np.searchsorted(a, pooled, side="right") / a.size
    cb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(ca - cb)))


def sliced_ks(x, y, n_proj: int = N_PROJECTIONS, rng: np.random.Generator | None = None) -> float:
    """Mean over random directions of the two-sample Kolmogorov-Smirnov sup."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    rng = rng if rng is not None else np.random.default_rng(0)
    proj = _projections(x.shape[1], n_proj, rng)
    xp = x @ proj.T
    yp = y @ proj.T
    return float(np.mean([_ks_1d(xp[:, j], yp[:, j]) for j in range(n_proj)]))


def r2(model_lp_fn, oracle_lp_fn, samples) -> float:
    """Coefficient of determination between log-densities on the samples,
    after removing the best constant offset from the model side (an
    unnormalized model is only defined up to a constant)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    pred = np.asarray(model_lp_fn(x), dtype=np.float64)
    truth = np.asarray(oracle_lp_fn(x), dtype=np.float64)
    pred = pred + np.mean(truth - pred)
    ss_res = float(np.sum((truth - pred) ** 2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -np.inf
    return 1.0 - ss_res / ss_tot


def mode_tv(samples, mixture: GaussianMixture) -> float:
    """Half the L1 gap between nearest-mean mode frequencies and the true
    mixture weights."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    d2 = np.sum((x[:, None, :] - mixture.means[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    freq = np.bincount(assign, minlength=mixture.n_components) / x.shape[0]
    return float(0.5 * np.sum(np.abs(freq - mixture.weights)))
