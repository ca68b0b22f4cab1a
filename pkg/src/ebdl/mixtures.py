"""Gaussian-mixture ground truth.

Diagonal-covariance Gaussian mixtures stay mixtures under both noising
processes, so densities, scores, samples, time scores, and interpolant
velocities are all exact here.  Every acceptance test measures the learned
model against this module.

Shapes: mixture parameters are ``weights (N,)``, ``means (N, d)``,
``diag_vars (N, d)``.  Point-wise operations accept a single point ``(d,)``
or a batch ``(B, d)`` and return a scalar / ``(B,)`` (or ``(d,)`` / ``(B, d)``
for vector-valued outputs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .schedules import SI_LINEAR, VP, VE, NoisingSchedule, si_gamma

__all__ = [
    "GaussianMixture",
    "gmm_log_density",
    "gmm_score",
    "gmm_sample",
    "dm_marginal",
    "si_marginal",
    "si_velocity",
    "oracle_time_score",
    "DmMarginalFamily",
    "SiMarginalFamily",
    "mog40",
    "mog2",
    "standardize_mixture",
    "mixture_to_text",
    "mixture_from_text",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Weights, means, and diagonal covariances of a finite Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    diag_vars: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.diag_vars, dtype=np.float64)
        if mu.ndim != 2:
            raise ValueError(f"means must be (N, d), got shape {mu.shape}")
        if w.shape != (mu.shape[0],) or v.shape != mu.shape:
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, vars {v.shape}"
            )
        if np.any(w <= 0.0):
            raise ValueError("all mixture weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 within 1e-12, got {w.sum()!r}")
        if np.any(v <= 0.0):
            raise ValueError("all variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "diag_vars", v)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        """Overall mixture mean, per coordinate."""
        return self.weights @ self.means

    def var(self) -> np.ndarray:
        """Overall mixture variance, per coordinate."""
        second = self.weights @ (self.diag_vars + self.means**2)
        return second - self.mean() ** 2


def _as_batch(m: GaussianMixture, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.dim:
        raise ValueError(f"points must have dimension {m.dim}, got shape {x.shape}")
    return x, squeeze


def _component_log_densities(m: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """log N(x_b; mu_n, diag v_n) for every batch row and component -> (B, N)."""
    diff = x[:, None, :] - m.means[None, :, :]
    quad = np.sum(diff**2 / m.diag_vars[None, :, :], axis=2)
    log_norm = np.sum(np.log(m.diag_vars), axis=1) + m.dim * _LOG_2PI
    return -0.5 * (quad + log_norm[None, :])


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    out = hi + np.log(np.sum(np.exp(a - hi), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def gmm_log_density(m: GaussianMixture, x):
    """log p(x) = log sum_n w_n N(x; mu_n, diag v_n), stably."""
    xb, squeeze = _as_batch(m, x)
    logs = _component_log_densities(m, xb) + np.log(m.weights)[None, :]
    out = _logsumexp(logs, axis=1)
    return float(out[0]) if squeeze else out


def gmm_score(m: GaussianMixture, x):
    """Gradient of the mixture log-density at x."""
    xb, squeeze = _as_batch(m, x)
    logs = _component_log_densities(m, xb) + np.log(m.weights)[None, :]
    logs -= np.max(logs, axis=1, keepdims=True)
    resp = np.exp(logs)
    resp /= np.sum(resp, axis=1, keepdims=True)
    comp_scores = -(xb[:, None, :] - m.means[None, :, :]) / m.diag_vars[None, :, :]
    out = np.sum(resp[:, :, None] * comp_scores, axis=1)
    return out[0] if squeeze else out


def gmm_sample(m: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points: categorical component pick, then a diagonal Gaussian draw."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    idx = rng.choice(m.n_components, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    return m.means[idx] + np.sqrt(m.diag_vars[idx]) * z


def dm_marginal(base: GaussianMixture, sched: NoisingSchedule, t: float) -> GaussianMixture:
    """Mixture observed at time t of the diffusion process S(t) X_0 + gamma(t) Z."""
    if sched.kind not in (VP, VE):
        raise ValueError(f"dm_marginal needs a vp/ve schedule, got kind {sched.kind!r}")
    v = sched.values(float(t))
    S = float(v.S)
    gamma2 = float(v.gamma) ** 2
    return GaussianMixture(base.weights, S * base.means, S**2 * base.diag_vars + gamma2)


def si_marginal(m0: GaussianMixture, m1: GaussianMixture, t: float, gamma: float) -> GaussianMixture:
    """Mixture observed at time t of (1-t) X_0 + t X_1 + gamma Z, independent coupling.

    Components are the N*M pairs, ordered with the m0 index major.
    """
    if m0.dim != m1.dim:
        raise ValueError(f"mixture dimensions differ: {m0.dim} vs {m1.dim}")
    t = float(t)
    w = (m0.weights[:, None] * m1.weights[None, :]).reshape(-1)
    mu = ((1.0 - t) * m0.means[:, None, :] + t * m1.means[None, :, :]).reshape(-1, m0.dim)
    var = (
        (1.0 - t) ** 2 * m0.diag_vars[:, None, :]
        + t**2 * m1.diag_vars[None, :, :]
        + float(gamma) ** 2
    ).reshape(-1, m0.dim)
    return GaussianMixture(w, mu, var)


def si_velocity(m0: GaussianMixture, m1: GaussianMixture, t: float, gamma: float, y):
    """E[X_1 - X_0 | Y_t = y] for the linear interpolant with independent coupling.

    Per component pair (n, m): with S = (1-t)^2 v_n + t^2 v_m + gamma^2 and
    mid = (1-t) mu_n + t mu_m, the conditional means are
    E[X_0 | y] = mu_n + (1-t) v_n (y - mid) / S and
    E[X_1 | y] = mu_m + t v_m (y - mid) / S; the velocity averages their
    difference under the pair posterior.
    """
    if m0.dim != m1.dim:
        raise ValueError(f"mixture dimensions differ: {m0.dim} vs {m1.dim}")
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"si_velocity needs t in (0, 1), got {t}")
    yb = np.asarray(y, dtype=np.float64)
    squeeze = yb.ndim == 1
    if squeeze:
        yb = yb[None, :]
    d = m0.dim
    n0, n1 = m0.n_components, m1.n_components
    pair_var = (
        (1.0 - t) ** 2 * m0.diag_vars[:, None, :]
        + t**2 * m1.diag_vars[None, :, :]
        + float(gamma) ** 2
    ).reshape(n0 * n1, d)
    pair_mu = ((1.0 - t) * m0.means[:, None, :] + t * m1.means[None, :, :]).reshape(n0 * n1, d)
    pair_w = (m0.weights[:, None] * m1.weights[None, :]).reshape(-1)

    diff = yb[:, None, :] - pair_mu[None, :, :]
    logs = -0.5 * (
        np.sum(diff**2 / pair_var[None, :, :], axis=2)
        + np.sum(np.log(pair_var), axis=1)[None, :]
        + d * _LOG_2PI
    ) + np.log(pair_w)[None, :]
    logs -= np.max(logs, axis=1, keepdims=True)
    post = np.exp(logs)
    post /= np.sum(post, axis=1, keepdims=True)

    scaled = diff / pair_var[None, :, :]
    v0 = np.repeat(m0.diag_vars, n1, axis=0)
    v1 = np.tile(m1.diag_vars, (n0, 1))
    mu0 = np.repeat(m0.means, n1, axis=0)
    mu1 = np.tile(m1.means, (n0, 1))
    cond0 = mu0[None, :, :] + (1.0 - t) * v0[None, :, :] * scaled
    cond1 = mu1[None, :, :] + t * v1[None, :, :] * scaled
    out = np.sum(post[:, :, None] * (cond1 - cond0), axis=1)
    return out[0] if squeeze else out


def oracle_time_score(fam, t: float, y, h: float = 1e-3):
    """d/dt log p_t(y) by Richardson-extrapolated central differences.

    ``fam`` is anything with ``mixture_at(t)``; the step shrinks near the
    domain endpoints so t +- h stays inside [0, 1].
    """
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"time score needs t in the open interval (0, 1), got {t}")
    h = min(float(h), 0.5 * t, 0.5 * (1.0 - t))

    def central(step: float):
        hi = gmm_log_density(fam.mixture_at(t + step), y)
        lo = gmm_log_density(fam.mixture_at(t - step), y)
        return (np.asarray(hi) - np.asarray(lo)) / (2.0 * step)

    d_h = central(h)
    d_half = central(0.5 * h)
    out = (4.0 * d_half - d_h) / 3.0
    return float(out) if out.ndim == 0 else out


class _MarginalFamilyBase:
    """Shared evaluation surface; concrete families define mixture_at(t)."""

    def mixture_at(self, t: float) -> GaussianMixture:  # pragma: no cover - abstract
        raise NotImplementedError

    def log_density(self, t, x):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return gmm_log_density(self.mixture_at(float(t)), x)
        xb = np.asarray(x, dtype=np.float64)
        out = np.empty(xb.shape[0])
        for value in np.unique(t):
            mask = t == value
            out[mask] = gmm_log_density(self.mixture_at(float(value)), xb[mask])
        return out

    def score(self, t, x):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return gmm_score(self.mixture_at(float(t)), x)
        xb = np.asarray(x, dtype=np.float64)
        out = np.empty_like(xb)
        for value in np.unique(t):
            mask = t == value
            out[mask] = gmm_score(self.mixture_at(float(value)), xb[mask])
        return out

    def time_score(self, t: float, x, h: float = 1e-3):
        return oracle_time_score(self, t, x, h=h)

    # alias so a family can stand in for a trained model in diagnostics
    def time_derivative(self, t: float, x, h: float = 1e-3):
        return oracle_time_score(self, t, x, h=h)

    def sample(self, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
        return gmm_sample(self.mixture_at(float(t)), n, rng)


@dataclass(frozen=True)
class DmMarginalFamily(_MarginalFamilyBase):
    """t -> marginal mixture of a diffusion process over a base mixture."""

    base: GaussianMixture
    sched: NoisingSchedule

    def __post_init__(self):
        if self.sched.kind not in (VP, VE):
            raise ValueError(f"diffusion family needs vp/ve, got {self.sched.kind!r}")

    def mixture_at(self, t: float) -> GaussianMixture:
        return dm_marginal(self.base, self.sched, t)


@dataclass(frozen=True)
class SiMarginalFamily(_MarginalFamilyBase):
    """t -> marginal mixture of the linear interpolant between two mixtures."""

    m0: GaussianMixture
    m1: GaussianMixture
    sched: NoisingSchedule

    def __post_init__(self):
        if self.sched.kind != SI_LINEAR:
            raise ValueError(f"interpolant family needs si-linear, got {self.sched.kind!r}")
        if self.m0.dim != self.m1.dim:
            raise ValueError("endpoint mixtures must share a dimension")

    def gamma_at(self, t: float) -> float:
        return float(si_gamma(t, self.sched.gamma_amp, with_dot=False)[0])

    def mixture_at(self, t: float) -> GaussianMixture:
        return si_marginal(self.m0, self.m1, t, self.gamma_at(t))

    def velocity(self, t: float, y):
        return si_velocity(self.m0, self.m1, t, self.gamma_at(t), y)


def mog40(d: int, seed: int) -> GaussianMixture:
    """40 equally weighted modes, means uniform on [-40, 40]^d, shared variance log(1+e)."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-40.0, 40.0, size=(40, d))
    var = float(np.log1p(np.e))
    return GaussianMixture(np.full(40, 1.0 / 40.0), means, np.full((40, d), var))


def mog2(d: int) -> GaussianMixture:
    """Two imbalanced modes at +-5*1_d: weight 2/3 on the positive mode, variance 5e-2."""
    means = np.stack([5.0 * np.ones(d), -5.0 * np.ones(d)])
    return GaussianMixture(np.array([2.0 / 3.0, 1.0 / 3.0]), means, np.full((2, d), 5e-2))


def standardize_mixture(m: GaussianMixture) -> tuple[GaussianMixture, np.ndarray, np.ndarray]:
    """Affinely rescale a mixture to zero overall mean and unit overall variance.

    Returns (standardized mixture, mean, std); the same affine map applied to
    data drawn from ``m`` yields draws from the standardized mixture.
    """
    mean = m.mean()
    std = np.sqrt(np.maximum(m.var(), 1e-16))
    out = GaussianMixture(m.weights, (m.means - mean) / std, m.diag_vars / std**2)
    return out, mean, std


def mixture_to_text(m: GaussianMixture) -> str:
    """Serialize as a text table: "d N" then one "w mu_1..mu_d v_1..v_d" row per component."""
    lines = [f"{m.dim} {m.n_components}"]
    for n in range(m.n_components):
        row = [m.weights[n], *m.means[n], *m.diag_vars[n]]
        lines.append(" ".join(format(value, ".17g") for value in row))
    return "\n".join(lines) + "\n"


def mixture_from_text(text: str) -> GaussianMixture:
    """Inverse of :func:`mixture_to_text`; strict about counts and row lengths."""
    lines = [line for line in text.strip().splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty mixture table")
    head = lines[0].split()
    if len(head) != 2:
        raise ValueError(f"header must be 'd N', got {lines[0]!r}")
    d, n = int(head[0]), int(head[1])
    if len(lines) != n + 1:
        raise ValueError(f"expected {n} component rows, found {len(lines) - 1}")
    weights = np.empty(n)
    means = np.empty((n, d))
    diag_vars = np.empty((n, d))
    for i, line in enumerate(lines[1:]):
        parts = [float(p) for p in line.split()]
        if len(parts) != 1 + 2 * d:
            raise ValueError(f"component row {i} must have {1 + 2 * d} numbers, got {len(parts)}")
        weights[i] = parts[0]
        means[i] = parts[1 : 1 + d]
        diag_vars[i] = parts[1 + d :]
    return GaussianMixture(weights, means, diag_vars)
