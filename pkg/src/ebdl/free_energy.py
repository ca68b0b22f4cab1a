"""Free-energy difference estimators: FEP, thermodynamic integration over a
potential path, and the MBAR fixed point.

Conventions: energies are U with densities p ~ exp(-U)/Z, and a
free-energy difference here means the log-partition difference
delta_F(A -> B) = log Z_B - log Z_A.  For the d-dimensional Gaussian
potentials U = ||x||^2/(2 sigma^2) used throughout the tests this is
d log(sigma_B/sigma_A).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "FreeEnergyEstimate",
    "PotentialPath",
    "MbarProblem",
    "MbarResult",
    "fep",
    "ti_estimate",
    "mbar_solve",
    "mbar_objective",
]


@dataclass(frozen=True)
class FreeEnergyEstimate:
    method: str
    delta_f: float
    stderr: float
    n_samples: int
    grid_size: int = 0


def _log_mean_exp(a: np.ndarray) -> float:
    return float(logsumexp(a) - np.log(a.size))


def _jackknife_log_mean_exp(a: np.ndarray) -> float:
    """Standard error of log-mean-exp by leave-one-out."""
    n = a.size
    if n < 2:
        return float("inf")
    total = logsumexp(a)
    # log(sum - exp(a_i)) stays stable as long as no single term carries
    # the whole sum; a term with weight ~1 legitimately yields -inf spread
    with np.errstate(divide="ignore"):
        loo = total + np.log1p(-np.exp(a - total)) - np.log(n - 1)
    if not np.all(np.isfinite(loo)):
        return float("inf")
    return float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def fep(samples_a: np.ndarray, u_a: Callable, u_b: Callable) -> FreeEnergyEstimate:
    """Free-energy perturbation: log mean exp(U_A - U_B) over A-samples,
    with a jackknife standard error."""
    x = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    a = np.asarray(u_a(x), dtype=np.float64) - np.asarray(u_b(x), dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("energy difference is non-finite on the sample support")
    return FreeEnergyEstimate(
        method="fep",
        delta_f=_log_mean_exp(a),
        stderr=_jackknife_log_mean_exp(a),
        n_samples=x.shape[0],
    )


@dataclass(frozen=True)
class PotentialPath:
    """A differentiable family U(t, .) bridging boundary energies U_A, U_B.

    ``sample(t, n, rng)`` must draw from p_t ~ exp(-U(t, .)); ``du_dt``
    may supply the analytic time derivative, otherwise a central
    difference with step h is used (one-sided tilts at the ends keep the
    stencil inside [0, 1]).
    """

    u: Callable[[float, np.ndarray], np.ndarray]
    sample: Callable[[float, int, np.random.Generator], np.ndarray]
    u_a: Callable[[np.ndarray], np.ndarray]
    u_b: Callable[[np.ndarray], np.ndarray]
    du_dt: Optional[Callable[[float, np.ndarray], np.ndarray]] = None

    def time_derivative(self, t: float, x: np.ndarray, h: float) -> np.ndarray:
        if self.du_dt is not None:
            return np.asarray(self.du_dt(t, x), dtype=np.float64)
        hi = min(t + h, 1.0)
        lo = max(t - h, 0.0)
        return (np.asarray(self.u(hi, x)) - np.asarray(self.u(lo, x))) / (hi - lo)


def ti_estimate(
    path: PotentialPath,
    grid: np.ndarray,
    rng: np.random.Generator,
    n_per_t: int = 1000,
    n_end: int = 5000,
    h: float = 1e-3,
) -> FreeEnergyEstimate:
    """Thermodynamic integration with FEP end corrections:

    delta_F = fep(A -> U(0,.)) - trapz_t E_{p_t}[dU/dt] + fep(U(1,.) -> B).

    The integral uses the trapezoid rule on the given grid; per-node
    expectations are MC averages over fresh draws from p_t.  The standard
    error combines the independent node variances with the trapezoid
    weights and both end corrections.
    """
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    if grid.size < 2:
        raise ValueError("integration grid needs at least two points")
    end_a = fep(path.sample(0.0, n_end, rng), path.u_a, lambda x: path.u(0.0, x))
    end_b = fep(path.sample(1.0, n_end, rng), lambda x: path.u(1.0, x), path.u_b)
    means = np.empty(grid.size)
    variances = np.empty(grid.size)
    for i, t in enumerate(grid):
        x = path.sample(float(t), n_per_t, rng)
        du = path.time_derivative(float(t), x, h)
        means[i] = du.mean()
        variances[i] = du.var(ddof=1) / n_per_t
    # trapezoid weights
    w = np.zeros(grid.size)
    gaps = np.diff(grid)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    integral = float(np.sum(w * means))
    var_integral = float(np.sum(w**2 * variances))
    delta_f = end_a.delta_f - integral + end_b.delta_f
    stderr = float(np.sqrt(end_a.stderr**2 + var_integral + end_b.stderr**2))
    return FreeEnergyEstimate(
        method="ti",
        delta_f=delta_f,
        stderr=stderr,
        n_samples=2 * n_end + n_per_t * grid.size,
        grid_size=int(grid.size),
    )


@dataclass(frozen=True)
class MbarProblem:
    """Energies of every state on the pooled samples.

    ``energies[i, m]`` is U_i evaluated at pooled sample m; ``counts[i]``
    says how many of the pooled samples came from state i.
    """

    energies: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        c = np.asarray(self.counts, dtype=np.int64)
        if e.ndim != 2 or c.shape != (e.shape[0],):
            raise ValueError(f"energies {e.shape} and counts {c.shape} do not line up")
        if np.any(c < 1):
            raise ValueError("every state needs at least one sample")
        if int(c.sum()) != e.shape[1]:
            raise ValueError(f"counts sum to {c.sum()} but there are {e.shape[1]} samples")
        if not np.all(np.isfinite(e)):
            raise ValueError("energy matrix must be finite")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "counts", c)


@dataclass(frozen=True)
class MbarResult:
    free_energies: np.ndarray
    converged: bool
    residual: float
    iterations: int


def mbar_objective(problem: MbarProblem, f: np.ndarray) -> float:
    """The convex multi-state objective whose stationary point is MBAR:
    (1/M) sum_m log sum_k (N_k/M) exp(F_k - U_km) - sum_k (N_k/M) F_k."""
    m_total = problem.energies.shape[1]
    log_frac = np.log(problem.counts / m_total)
    inner = logsumexp(log_frac[:, None] + f[:, None] - problem.energies, axis=0)
    return float(inner.mean() - np.sum(problem.counts / m_total * f))


def mbar_solve(problem: MbarProblem, tol: float = 1e-10, max_iter: int = 10000) -> MbarResult:
    """Self-consistent iteration for the state free energies, F_1 fixed to 0.

    F_i <- -log sum_m exp(-U_im - log D_m), with the mixture denominator
    D_m = sum_k N_k exp(F_k - U_km).  Stops when max |delta F| < tol; a
    non-converged run still returns the last iterate with its residual.
    """
    n_states = problem.energies.shape[0]
    log_counts = np.log(problem.counts.astype(np.float64))
    f = np.zeros(n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        log_denom = logsumexp(log_counts[:, None] + f[:, None] - problem.energies, axis=0)
        f_new = -logsumexp(-problem.energies - log_denom[None, :], axis=1)
        f_new = f_new - f_new[0]
        residual = float(np.max(np.abs(f_new - f)))
        f = f_new
        if residual < tol:
            return MbarResult(f, True, residual, it)
    return MbarResult(f, False, residual, max_iter)
