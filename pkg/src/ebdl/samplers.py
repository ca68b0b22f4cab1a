"""Samplers: SDE integrators, MALA, and two sequential Monte Carlo drivers.

The classic SMC driver anneals through an explicit sequence of energies
with reweight / adaptive-resample / MALA-rejuvenate sweeps; with the
resample threshold at zero it degenerates to annealed importance
sampling.  The diffusion-path variant moves particles with the reverse
Euler kernel of the noising SDE and corrects with the forward/backward
kernel ratio, so intermediate targets are the noised marginals
themselves.

Targets are duck-typed: anything with ``log_density(x)`` and ``score(x)``
over (n, d) arrays works, and the initial level additionally needs
``sample(n, rng)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ParticleSystem",
    "StaticTarget",
    "KernelPair",
    "SmcResult",
    "ess",
    "multinomial_resample",
    "mala_chain",
    "AdaptiveStep",
    "dm_denoise",
    "si_integrate",
    "smc_classic",
    "smc_diffusion",
]


@dataclass
class ParticleSystem:
    """Positions with log-weights plus the resample history of the run."""

    positions: np.ndarray
    log_weights: np.ndarray
    rng: np.random.Generator
    resample_events: list = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.positions.ndim != 2 or self.log_weights.shape != (self.positions.shape[0],):
            raise ValueError(
                f"positions {self.positions.shape} and log-weights "
                f"{self.log_weights.shape} do not line up"
            )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def ess(self) -> float:
        return ess(self.log_weights)


@dataclass(frozen=True)
class StaticTarget:
    """A fixed target density for annealing paths."""

    log_density: Callable[[np.ndarray], np.ndarray]
    score: Callable[[np.ndarray], np.ndarray]
    sample: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None


def ess(log_weights: np.ndarray) -> float:
    """(sum w)^2 / (sum w^2), computed on shifted exponentials."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.any(np.isfinite(lw)):
        raise ValueError("all log-weights are -inf; the proposal has collapsed")
    w = np.exp(lw - np.max(lw))
    return float(np.sum(w) ** 2 / np.sum(w**2))


def _log_sum(lw: np.ndarray) -> float:
    hi = np.max(lw)
    return float(hi + np.log(np.sum(np.exp(lw - hi))))


def multinomial_resample(
    system: ParticleSystem, rng: Optional[np.random.Generator] = None
) -> ParticleSystem:
    """Draw N particle indices from the normalized weights; reset to uniform."""
    rng = rng if rng is not None else system.rng
    lw = system.log_weights - np.max(system.log_weights)
    w = np.exp(lw)
    w /= w.sum()
    idx = rng.choice(system.n, size=system.n, p=w)
    system.positions = system.positions[idx]
    system.log_weights = np.full(system.n, -np.log(system.n))
    return system


def mala_chain(
    log_density_fn: Callable,
    score_fn: Callable,
    x0: np.ndarray,
    step: float,
    n_steps: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Metropolis-adjusted Langevin, vectorized over rows of x0.

    Proposal N(x + step^2/2 * score(x), step^2 I) with the exact
    acceptance correction; returns the final state and the mean
    acceptance rate over all steps and particles.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    if x.ndim != 2:
        raise ValueError("mala_chain expects (n, d) initial positions")
    lp = np.asarray(log_density_fn(x), dtype=np.float64)
    sc = np.asarray(score_fn(x), dtype=np.float64)
    if np.any(np.isnan(lp)):
        raise ValueError("initial log-density is nan")
    half = 0.5 * step * step
    accepted = 0
    total = 0
    for _ in range(n_steps):
        noise = rng.standard_normal(x.shape)
        prop = x + half * sc + step * noise
        lp_prop = np.asarray(log_density_fn(prop), dtype=np.float64)
        sc_prop = np.asarray(score_fn(prop), dtype=np.float64)
        if np.any(np.isnan(lp_prop)) or np.any(np.isnan(sc_prop)):
            raise ValueError("proposal log-density is nan")
        fwd = -np.sum((prop - x - half * sc) ** 2, axis=1) / (2.0 * step * step)
        bwd = -np.sum((x - prop - half * sc_prop) ** 2, axis=1) / (2.0 * step * step)
        log_alpha = lp_prop - lp + bwd - fwd
        accept = np.log(rng.uniform(size=x.shape[0])) < log_alpha
        x[accept] = prop[accept]
        lp[accept] = lp_prop[accept]
        sc[accept] = sc_prop[accept]
        accepted += int(np.sum(accept))
        total += x.shape[0]
    rate = accepted / total if total else 1.0
    return x, rate


class AdaptiveStep:
    """Robbins-Monro adaptation of the log step size toward a target acceptance."""

    def __init__(self, step: float, target: float = 0.75, gain: float = 0.5):
        self.step = float(step)
        self.target = target
        self.gain = gain
        self._updates = 0

    def update(self, acceptance: float) -> float:
        self._updates += 1
        rate = self.gain / self._updates**0.6
        self.step *= float(np.exp(rate * (acceptance - self.target)))
        return self.step


# -- SDE integrators -----------------------------------------------------------


def dm_denoise(
    score_fn: Callable,
    sched,
    grid: np.ndarray,
    d: int,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Integrate the reverse diffusion dY = [f Y - g^2 score] dt + g dW
    down the grid, from Y ~ N(0, gamma(t_max)^2 I).

    ``score_fn(t, y)`` is the marginal score at scalar time t.  The grid
    is sorted descending internally and must stay inside (0, 1].
    """
    grid = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    if grid.size < 2:
        raise ValueError("integration grid needs at least two points")
    if grid[-1] <= 0.0 or grid[0] > 1.0:
        raise ValueError("grid must lie inside (0, 1]")
    y = sched.gamma(float(grid[0])) * rng.standard_normal((n, d))
    for k in range(grid.size - 1):
        t = float(grid[k])
        dt = t - float(grid[k + 1])
        v = sched.values(t)
        drift = float(v.f) * y - float(v.g) ** 2 * score_fn(t, y)
        y = y - dt * drift + float(v.g) * np.sqrt(dt) * rng.standard_normal((n, d))
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"denoising trajectory diverged at t={grid[k + 1]:g}")
    return y


def si_integrate(
    velocity_fn: Callable,
    score_fn: Callable,
    gdotg_fn: Callable,
    g: float,
    grid: np.ndarray,
    direction: str,
    x_init: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Euler integration of the interpolant SDE in either direction.

    The marginal-preserving drifts differ only in the sign in front of
    the score's diffusion correction:

    * ``forward``  (0 to 1): dY = [v - (gdot*gamma - g^2/2) score] dt + g dW
    * ``backward`` (1 to 0): dY = [v - (gdot*gamma + g^2/2) score] dt + g dW,
      integrated downward.

    ``gdotg_fn(t)`` is the product gamma'(t) gamma(t), finite at the
    endpoints even though gamma' alone is not; the grid must still stay
    inside (0, 1) because velocities degenerate at the ends.
    """
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    if grid.size < 2:
        raise ValueError("integration grid needs at least two points")
    if grid[0] <= 0.0 or grid[-1] >= 1.0:
        raise ValueError("grid must lie strictly inside (0, 1)")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    fwd = direction == "forward"
    order = grid if fwd else grid[::-1]
    sign = 1.0 if fwd else -1.0
    corr = -0.5 * g * g if fwd else 0.5 * g * g
    y = np.array(x_init, dtype=np.float64, copy=True)
    for k in range(order.size - 1):
        t = float(order[k])
        dt = abs(float(order[k + 1]) - t)
        drift = velocity_fn(t, y) - (gdotg_fn(t) + corr) * score_fn(t, y)
        y = y + sign * dt * drift + g * np.sqrt(dt) * rng.standard_normal(y.shape)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"interpolant trajectory diverged at t={order[k + 1]:g}")
    return y


# -- sequential Monte Carlo ------------------------------------------------------


@dataclass
class SmcResult:
    system: ParticleSystem
    log_z: float
    ess_trace: list
    acceptance_trace: list
    step_trace: list

    @property
    def n_resamples(self) -> int:
        return len(self.system.resample_events)


def _rejuvenate(
    target, system: ParticleSystem, n_steps: int, stepper: AdaptiveStep, adapt: bool
) -> float:
    """L MALA sweeps against one target; one adaptation update per sweep
    during the adaptive phase."""
    if n_steps == 0:
        return 1.0
    rates = []
    for _ in range(n_steps):
        system.positions, rate = mala_chain(
            target.log_density, target.score, system.positions, stepper.step, 1, system.rng
        )
        rates.append(rate)
        if adapt:
            stepper.update(rate)
    return float(np.mean(rates))


def smc_classic(
    targets: list,
    n_particles: int,
    rng: np.random.Generator,
    alpha: float = 0.30,
    mala_steps: int = 64,
    initial_step: float = 0.5,
    adapt_fraction: float = 0.5,
    level_callback: Optional[Callable] = None,
) -> SmcResult:
    """Anneal from targets[-1] down to targets[0] with reweight/resample/move.

    ``targets`` lists the path p_0 .. p_K; the last one must be
    sampleable.  At each level the weights pick up p_k/p_{k+1}, particles
    are resampled when ESS drops below alpha*N, and ``mala_steps`` MALA
    sweeps rejuvenate against p_k (step size adapted toward 75%
    acceptance during the first ``adapt_fraction`` of sweeps, then
    frozen; the tuned step carries over to the next level).  The
    normalizer estimate telescopes the logs of the weight sums across
    resample events.  With alpha=0 nothing is ever resampled and the
    final weights are the annealed-importance-sampling weights.
    """
    if len(targets) < 2:
        raise ValueError("need at least two annealing levels")
    if targets[-1].sample is None:
        raise ValueError("the initial level (last target) must be sampleable")
    system = ParticleSystem(
        positions=targets[-1].sample(n_particles, rng),
        log_weights=np.full(n_particles, -np.log(n_particles)),
        rng=rng,
    )
    stepper = AdaptiveStep(initial_step)
    adapt_steps = int(np.ceil(adapt_fraction * mala_steps))
    log_z_parts: list = []
    ess_trace: list = []
    acc_trace: list = []
    step_trace: list = []
    for k in range(len(targets) - 2, -1, -1):
        lp_new = np.asarray(targets[k].log_density(system.positions), dtype=np.float64)
        lp_old = np.asarray(targets[k + 1].log_density(system.positions), dtype=np.float64)
        system.log_weights = system.log_weights + lp_new - lp_old
        level_ess = system.ess()
        ess_trace.append(level_ess)
        if level_ess < alpha * n_particles:
            log_z_parts.append(_log_sum(system.log_weights))
            multinomial_resample(system)
            system.resample_events.append(k)
        acc = _rejuvenate(targets[k], system, adapt_steps, stepper, adapt=True)
        if mala_steps > adapt_steps:
            acc = _rejuvenate(targets[k], system, mala_steps - adapt_steps, stepper, adapt=False)
        acc_trace.append(acc)
        step_trace.append(stepper.step)
        if level_callback is not None:
            level_callback(k, system)
    log_z = float(sum(log_z_parts) + _log_sum(system.log_weights))
    return SmcResult(system, log_z, ess_trace, acc_trace, step_trace)


@dataclass(frozen=True)
class KernelPair:
    """Forward/backward Euler kernels N(y +- delta b, g^2 delta I) on a grid.

    ``drift(t, y)`` is the backward-SDE drift
    b = v - (gamma' gamma + g^2/2) score; the same b parameterizes both
    kernel directions.
    """

    drift: Callable[[float, np.ndarray], np.ndarray]
    g: float
    grid: np.ndarray

    def __post_init__(self):
        grid = np.sort(np.asarray(self.grid, dtype=np.float64))
        object.__setattr__(self, "grid", grid)
        if grid.size < 2:
            raise ValueError("kernel grid needs at least two points")
        if self.g <= 0.0 or np.any(np.diff(grid) <= 0.0):
            raise ValueError("kernel steps must have strictly positive variance")

    def log_kernel(self, value: np.ndarray, mean: np.ndarray, delta: float) -> np.ndarray:
        var = self.g * self.g * delta
        d = value.shape[1]
        quad = np.sum((value - mean) ** 2, axis=1) / var
        return -0.5 * (quad + d * np.log(2.0 * np.pi * var))


def smc_diffusion(
    targets: list,
    kernels: KernelPair,
    n_particles: int,
    rng: np.random.Generator,
    alpha: float = 0.30,
    mala_steps: int = 8,
    initial_step: float = 0.1,
    adapt_fraction: float = 0.5,
    level_callback: Optional[Callable] = None,
) -> SmcResult:
    """SMC along a noising path: reverse-kernel moves with exact weight
    corrections, adaptive resampling, and MALA rejuvenation.

    ``targets[k]`` approximates the marginal at kernels.grid[k] (energies
    may be unnormalized); the move from level k+1 to k proposes
    x ~ q_bwd(. | y) and multiplies the weight by
    p_k(x) q_fwd(y | x) / (p_{k+1}(y) q_bwd(x | y)).
    """
    grid = kernels.grid
    if len(targets) != grid.size:
        raise ValueError(f"{len(targets)} targets for {grid.size} grid points")
    if targets[-1].sample is None:
        raise ValueError("the initial level (last target) must be sampleable")
    system = ParticleSystem(
        positions=targets[-1].sample(n_particles, rng),
        log_weights=np.full(n_particles, -np.log(n_particles)),
        rng=rng,
    )
    stepper = AdaptiveStep(initial_step)
    adapt_steps = int(np.ceil(adapt_fraction * mala_steps))
    log_z_parts: list = []
    ess_trace: list = []
    acc_trace: list = []
    step_trace: list = []
    for k in range(grid.size - 2, -1, -1):
        t_hi, t_lo = float(grid[k + 1]), float(grid[k])
        delta = t_hi - t_lo
        y = system.positions
        bwd_mean = y - delta * kernels.drift(t_hi, y)
        x = bwd_mean + kernels.g * np.sqrt(delta) * rng.standard_normal(y.shape)
        fwd_mean = x + delta * kernels.drift(t_lo, x)
        increment = (
            np.asarray(targets[k].log_density(x), dtype=np.float64)
            + kernels.log_kernel(y, fwd_mean, delta)
            - np.asarray(targets[k + 1].log_density(y), dtype=np.float64)
            - kernels.log_kernel(x, bwd_mean, delta)
        )
        system.positions = x
        system.log_weights = system.log_weights + increment
        level_ess = system.ess()
        ess_trace.append(level_ess)
        if level_ess < alpha * n_particles:
            log_z_parts.append(_log_sum(system.log_weights))
            multinomial_resample(system)
            system.resample_events.append(k)
        acc = _rejuvenate(targets[k], system, adapt_steps, stepper, adapt=True)
        if mala_steps > adapt_steps:
            acc = _rejuvenate(targets[k], system, mala_steps - adapt_steps, stepper, adapt=False)
        acc_trace.append(acc)
        step_trace.append(stepper.step)
        if level_callback is not None:
            level_callback(k, system)
    log_z = float(sum(log_z_parts) + _log_sum(system.log_weights))
    return SmcResult(system, log_z, ess_trace, acc_trace, step_trace)
