"""Closed-form noising schedules.

A noising process observes ``Y_t = X_t + gamma(t) Z`` with ``Z ~ N(0, I)``.
For the diffusion schedules the clean signal is scaled, ``X_t = S(t) X_0``,
and ``gamma = S * sigma``; for the linear interpolant ``X_t`` bridges two
datasets and only ``gamma`` lives here.  Everything the losses and samplers
need -- ``S``, ``sigma``, ``gamma``, their time derivatives, and the SDE
coefficients ``f = S'/S`` and ``g`` -- is available in closed form.

Conventions:

* variance-preserving ("vp"): ``beta(t) = beta_min + t (beta_max - beta_min)``,
  ``b(t) = int_0^t beta = ((beta_max - beta_min)/2) t^2 + beta_min t``,
  ``S = exp(-b/2)``, ``sigma^2 = exp(b) - 1`` (so ``gamma^2 = 1 - exp(-b)``),
  ``f = -beta/2``, ``g = sqrt(beta)``.
* variance-exploding ("ve"): ``S == 1``,
  ``sigma^2 = sigma_min^2 (sigma_d^{2t} - 1)`` with
  ``sigma_d = sigma_max / sigma_min``, ``f == 0``,
  ``g = sigma_min sqrt(2 log sigma_d) sigma_d^t``.
* linear interpolant ("si-linear"): ``gamma = sqrt(a t (1 - t))`` with
  amplitude ``a``; ``gamma_dot`` is singular at the endpoints but the product
  ``gamma_dot * gamma = a (1 - 2t) / 2`` stays finite everywhere.

All functions accept scalars or numpy arrays of times and preserve shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "VP",
    "VE",
    "SI_LINEAR",
    "EndpointSingularityError",
    "ScheduleValues",
    "NoisingSchedule",
    "vp_eval",
    "ve_eval",
    "si_gamma",
    "si_gamma_dot_times_gamma",
]

VP = "vp"
VE = "ve"
SI_LINEAR = "si-linear"


class EndpointSingularityError(ValueError):
    """gamma_dot requested at a time where it diverges (interpolant endpoints)."""


class ScheduleValues(NamedTuple):
    """Schedule quantities at one or more times, in a fixed order."""

    S: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    gamma_dot: np.ndarray
    f: np.ndarray
    g: np.ndarray


def _as_time(t, low=0.0, high=1.0, name="t"):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < low) or np.any(arr > high):
        raise ValueError(f"{name} must lie in [{low}, {high}], got {t!r}")
    return arr


def vp_eval(t, beta_min: float = 0.1, beta_max: float = 20.0) -> ScheduleValues:
    """Variance-preserving schedule at time(s) ``t``.

    ``gamma_dot`` is infinite at t=0 (gamma ~ sqrt(t) there); every quantity
    is finite on the clipped grid [1e-4, 1 - 1e-4].
    """
    if not 0.0 < beta_min <= beta_max:
        raise ValueError(
            f"need 0 < beta_min <= beta_max, got beta_min={beta_min}, beta_max={beta_max}"
        )
    t = _as_time(t)
    beta = beta_min + t * (beta_max - beta_min)
    b = 0.5 * (beta_max - beta_min) * t**2 + beta_min * t
    S = np.exp(-0.5 * b)
    sigma = np.sqrt(np.expm1(b))
    gamma = np.sqrt(-np.expm1(-b))
    # gamma^2 = 1 - e^{-b}  =>  gamma_dot = beta e^{-b} / (2 gamma)
    with np.errstate(divide="ignore"):
        gamma_dot = np.where(gamma > 0.0, beta * np.exp(-b) / (2.0 * gamma), np.inf)
    f = -0.5 * beta
    g = np.sqrt(beta)
    return ScheduleValues(S, sigma, gamma, gamma_dot, f, g)


def ve_eval(t, sigma_min: float = 0.01, sigma_max: float = 50.0) -> ScheduleValues:
    """Variance-exploding schedule at time(s) ``t`` (S identically 1)."""
    if not 0.0 < sigma_min < sigma_max:
        raise ValueError(
            f"need 0 < sigma_min < sigma_max, got sigma_min={sigma_min}, sigma_max={sigma_max}"
        )
    t = _as_time(t)
    log_ratio = np.log(sigma_max / sigma_min)
    sigma = sigma_min * np.sqrt(np.expm1(2.0 * t * log_ratio))
    # 2 sigma sigma_dot = sigma_min^2 * 2 log_ratio * sigma_d^{2t}
    with np.errstate(divide="ignore"):
        sigma_dot = np.where(
            sigma > 0.0,
            sigma_min**2 * log_ratio * np.exp(2.0 * t * log_ratio) / sigma,
            np.inf,
        )
    S = np.ones_like(sigma)
    f = np.zeros_like(sigma)
    g = sigma_min * np.sqrt(2.0 * log_ratio) * np.exp(t * log_ratio)
    return ScheduleValues(S, sigma, sigma, sigma_dot, f, g)


def si_gamma(t, gamma_amp: float = 1.0, *, with_dot: bool = True):
    """Interpolant noise amplitude ``gamma = sqrt(a t (1-t))`` and its derivative.

    Returns ``(gamma, gamma_dot)``; with ``with_dot=True`` (the default) an
    endpoint time raises :class:`EndpointSingularityError` because
    ``gamma_dot = a (1 - 2t) / (2 gamma)`` diverges there.  With
    ``with_dot=False`` the second element is None and endpoints are fine.
    """
    if gamma_amp <= 0.0:
        raise ValueError(f"gamma_amp must be positive, got {gamma_amp}")
    t = _as_time(t)
    gamma = np.sqrt(gamma_amp * t * (1.0 - t))
    if not with_dot:
        return gamma, None
    if np.any(gamma == 0.0):
        raise EndpointSingularityError(
            "gamma_dot is singular at t in {0, 1}; use the clipped grid or with_dot=False"
        )
    gamma_dot = gamma_amp * (1.0 - 2.0 * t) / (2.0 * gamma)
    return gamma, gamma_dot


def si_gamma_dot_times_gamma(t, gamma_amp: float = 1.0) -> np.ndarray:
    """The product ``gamma_dot * gamma = a (1 - 2t) / 2``, finite at the endpoints.

    SDE drifts only ever need this product, so samplers can stay finite on the
    full closed interval.
    """
    if gamma_amp <= 0.0:
        raise ValueError(f"gamma_amp must be positive, got {gamma_amp}")
    t = _as_time(t)
    return gamma_amp * (1.0 - 2.0 * t) / 2.0


@dataclass(frozen=True)
class NoisingSchedule:
    """One of the three supported schedules plus its parameters.

    ``beta_*`` applies to "vp", ``sigma_*`` to "ve", ``gamma_amp`` to
    "si-linear"; unused fields are ignored.  The terminal time is 1 for every
    kind.
    """

    kind: str
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    gamma_amp: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in (VP, VE, SI_LINEAR):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def values(self, t) -> ScheduleValues:
        """Full (S, sigma, gamma, gamma_dot, f, g) tuple; diffusion kinds only."""
        if self.kind == VP:
            return vp_eval(t, self.beta_min, self.beta_max)
        if self.kind == VE:
            return ve_eval(t, self.sigma_min, self.sigma_max)
        raise ValueError("values() is defined for the vp/ve kinds; use gamma() for si-linear")

    def gamma(self, t) -> np.ndarray:
        if self.kind == SI_LINEAR:
            return si_gamma(t, self.gamma_amp, with_dot=False)[0]
        return self.values(t).gamma

    def gamma_dot(self, t) -> np.ndarray:
        if self.kind == SI_LINEAR:
            return si_gamma(t, self.gamma_amp)[1]
        return self.values(t).gamma_dot

    def gamma_dot_times_gamma(self, t) -> np.ndarray:
        if self.kind == SI_LINEAR:
            return si_gamma_dot_times_gamma(t, self.gamma_amp)
        v = self.values(t)
        return v.gamma_dot * v.gamma
