"""Training objectives: denoising score matching, diffusive classification,
conditional time-score matching, Bregman-generalized binary variants, and
their joint sum.

Every loss has two evaluation paths.  When the model exposes parameter
leaves (the trained energy model), the loss is assembled as a graph once
per batch shape, compiled, and reused; the returned gradients come from
the same run.  Anything else with ``log_density`` / ``score`` /
``time_derivative`` (the exact mixture families, perturbed variants in
tests) is evaluated directly in numpy with empty gradients, which is how
oracle densities get injected into the objectives.

Batch layout conventions: times are (B,), points are (B, d); class
batches for the classification loss are (N, M, d) with class-major
flattening.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import log_expit, logsumexp as sp_logsumexp

from . import autodiff as ad
from .model import time_embedding
from .schedules import SI_LINEAR, VE, VP, NoisingSchedule

__all__ = [
    "NoisedBatch",
    "BregmanGenerator",
    "CANONICAL",
    "POLY",
    "RECIP",
    "JointConfig",
    "JointBatch",
    "dsm_loss",
    "diffclf_loss",
    "diffclf_value",
    "diffclf_class_terms",
    "binary_clf_loss",
    "ctsm_loss",
    "ctsm_target",
    "tsm_gap",
    "bregman_binary_loss",
    "joint_loss",
    "joint_loss_terms",
    "MIN_TIME_GAP",
]

# class times closer than this are considered degenerate (duplicates are
# resampled at draw time; the losses refuse them outright)
MIN_TIME_GAP = 1e-4


@dataclass(frozen=True)
class NoisedBatch:
    """Conditional anchors for DSM/CtSM: y = x_t + gamma(t) z.

    x_t is S(t) x0 for diffusion schedules and (1-t) x0 + t x1 for the
    interpolant (x1 required there).  With ``antithetic`` set, rows come
    in consecutive pairs sharing (t, x0, x1) with opposite z.
    """

    t: np.ndarray
    x0: np.ndarray
    z: np.ndarray
    x1: Optional[np.ndarray] = None
    antithetic: bool = False

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        x0 = np.asarray(self.x0, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.float64)
        if t.ndim != 1 or x0.shape != (t.shape[0], x0.shape[1]) or z.shape != x0.shape:
            raise ValueError(
                f"inconsistent batch shapes: t {t.shape}, x0 {x0.shape}, z {z.shape}"
            )
        if np.any(t <= 0.0) or np.any(t >= 1.0):
            raise ValueError("batch times must lie strictly inside (0, 1)")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "z", z)
        if self.x1 is not None:
            x1 = np.asarray(self.x1, dtype=np.float64)
            if x1.shape != x0.shape:
                raise ValueError(f"x1 shape {x1.shape} does not match x0 {x0.shape}")
            object.__setattr__(self, "x1", x1)
        if self.antithetic:
            if t.shape[0] % 2:
                raise ValueError("antithetic batches need an even number of rows")
            if not (
                np.array_equal(t[0::2], t[1::2])
                and np.array_equal(x0[0::2], x0[1::2])
                and np.array_equal(z[0::2], -z[1::2])
            ):
                raise ValueError("antithetic rows must pair (t, x0) with opposite z")

    @property
    def size(self) -> int:
        return self.t.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def anchors(self, sched: NoisingSchedule) -> tuple[np.ndarray, np.ndarray]:
        """(x_t, y) under the given schedule."""
        if sched.kind == SI_LINEAR:
            if self.x1 is None:
                raise ValueError("interpolant batches need x1")
            xt = (1.0 - self.t)[:, None] * self.x0 + self.t[:, None] * self.x1
        else:
            xt = sched.values(self.t).S[:, None] * self.x0
        y = xt + sched.gamma(self.t)[:, None] * self.z
        return xt, y


def _has_graph(model) -> bool:
    return hasattr(model, "param_leaves")


def _cache(model) -> dict:
    cache = getattr(model, "_loss_cache", None)
    if cache is None:
        cache = {}
        model._loss_cache = cache
    return cache


def _compiled(model, key, build: Callable):
    cache = _cache(model)
    if key not in cache:
        cache[key] = build()
    return cache[key]


def _with_grads(model, loss_node: ad.Node) -> ad.Program:
    wrt = [model.param_leaves[name] for name in model.param_names]
    return ad.Program([loss_node] + ad.grad(loss_node, wrt))


def _unpack(model, out) -> tuple[float, dict]:
    return float(out[0]), dict(zip(model.param_names, out[1:]))


# -- denoising score matching ---------------------------------------------------


def _build_dsm(model, batch_size: int) -> ad.Program:
    g = model.build_lp(batch_size)
    score = ad.grad(ad.reduce_sum(g["lp"]), [g["x"]])[0]
    gamma = ad.leaf("gamma_col", (batch_size, 1))
    z = ad.leaf("z", (batch_size, model.d))
    resid = ad.add(ad.mul(ad.broadcast_to(gamma, score.shape), score), z)
    loss = ad.reduce_mean(ad.reduce_sum(ad.square(resid), axis=1))
    return _with_grads(model, loss)


def dsm_loss(model, sched: NoisingSchedule, batch: NoisedBatch) -> tuple[float, dict]:
    """mean_b gamma^2 ||score(t_b, y_b) + z_b / gamma||^2, i.e. ||gamma s + z||^2."""
    gamma = sched.gamma(batch.t)
    if np.any(gamma == 0.0):
        raise ValueError("dsm batch contains gamma(t) = 0; clip times away from the endpoints")
    _, y = batch.anchors(sched)
    if not _has_graph(model):
        resid = gamma[:, None] * model.score(batch.t, y) + batch.z
        return float(np.mean(np.sum(resid**2, axis=1))), {}
    prog = _compiled(model, ("dsm", batch.size), lambda: _build_dsm(model, batch.size))
    env = model.bind_params(
        {
            "te": time_embedding(batch.t, model.m),
            "x": y,
            "gamma_col": gamma[:, None],
            "z": batch.z,
        }
    )
    return _unpack(model, prog.run(env))


# -- diffusive classification ----------------------------------------------------


def _check_class_times(times: np.ndarray):
    if times.ndim != 1 or times.shape[0] < 2:
        raise ValueError("need at least two class times")
    gaps = np.abs(times[:, None] - times[None, :])
    np.fill_diagonal(gaps, np.inf)
    if gaps.min() < MIN_TIME_GAP:
        raise ValueError(
            f"class times closer than {MIN_TIME_GAP} are degenerate; redraw them"
        )


def _build_diffclf(model, n_classes: int, per_class: int) -> ad.Program:
    rows = n_classes * per_class
    g = model.build_lp(n_classes * rows)
    cols = [ad.slice_axis(g["lp"], 0, i * rows, (i + 1) * rows) for i in range(n_classes)]
    lp_matrix = ad.concat(cols, axis=1)  # (rows, N): column i is time t_i
    log_post = ad.sub(lp_matrix, ad.broadcast_to(logsumexp_keep(lp_matrix), lp_matrix.shape))
    mask = np.zeros((rows, n_classes))
    mask[np.arange(rows), np.repeat(np.arange(n_classes), per_class)] = 1.0
    picked = ad.reduce_sum(ad.mul(log_post, ad.const(mask)), axis=1)
    loss = ad.neg(ad.reduce_mean(picked))
    return _with_grads(model, loss)


def logsumexp_keep(x: ad.Node) -> ad.Node:
    return ad.logsumexp(x, axis=1, keepdims=True)


def _lp_columns(model, times: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.stack([model.log_density(float(t), x) for t in times], axis=1)


def diffclf_class_terms(model, times, samples) -> np.ndarray:
    """Per-class cross-entropy terms -mean_m log softmax_i; their mean is
    the classification loss.  Pure numpy evaluation, no gradients."""
    times = np.asarray(times, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    _check_class_times(times)
    n, m = samples.shape[0], samples.shape[1]
    if n != times.shape[0]:
        raise ValueError(f"{times.shape[0]} times but {n} sample blocks")
    flat = samples.reshape(n * m, samples.shape[2])
    lp = _lp_columns(model, times, flat)
    log_post = lp - sp_logsumexp(lp, axis=1, keepdims=True)
    picked = log_post[np.arange(n * m), np.repeat(np.arange(n), m)]
    return -picked.reshape(n, m).mean(axis=1)


def diffclf_value(model, times, samples) -> float:
    """Classification loss by direct evaluation (the value half of
    :func:`diffclf_loss`, usable with oracle families injected)."""
    return float(diffclf_class_terms(model, times, samples).mean())


def diffclf_loss(model, times, samples) -> tuple[float, dict]:
    """N-way cross-entropy of "which time produced this sample".

    ``samples`` is (N, M, d): M draws from the marginal at each of the N
    times.  The predicted posterior over times is the softmax of the
    model's log-densities at the class times.
    """
    times = np.asarray(times, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    _check_class_times(times)
    n, m = samples.shape[0], samples.shape[1]
    if n != times.shape[0]:
        raise ValueError(f"{times.shape[0]} times but {n} sample blocks")
    flat = samples.reshape(n * m, samples.shape[2])
    if not _has_graph(model):
        return diffclf_value(model, times, samples), {}
    prog = _compiled(
        model, ("diffclf", n, m), lambda: _build_diffclf(model, n, m)
    )
    env = model.bind_params(
        {
            "te": time_embedding(np.repeat(times, n * m), model.m),
            "x": np.tile(flat, (n, 1)),
        }
    )
    return _unpack(model, prog.run(env))


# -- binary classification ---------------------------------------------------------


def _build_binary(model, m_t: int, m_tp: int) -> ad.Program:
    rows = m_t + m_tp
    g = model.build_lp(2 * rows)
    lp_t = ad.slice_axis(g["lp"], 0, 0, rows)
    lp_tp = ad.slice_axis(g["lp"], 0, rows, 2 * rows)
    delta = ad.sub(lp_t, lp_tp)
    d_t = ad.slice_axis(delta, 0, 0, m_t)
    d_tp = ad.slice_axis(delta, 0, m_t, rows)
    loss = ad.add(
        ad.scale(ad.reduce_mean(ad.logsigmoid(d_t)), -0.5),
        ad.scale(ad.reduce_mean(ad.logsigmoid(ad.neg(d_tp))), -0.5),
    )
    return _with_grads(model, loss)


def _binary_inputs(t: float, t_prime: float, samples) -> tuple[np.ndarray, np.ndarray]:
    y_t, y_tp = samples
    y_t = np.atleast_2d(np.asarray(y_t, dtype=np.float64))
    y_tp = np.atleast_2d(np.asarray(y_tp, dtype=np.float64))
    if abs(float(t) - float(t_prime)) < 1e-12:
        raise ValueError("binary classification needs two distinct times")
    return y_t, y_tp


def binary_clf_loss(model, t: float, t_prime: float, samples) -> tuple[float, dict]:
    """-1/2 E_{p_t} log h - 1/2 E_{p_t'} log(1-h), h = sigmoid(lp_t - lp_t').

    ``samples`` is a pair (draws from p_t, draws from p_t'); everything is
    kept in log-sigmoid space.
    """
    y_t, y_tp = _binary_inputs(t, t_prime, samples)
    if not _has_graph(model):
        stacked = np.concatenate([y_t, y_tp], axis=0)
        delta = model.log_density(float(t), stacked) - model.log_density(float(t_prime), stacked)
        m_t = y_t.shape[0]
        return (
            float(-0.5 * np.mean(log_expit(delta[:m_t])) - 0.5 * np.mean(log_expit(-delta[m_t:]))),
            {},
        )
    m_t, m_tp = y_t.shape[0], y_tp.shape[0]
    prog = _compiled(
        model, ("binary", m_t, m_tp), lambda: _build_binary(model, m_t, m_tp)
    )
    rows = m_t + m_tp
    stacked = np.concatenate([y_t, y_tp], axis=0)
    te = np.concatenate(
        [time_embedding(np.full(rows, float(t)), model.m),
         time_embedding(np.full(rows, float(t_prime)), model.m)],
        axis=0,
    )
    env = model.bind_params({"te": te, "x": np.tile(stacked, (2, 1))})
    return _unpack(model, prog.run(env))


# -- conditional time-score matching ------------------------------------------------


def ctsm_target(sched: NoisingSchedule, t: np.ndarray, x0: np.ndarray, z: np.ndarray) -> np.ndarray:
    """d/dt log p_t(y | x0) at y = S x0 + gamma z, in closed form.

    Differentiating the Gaussian kernel gives
    -d*gdot/gamma + xdot.(y - x_t)/gamma^2 + ||y - x_t||^2 gdot/gamma^3
    with xdot = S(t) f(t) x0.
    """
    if sched.kind not in (VP, VE):
        raise ValueError("conditional time-score targets are defined for diffusion schedules")
    t = np.asarray(t, dtype=np.float64)
    v = sched.values(t)
    d = x0.shape[1]
    diff = v.gamma[:, None] * z  # y - x_t
    xdot = (v.S * v.f)[:, None] * x0
    return (
        -d * v.gamma_dot / v.gamma
        + np.sum(xdot * diff, axis=1) / v.gamma**2
        + np.sum(diff**2, axis=1) * v.gamma_dot / v.gamma**3
    )


def _fd_steps(t: np.ndarray, h: float) -> np.ndarray:
    """Per-row central-difference steps keeping t +- h inside [0, 1]."""
    return np.minimum(h, np.minimum(t, 1.0 - t))


def _build_ctsm(model, batch_size: int) -> ad.Program:
    g_plus = model.build_lp(batch_size, tag="+")
    g_minus = model.build_lp(batch_size, tag="-")
    inv2h = ad.leaf("inv2h", (batch_size, 1))
    w = ad.leaf("w_col", (batch_size, 1))
    target = ad.leaf("ctsm_target", (batch_size, 1))
    u = ad.mul(ad.sub(g_plus["lp"], g_minus["lp"]), inv2h)
    loss = ad.reduce_mean(ad.mul(w, ad.square(ad.sub(u, target))))
    return _with_grads(model, loss)


def ctsm_loss(
    model, sched: NoisingSchedule, batch: NoisedBatch, h: float = 1e-3
) -> tuple[float, dict]:
    """mean_b w(t) (d/dt log q(t, y_b) - conditional target)^2, w = gamma^2/gdot^2.

    The model's time derivative is a central difference with per-row steps
    clipped so the stencil never leaves [0, 1].
    """
    v = sched.values(batch.t)
    if np.any(v.gamma_dot == 0.0):
        raise ValueError("gamma_dot vanishes at a sampled time; redraw the batch")
    _, y = batch.anchors(sched)
    target = ctsm_target(sched, batch.t, batch.x0, batch.z)
    w = v.gamma**2 / v.gamma_dot**2
    steps = _fd_steps(batch.t, h)
    if not _has_graph(model):
        hi = model.log_density(batch.t + steps, y)
        lo = model.log_density(batch.t - steps, y)
        u = (hi - lo) / (2.0 * steps)
        return float(np.mean(w * (u - target) ** 2)), {}
    prog = _compiled(model, ("ctsm", batch.size), lambda: _build_ctsm(model, batch.size))
    env = model.bind_params(
        {
            "te+": time_embedding(batch.t + steps, model.m),
            "te-": time_embedding(batch.t - steps, model.m),
            "x+": y,
            "x-": y,
            "inv2h": 1.0 / (2.0 * steps)[:, None],
            "w_col": w[:, None],
            "ctsm_target": target[:, None],
        }
    )
    return _unpack(model, prog.run(env))


# -- oracle time-score diagnostic ----------------------------------------------------


def tsm_gap(model, fam, t: float, samples) -> float:
    """MC estimate of E_{p_t} (d/dt log q - d/dt log p_t)^2; diagnostic only."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    u = model.time_derivative(float(t), x)
    w = fam.time_score(float(t), x)
    return float(np.mean((u - w) ** 2))


# -- Bregman-generalized binary losses --------------------------------------------------


@dataclass(frozen=True)
class BregmanGenerator:
    """Strictly convex generator phi with derivative, named for dispatch."""

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    phi_prime: Callable[[np.ndarray], np.ndarray]


CANONICAL = BregmanGenerator(
    "canonical",
    phi=lambda r: r * np.log(r) - (1.0 + r) * np.log1p(r),
    phi_prime=lambda r: np.log(r) - np.log1p(r),
)
POLY = BregmanGenerator("poly", phi=lambda r: 0.5 * r**2, phi_prime=lambda r: r)
RECIP = BregmanGenerator("recip", phi=lambda r: 1.0 / r, phi_prime=lambda r: -1.0 / r**2)


def _bregman_terms(name: str, s: np.ndarray, m_t: int) -> float:
    """E_{p_t'}[-phi(r) + phi'(r) r] - E_{p_t}[phi'(r)] with r = e^s, in log space."""
    s_t, s_tp = s[:m_t], s[m_t:]
    if name == "canonical":
        # -phi + phi' r = log(1+r) = softplus(s); phi' = logsigmoid(s)
        return float(np.mean(-log_expit(-s_tp)) - np.mean(log_expit(s_t)))
    if name == "poly":
        return float(np.mean(0.5 * np.exp(2.0 * s_tp)) - np.mean(np.exp(s_t)))
    if name == "recip":
        return float(np.mean(-2.0 * np.exp(-s_tp)) - np.mean(-np.exp(-2.0 * s_t)))
    raise ValueError(f"unknown Bregman generator {name!r}")


def _build_bregman(model, name: str, m_t: int, m_tp: int) -> ad.Program:
    rows = m_t + m_tp
    g = model.build_lp(2 * rows)
    delta = ad.sub(
        ad.slice_axis(g["lp"], 0, 0, rows), ad.slice_axis(g["lp"], 0, rows, 2 * rows)
    )
    s_t = ad.slice_axis(delta, 0, 0, m_t)
    s_tp = ad.slice_axis(delta, 0, m_t, rows)
    if name == "canonical":
        gen_term = ad.neg(ad.logsigmoid(ad.neg(s_tp)))
        data_term = ad.logsigmoid(s_t)
    elif name == "poly":
        gen_term = ad.scale(ad.exp(ad.scale(s_tp, 2.0)), 0.5)
        data_term = ad.exp(s_t)
    elif name == "recip":
        gen_term = ad.scale(ad.exp(ad.neg(s_tp)), -2.0)
        data_term = ad.neg(ad.exp(ad.scale(s_t, -2.0)))
    else:
        raise ValueError(f"unknown Bregman generator {name!r}")
    loss = ad.sub(ad.reduce_mean(gen_term), ad.reduce_mean(data_term))
    return _with_grads(model, loss)


def bregman_binary_loss(
    model, gen: BregmanGenerator, t: float, t_prime: float, samples
) -> tuple[float, dict]:
    """Density-ratio loss E_{p_t'}[-phi(r) + phi'(r) r] - E_{p_t}[phi'(r)]
    with r = q_t/q_t'; the canonical generator equals twice the binary
    classification loss."""
    y_t, y_tp = _binary_inputs(t, t_prime, samples)
    m_t, m_tp = y_t.shape[0], y_tp.shape[0]
    if not _has_graph(model):
        stacked = np.concatenate([y_t, y_tp], axis=0)
        s = model.log_density(float(t), stacked) - model.log_density(float(t_prime), stacked)
        return _bregman_terms(gen.name, s, m_t), {}
    prog = _compiled(
        model,
        ("bregman", gen.name, m_t, m_tp),
        lambda: _build_bregman(model, gen.name, m_t, m_tp),
    )
    rows = m_t + m_tp
    stacked = np.concatenate([y_t, y_tp], axis=0)
    te = np.concatenate(
        [time_embedding(np.full(rows, float(t)), model.m),
         time_embedding(np.full(rows, float(t_prime)), model.m)],
        axis=0,
    )
    env = model.bind_params({"te": te, "x": np.tile(stacked, (2, 1))})
    return _unpack(model, prog.run(env))


# -- joint objective ---------------------------------------------------------------------


@dataclass(frozen=True)
class JointConfig:
    """Which components enter the unit-weight sum."""

    use_dsm: bool = True
    use_clf: bool = True
    use_ctsm: bool = False


@dataclass(frozen=True)
class JointBatch:
    """Per-component inputs; unused parts stay None."""

    dsm: Optional[NoisedBatch] = None
    clf_times: Optional[np.ndarray] = None
    clf_samples: Optional[np.ndarray] = None
    ctsm: Optional[NoisedBatch] = None


def joint_loss_terms(
    model, sched: NoisingSchedule, config: JointConfig, batch: JointBatch
) -> tuple[dict, dict]:
    """Per-component values and the summed gradients."""
    if not (config.use_dsm or config.use_clf or config.use_ctsm):
        raise ValueError("joint loss needs at least one enabled component")
    values: dict = {}
    grads: dict = {}

    def absorb(g: dict):
        for name, arr in g.items():
            grads[name] = grads[name] + arr if name in grads else arr

    if config.use_dsm:
        if batch.dsm is None:
            raise ValueError("dsm enabled but no dsm batch supplied")
        values["dsm"], g = dsm_loss(model, sched, batch.dsm)
        absorb(g)
    if config.use_clf:
        if batch.clf_times is None or batch.clf_samples is None:
            raise ValueError("clf enabled but no class batch supplied")
        values["clf"], g = diffclf_loss(model, batch.clf_times, batch.clf_samples)
        absorb(g)
    if config.use_ctsm:
        if batch.ctsm is None:
            raise ValueError("ctsm enabled but no ctsm batch supplied")
        values["ctsm"], g = ctsm_loss(model, sched, batch.ctsm)
        absorb(g)
    values["total"] = float(sum(v for k, v in values.items() if k != "total"))
    return values, grads


def joint_loss(
    model, sched: NoisingSchedule, config: JointConfig, batch: JointBatch
) -> tuple[float, dict]:
    """Unit-weight sum of the enabled components."""
    values, grads = joint_loss_terms(model, sched, config, batch)
    return values["total"], grads
