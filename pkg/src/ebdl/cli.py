"""Experiment command line.

Subcommands: train, eval, sample, blindness, compose, smc-bg,
free-energy, grad-check.  Every command takes ``--config PATH`` (flat
key=value file), ``--seed``, ``--out`` and ``--workers``; flag values
override config keys of the same name.  The fully resolved config is
written next to the outputs, all tables are RFC 4180 CSV, and reruns
with the same seed reproduce them byte for byte (single-threaded is the
only supported mode, so ``--workers`` must stay at 1).

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
aborts.
"""

from __future__ import annotations

import argparse
import csv
import sys
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp as _lse

from . import autodiff as ad
from . import losses, metrics
from .config import (
    ConfigError,
    Field,
    dump_config,
    parse_bool,
    parse_floats,
    read_config_file,
    resolve_config,
)
from .free_energy import MbarProblem, PotentialPath, fep, mbar_solve, ti_estimate
from .mixtures import (
    DmMarginalFamily,
    GaussianMixture,
    SiMarginalFamily,
    gmm_log_density,
    gmm_sample,
    gmm_score,
    mixture_from_text,
    mixture_to_text,
    mog2,
    mog40,
    standardize_mixture,
)
from .model import EnergyModel, load_checkpoint
from .samplers import (
    KernelPair,
    StaticTarget,
    dm_denoise,
    smc_classic,
    smc_diffusion,
)
from .schedules import SI_LINEAR, VE, VP, NoisingSchedule
from .training import NumericalAbort, TrainConfig, train

__all__ = ["main", "benchmark_pair", "benchmark_or_composite", "blindness_reference"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _g(value) -> str:
    return format(float(value), ".17g")


def _write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _write_particles(path: Path, positions: np.ndarray, log_weights: np.ndarray) -> None:
    d = positions.shape[1]
    rows = [["particle"] + [f"dim{i}" for i in range(d)] + ["log_weight"]]
    for i in range(positions.shape[0]):
        rows.append([str(i)] + [_g(v) for v in positions[i]] + [_g(log_weights[i])])
    _write_csv(path, rows)


# -- config plumbing ---------------------------------------------------------------

_SCHED_KEYS = {
    "schedule": Field(str, "vp", "vp, ve or si-linear"),
    "beta_min": Field(float, 0.1),
    "beta_max": Field(float, 20.0),
    "sigma_min": Field(float, 0.01),
    "sigma_max": Field(float, 50.0),
    "gamma_amp": Field(float, 1.0),
}

_COMMON_KEYS = {
    "seed": Field(int, 0),
    "out": Field(str, "", "output directory (or use --out)"),
}


def _schedule(values: dict) -> NoisingSchedule:
    kind = values["schedule"]
    if kind not in (VP, VE, SI_LINEAR):
        raise ConfigError(f"unknown schedule {kind!r} (expected vp, ve or si-linear)")
    try:
        return NoisingSchedule(
            kind=kind,
            beta_min=values["beta_min"],
            beta_max=values["beta_max"],
            sigma_min=values["sigma_min"],
            sigma_max=values["sigma_max"],
            gamma_amp=values["gamma_amp"],
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _mixture_from_spec(spec: str, dim: int) -> GaussianMixture:
    """Build a target from a spec string: ``mog2``, ``mog40[:seed]`` or
    ``file:<path>`` (the text format written by training runs)."""
    if spec == "mog2":
        return mog2(dim)
    if spec == "mog40" or spec.startswith("mog40:"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return mog40(dim, seed)
    if spec.startswith("file:"):
        path = Path(spec[5:])
        if not path.is_file():
            raise ConfigError(f"mixture file not found: {path}")
        try:
            m = mixture_from_text(path.read_text())
        except ValueError as err:
            raise ConfigError(f"bad mixture file {path}: {err}") from err
        if m.dim != dim:
            raise ConfigError(f"mixture file is {m.dim}-d, config says dim={dim}")
        return m
    raise ConfigError(f"unknown mixture spec {spec!r}")


def _out_dir(values: dict) -> Path:
    if not values["out"]:
        raise ConfigError("no output directory (config key out= or flag --out)")
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    dump_config(out / "resolved_config.txt", values)
    return out


def _load_model(path) -> EnergyModel:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from err


def _read_transform(run_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    path = run_dir / "transform.txt"
    if not path.is_file():
        raise ConfigError(f"no transform.txt beside the checkpoint in {run_dir}")
    mean = std = None
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "mean":
            mean = np.array([float(v) for v in parts[1:]])
        elif parts[0] == "std":
            std = np.array([float(v) for v in parts[1:]])
    if mean is None or std is None:
        raise ConfigError(f"malformed transform file: {path}")
    return mean, std


def _read_run_mixture(run_dir: Path, name: str = "mixture.txt") -> GaussianMixture:
    path = run_dir / name
    if not path.is_file():
        raise ConfigError(f"no {name} beside the checkpoint in {run_dir}")
    try:
        return mixture_from_text(path.read_text())
    except ValueError as err:
        raise ConfigError(f"bad mixture file {path}: {err}") from err


# -- train -------------------------------------------------------------------------

_TRAIN_SCHEMA = {
    **_COMMON_KEYS,
    **_SCHED_KEYS,
    "mixture": Field(str, help="mog2, mog40[:seed] or file:<path>"),
    "mixture_b": Field(str, "", "second endpoint for interpolant runs"),
    "dim": Field(int, 2),
    "standardize": Field(parse_bool, True),
    "use_dsm": Field(parse_bool, True),
    "use_clf": Field(parse_bool, True),
    "use_ctsm": Field(parse_bool, False),
    "n_classes": Field(int, 4),
    "batch_size": Field(int, 1024),
    "warmup_steps": Field(int, 0),
    "steps": Field(int, 1000),
    "lr": Field(float, 5e-4),
    "beta1": Field(float, 0.9),
    "beta2": Field(float, 0.999),
    "adam_eps": Field(float, 1e-8),
    "eval_every": Field(int, 10),
    "width": Field(int, 64),
    "depth": Field(int, 4),
    "embed_pairs": Field(int, 16),
    "antithetic": Field(str, "auto", "auto, true or false"),
}


def _train_data(values: dict, mixture: GaussianMixture):
    """Either the raw mixture (trainer standardizes it) or a source that
    keeps data coordinates as they are."""
    if values["standardize"]:
        return mixture
    from .training import MixtureSource

    return MixtureSource(mixture)


def cmd_train(values: dict) -> int:
    sched = _schedule(values)
    mixture = _mixture_from_spec(values["mixture"], values["dim"])
    mixture_b = None
    if sched.kind == SI_LINEAR:
        if not values["mixture_b"]:
            raise ConfigError("interpolant training needs mixture_b")
        mixture_b = _mixture_from_spec(values["mixture_b"], values["dim"])
    out = _out_dir(values)
    anti = None if values["antithetic"] == "auto" else parse_bool(values["antithetic"])
    try:
        cfg = TrainConfig(
            sched=sched,
            out_dir=out,
            use_dsm=values["use_dsm"],
            use_clf=values["use_clf"],
            use_ctsm=values["use_ctsm"],
            n_classes=values["n_classes"],
            batch_size=values["batch_size"],
            warmup_steps=values["warmup_steps"],
            steps=values["steps"],
            lr=values["lr"],
            beta1=values["beta1"],
            beta2=values["beta2"],
            adam_eps=values["adam_eps"],
            seed=values["seed"],
            eval_every=values["eval_every"],
            width=values["width"],
            depth=values["depth"],
            embed_pairs=values["embed_pairs"],
            antithetic=anti,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err

    def stored(m: GaussianMixture) -> str:
        return mixture_to_text(standardize_mixture(m)[0] if values["standardize"] else m)

    (out / "mixture.txt").write_text(stored(mixture))
    data_b = None
    if mixture_b is not None:
        (out / "mixture_b.txt").write_text(stored(mixture_b))
        data_b = _train_data(values, mixture_b)
    result = train(cfg, _train_data(values, mixture), data_b)
    last = result.history[-1]["loss_total"] if result.history else float("nan")
    print(f"trained {cfg.total_steps} steps, final loss {last:.6g}, outputs in {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

_EVAL_SCHEMA = {
    **_COMMON_KEYS,
    **_SCHED_KEYS,
    "checkpoint": Field(str, "", "model checkpoint (reads mixture/transform beside it)"),
    "oracle_model": Field(parse_bool, False, "score the exact marginals instead of a model"),
    "mixture": Field(str, "", "target spec when no checkpoint is given"),
    "dim": Field(int, 2),
    "time_grid": Field(parse_floats, ()),
    "grid_k": Field(int, 8),
    "t_min": Field(float, 0.01),
    "t_max": Field(float, 0.99),
    "per_time": Field(int, 4096),
    "clf_per_class": Field(int, 512),
    "sample_n": Field(int, 4096),
    "sample_grid_k": Field(int, 200),
    "sample_t_min": Field(float, 1e-3),
    "mmd_cap": Field(int, 2048),
}


def _eval_grid(values: dict) -> np.ndarray:
    grid = np.asarray(values["time_grid"], dtype=np.float64)
    if grid.size == 0:
        grid = np.linspace(values["t_min"], values["t_max"], values["grid_k"])
    grid = np.sort(grid)
    if grid.size < 2:
        raise ConfigError("eval grid needs at least two times")
    if grid[0] <= 0.0 or grid[-1] >= 1.0:
        raise ConfigError("eval times must lie strictly inside (0, 1)")
    if np.min(np.diff(grid)) < losses.MIN_TIME_GAP:
        raise ConfigError(f"eval times closer than {losses.MIN_TIME_GAP:g}")
    return grid


def cmd_eval(values: dict) -> int:
    sched = _schedule(values)
    if sched.kind == SI_LINEAR:
        raise ConfigError("eval covers diffusion schedules (vp, ve)")
    if values["checkpoint"]:
        ckpt = Path(values["checkpoint"])
        model = _load_model(ckpt)
        mixture = _read_run_mixture(ckpt.parent)
    elif values["oracle_model"] and values["mixture"]:
        mixture = standardize_mixture(_mixture_from_spec(values["mixture"], values["dim"]))[0]
        model = None
    else:
        raise ConfigError("eval needs checkpoint=..., or oracle_model=true with mixture=...")
    fam = DmMarginalFamily(mixture, sched)
    if model is None:
        model = fam
    out = _out_dir(values)
    grid = _eval_grid(values)
    rng = np.random.default_rng(values["seed"])

    class_samples = np.stack(
        [fam.sample(float(t), values["clf_per_class"], rng) for t in grid]
    )
    clf_terms = losses.diffclf_class_terms(model, grid, class_samples)

    rows = [["t", "clf_loss", "fisher_div", "ess_pct", "r2"]]
    for i, t in enumerate(grid):
        t = float(t)
        draws = fam.sample(t, values["per_time"], rng)
        fisher = metrics.fisher_divergence(
            partial(model.score, t), partial(fam.score, t), draws
        )
        ess_pct = metrics.is_ess(model, fam, t, draws)
        r2 = metrics.r2(partial(model.log_density, t), partial(fam.log_density, t), draws)
        rows.append([_g(t), _g(clf_terms[i]), _g(fisher), _g(ess_pct), _g(r2)])

    sample_grid = np.linspace(values["sample_t_min"], 1.0, values["sample_grid_k"])
    generated = dm_denoise(
        model.score, sched, sample_grid, mixture.dim, values["sample_n"], rng
    )
    reference = gmm_sample(mixture, values["sample_n"], rng)
    cap = values["mmd_cap"]
    rows.append(["mmd", "sliced_w2", "sliced_ks", "mode_tv"])
    rows.append(
        [
            _g(metrics.mmd(generated[:cap], reference[:cap])),
            _g(metrics.sliced_w2(generated, reference, rng=rng)),
            _g(metrics.sliced_ks(generated, reference, rng=rng)),
            _g(metrics.mode_tv(generated, mixture)),
        ]
    )
    _write_csv(out / "eval.csv", rows)
    print(f"wrote {out / 'eval.csv'}")
    return EXIT_OK


# -- sample ------------------------------------------------------------------------

_SAMPLE_SCHEMA = {
    **_COMMON_KEYS,
    **_SCHED_KEYS,
    "checkpoint": Field(str, help="model checkpoint to sample from"),
    "n": Field(int, 4096),
    "grid_k": Field(int, 200),
    "t_min": Field(float, 1e-3),
}


def cmd_sample(values: dict) -> int:
    sched = _schedule(values)
    if sched.kind == SI_LINEAR:
        raise ConfigError("sample covers diffusion schedules (vp, ve)")
    ckpt = Path(values["checkpoint"])
    model = _load_model(ckpt)
    mean, std = _read_transform(ckpt.parent)
    out = _out_dir(values)
    rng = np.random.default_rng(values["seed"])
    grid = np.linspace(values["t_min"], 1.0, values["grid_k"])
    draws = dm_denoise(model.score, sched, grid, model.d, values["n"], rng)
    draws = mean + std * draws  # back to data coordinates
    log_weights = np.full(values["n"], -np.log(values["n"]))
    _write_particles(out / "particles.csv", draws, log_weights)
    print(f"wrote {out / 'particles.csv'}")
    return EXIT_OK


# -- blindness ---------------------------------------------------------------------

_BLINDNESS_SCHEMA = {
    **_COMMON_KEYS,
    **_SCHED_KEYS,
    "mode_center": Field(float, 10.0),
    "mode_std": Field(float, 0.1),
    "ref_weight": Field(float, 2.0 / 3.0, "left-mode weight of the reference"),
    "sweep_min": Field(float, 0.2),
    "sweep_max": Field(float, 0.8),
    "sweep_points": Field(int, 13),
    "t_fd": Field(float, 0.1, "time at which scores are compared"),
    "clf_times": Field(parse_floats, (0.1, 0.5, 0.7)),
    "n_mc": Field(int, 20000),
    "quad_halfwidth": Field(float, 18.0),
    "quad_points": Field(int, 16001),
}


def blindness_reference(weight: float, center: float, std: float) -> GaussianMixture:
    """Two far-apart 1-d modes at -center/+center; ``weight`` sits on the left."""
    var = std * std
    return GaussianMixture(
        weights=[weight, 1.0 - weight],
        means=[[-center], [center]],
        diag_vars=[[var], [var]],
    )


def _clf_quadrature_loss(
    fam_q: DmMarginalFamily,
    fam_ref: DmMarginalFamily,
    times: np.ndarray,
    y: np.ndarray,
    w_quad: np.ndarray,
) -> float:
    """Population N-way classification loss of fam_q's densities under
    fam_ref's data, by trapezoid quadrature."""
    lq = np.stack([fam_q.log_density(float(t), y) for t in times])
    log_post = lq - _lse(lq, axis=0)
    loss = 0.0
    for i, t in enumerate(times):
        p_ref = np.exp(fam_ref.log_density(float(t), y))
        loss -= float(np.sum(w_quad * p_ref * log_post[i]))
    return loss / len(times)


def cmd_blindness(values: dict) -> int:
    sched = _schedule(values)
    if sched.kind == SI_LINEAR:
        raise ConfigError("the blindness sweep uses a diffusion schedule")
    out = _out_dir(values)
    rng = np.random.default_rng(values["seed"])
    center, std = values["mode_center"], values["mode_std"]
    t_fd = values["t_fd"]
    times = np.asarray(values["clf_times"], dtype=np.float64)
    if times.size < 2:
        raise ConfigError("need at least two classification times")

    fam_ref = DmMarginalFamily(blindness_reference(values["ref_weight"], center, std), sched)
    draws = fam_ref.sample(t_fd, values["n_mc"], rng)
    score_ref = fam_ref.score(t_fd, draws)
    from .mixtures import oracle_time_score

    ts_ref = oracle_time_score(fam_ref, t_fd, draws)

    q = values["quad_points"]
    y = np.linspace(-values["quad_halfwidth"], values["quad_halfwidth"], q)[:, None]
    w_quad = np.full(q, y[1, 0] - y[0, 0])
    w_quad[0] *= 0.5
    w_quad[-1] *= 0.5
    loss_ref = _clf_quadrature_loss(fam_ref, fam_ref, times, y, w_quad)

    rows = [["weight", "fisher_div", "time_score_gap", "clf_gap"]]
    for w in np.linspace(values["sweep_min"], values["sweep_max"], values["sweep_points"]):
        fam_w = DmMarginalFamily(blindness_reference(float(w), center, std), sched)
        fisher = float(np.mean(np.sum((fam_w.score(t_fd, draws) - score_ref) ** 2, axis=1)))
        ts_gap = float(np.mean((oracle_time_score(fam_w, t_fd, draws) - ts_ref) ** 2))
        clf_gap = _clf_quadrature_loss(fam_w, fam_ref, times, y, w_quad) - loss_ref
        rows.append([_g(w), _g(fisher), _g(ts_gap), _g(clf_gap)])
    _write_csv(out / "blindness.csv", rows)
    print(f"wrote {out / 'blindness.csv'}")
    return EXIT_OK


# -- compose -----------------------------------------------------------------------

_COMPOSE_SCHEMA = {
    **_COMMON_KEYS,
    **_SCHED_KEYS,
    "mode": Field(str, "oracle", "oracle or trained"),
    "op": Field(str, "or", "or / and"),
    "checkpoint_a": Field(str, ""),
    "checkpoint_b": Field(str, ""),
    "benchmark": Field(parse_bool, True, "report mode_tv against the four-mode composite"),
    "levels": Field(int, 64),
    "n_particles": Field(int, 4096),
    "alpha": Field(float, 0.30),
    "mala_steps": Field(int, 64),
    "initial_step": Field(float, 0.5),
    "t_min": Field(float, 0.01),
    "t_max": Field(float, 0.98),
}


def benchmark_pair() -> tuple[GaussianMixture, GaussianMixture]:
    """The two-mode 2-d targets whose OR composite has mode weights
    (0.15, 0.35, 0.35, 0.15)."""
    var = [[1e-2, 1e-2]] * 2
    a = GaussianMixture([0.3, 0.7], [[-0.5, 0.5], [0.5, 0.5]], var)
    b = GaussianMixture([0.7, 0.3], [[-0.5, -0.5], [0.5, -0.5]], var)
    return a, b


def benchmark_or_composite() -> GaussianMixture:
    return GaussianMixture(
        [0.15, 0.35, 0.35, 0.15],
        [[-0.5, 0.5], [0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]],
        [[1e-2, 1e-2]] * 4,
    )


class _AffineModelDensity:
    """A trained model read in data coordinates: z = (x - mean) / std."""

    def __init__(self, model: EnergyModel, mean: np.ndarray, std: np.ndarray):
        self.model = model
        self.mean = mean
        self.std = std
        self._log_jac = -float(np.sum(np.log(std)))

    def log_density(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.model.log_density(t, (x - self.mean) / self.std) + self._log_jac

    def score(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.model.score(t, (x - self.mean) / self.std) / self.std


class _OracleSide:
    """Exact noised marginals of one target, same interface as above."""

    def __init__(self, fam: DmMarginalFamily):
        self.fam = fam

    def log_density(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fam.log_density(t, x)

    def score(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fam.score(t, x)


class _ComposedTarget:
    """OR (equal-weight sum of densities) or AND (product) of two sides
    at one fixed time."""

    def __init__(self, sides: list, op: str, t: float):
        self.sides = sides
        self.op = op
        self.t = t

    def log_density(self, x: np.ndarray) -> np.ndarray:
        lps = np.stack([s.log_density(self.t, x) for s in self.sides])
        if self.op == "and":
            return np.sum(lps, axis=0)
        return _lse(lps, axis=0) - np.log(len(self.sides))

    def score(self, x: np.ndarray) -> np.ndarray:
        lps = np.stack([s.log_density(self.t, x) for s in self.sides])
        scores = np.stack([s.score(self.t, x) for s in self.sides])
        if self.op == "and":
            return np.sum(scores, axis=0)
        post = np.exp(lps - _lse(lps, axis=0))  # (sides, n)
        return np.sum(post[:, :, None] * scores, axis=0)

    sample = None


def _gaussian_and(means: list, variances: list) -> GaussianMixture:
    """Product of moment-matched Gaussians, by adding precisions."""
    prec = sum(1.0 / v for v in variances)
    var = 1.0 / prec
    mean = var * sum(m / v for m, v in zip(means, variances))
    return GaussianMixture([1.0], [mean], [var])


def _compose_prior(op: str, means: list, variances: list) -> GaussianMixture:
    if op == "and":
        return _gaussian_and(means, variances)
    k = len(means)
    return GaussianMixture([1.0 / k] * k, means, variances)


def cmd_compose(values: dict) -> int:
    sched = _schedule(values)
    if sched.kind == SI_LINEAR:
        raise ConfigError("compose anneals along a diffusion schedule")
    op = values["op"]
    if op not in ("or", "and"):
        raise ConfigError(f"op must be or / and, got {op!r}")
    mode = values["mode"]
    t_max = values["t_max"]
    if mode == "oracle":
        mix_a, mix_b = benchmark_pair()
        fams = [DmMarginalFamily(mix_a, sched), DmMarginalFamily(mix_b, sched)]
        sides = [_OracleSide(f) for f in fams]
        if op == "or":
            noised = [f.mixture_at(t_max) for f in fams]
            prior_mix = GaussianMixture(
                np.concatenate([0.5 * m.weights for m in noised]),
                np.concatenate([m.means for m in noised]),
                np.concatenate([m.diag_vars for m in noised]),
            )
        else:
            noised = [f.mixture_at(t_max) for f in fams]
            prior_mix = _gaussian_and([m.mean() for m in noised], [m.var() for m in noised])
    elif mode == "trained":
        if not (values["checkpoint_a"] and values["checkpoint_b"]):
            raise ConfigError("trained compose needs checkpoint_a and checkpoint_b")
        sides = []
        stats = []
        for key in ("checkpoint_a", "checkpoint_b"):
            ckpt = Path(values[key])
            model = _load_model(ckpt)
            mean, std = _read_transform(ckpt.parent)
            sides.append(_AffineModelDensity(model, mean, std))
            stats.append((mean, std * std))
        # at t near 1 each model's marginal is close to a standard normal
        # in its own standardized coordinates
        prior_mix = _compose_prior(op, [m for m, _ in stats], [v for _, v in stats])
    else:
        raise ConfigError(f"mode must be oracle or trained, got {mode!r}")

    out = _out_dir(values)
    rng = np.random.default_rng(values["seed"])
    grid = np.linspace(values["t_min"], t_max, values["levels"])
    targets = [_ComposedTarget(sides, op, float(t)) for t in grid]
    targets.append(
        StaticTarget(
            log_density=partial(gmm_log_density, prior_mix),
            score=partial(gmm_score, prior_mix),
            sample=partial(gmm_sample, prior_mix),
        )
    )
    result = smc_classic(
        targets,
        values["n_particles"],
        rng,
        alpha=values["alpha"],
        mala_steps=values["mala_steps"],
        initial_step=values["initial_step"],
    )
    _write_particles(out / "particles.csv", result.system.positions, result.system.log_weights)
    equalized = _systematic_resample(
        result.system.positions, result.system.log_weights, rng
    )
    tv = ""
    if values["benchmark"] and op == "or":
        tv = _g(metrics.mode_tv(equalized, benchmark_or_composite()))
    rows = [
        ["op", "levels", "n_particles", "log_z", "n_resamples", "final_ess", "mode_tv"],
        [
            op,
            str(values["levels"]),
            str(values["n_particles"]),
            _g(result.log_z),
            str(result.n_resamples),
            _g(result.system.ess()),
            tv,
        ],
    ]
    _write_csv(out / "summary.csv", rows)
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_OK


# -- smc-bg ------------------------------------------------------------------------

_SMC_BG_SCHEMA = {
    **_COMMON_KEYS,
    "dim": Field(int, 2),
    "shift": Field(float, 2.0, "data-end mean, shift * ones"),
    "var0": Field(float, 0.25, "data-end variance per coordinate"),
    "bimodal": Field(parse_bool, False, "split the data end into modes at +-shift"),
    "gamma_amp": Field(float, 1.0),
    "checkpoint": Field(str, "", "learned interior energies instead of oracle ones"),
    "levels": Field(int, 48),
    "n_particles": Field(int, 2048),
    "alpha": Field(float, 0.30),
    "mala_steps": Field(int, 8),
    "initial_step": Field(float, 0.1),
    "g": Field(float, 0.05, "kernel diffusion scale"),
    "t_min": Field(float, 0.02),
    "t_max": Field(float, 0.98),
    "corrupt_energy": Field(float, 0.0, "temper interior energies by 1 + this"),
    "null_pairs": Field(int, 4, "independent draw pairs averaged into the noise floor"),
}


def _si_bg_family(values: dict) -> SiMarginalFamily:
    d = values["dim"]
    c, v = values["shift"], values["var0"]
    if v <= 0.0:
        raise ConfigError("var0 must be positive")
    ones = np.ones(d)
    if values["bimodal"]:
        m0 = GaussianMixture([0.5, 0.5], [c * ones, -c * ones], [v * ones, v * ones])
    else:
        m0 = GaussianMixture([1.0], [c * ones], [v * ones])
    m1 = GaussianMixture([1.0], [np.zeros(d)], [np.ones(d)])
    sched = NoisingSchedule(kind=SI_LINEAR, gamma_amp=values["gamma_amp"])
    return SiMarginalFamily(m0, m1, sched)


class _TemperedDensity:
    """An exact marginal with its log-density scaled: a deliberately wrong
    intermediate energy for control runs."""

    def __init__(self, mix: GaussianMixture, scale: float):
        self.mix = mix
        self.scale = scale

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return self.scale * gmm_log_density(self.mix, x)

    def score(self, x: np.ndarray) -> np.ndarray:
        return self.scale * gmm_score(self.mix, x)

    sample = None


def _systematic_resample(
    positions: np.ndarray, log_weights: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Low-variance resampling for the summary metrics: near-uniform
    weights come back almost duplicate-free, unlike a multinomial draw."""
    n = positions.shape[0]
    w = np.exp(log_weights - np.max(log_weights))
    cdf = np.cumsum(w / w.sum())
    marks = (rng.uniform() + np.arange(n)) / n
    return positions[np.searchsorted(cdf, marks)]


def cmd_smc_bg(values: dict) -> int:
    fam = _si_bg_family(values)
    sched = fam.sched
    learned = None
    if values["checkpoint"]:
        ckpt = Path(values["checkpoint"])
        model = _load_model(ckpt)
        mean, std = _read_transform(ckpt.parent)
        learned = _AffineModelDensity(model, mean, std)
    out = _out_dir(values)
    rng = np.random.default_rng(values["seed"])
    grid = np.linspace(values["t_min"], values["t_max"], values["levels"])
    n = values["n_particles"]
    g = values["g"]
    if g <= 0.0:
        raise ConfigError("kernel scale g must be positive")
    corrupt = values["corrupt_energy"]
    if corrupt >= 1.0 or corrupt < 0.0:
        raise ConfigError("corrupt_energy must lie in [0, 1)")

    def target_at(k: int) -> StaticTarget:
        # interior energies may be learned or deliberately tempered; the
        # data-side target is pinned to the exact density and the start
        # level stays exact because it seeds the particles.  The tempering
        # alternates sign level to level: a uniformly tempered path is just
        # a different annealing sequence and barely moves the weights.
        t = float(grid[k])
        mix = fam.mixture_at(t)
        if k in (0, grid.size - 1):
            return StaticTarget(
                log_density=partial(gmm_log_density, mix),
                score=partial(gmm_score, mix),
                sample=partial(gmm_sample, mix) if k == grid.size - 1 else None,
            )
        if learned is not None:
            return StaticTarget(
                log_density=partial(learned.log_density, t),
                score=partial(learned.score, t),
            )
        if corrupt > 0.0:
            bad = _TemperedDensity(mix, 1.0 + corrupt * (1.0 if k % 2 == 0 else -1.0))
            return StaticTarget(log_density=bad.log_density, score=bad.score)
        return StaticTarget(
            log_density=partial(gmm_log_density, mix), score=partial(gmm_score, mix)
        )

    targets = [target_at(k) for k in range(grid.size)]

    def drift(t: float, y: np.ndarray) -> np.ndarray:
        corr = sched.gamma_dot_times_gamma(t) + 0.5 * g * g
        return fam.velocity(t, y) - corr * fam.score(t, y)

    kernels = KernelPair(drift=drift, g=g, grid=grid)
    result = smc_diffusion(
        targets,
        kernels,
        n,
        rng,
        alpha=values["alpha"],
        mala_steps=values["mala_steps"],
        initial_step=values["initial_step"],
    )
    _write_particles(out / "particles.csv", result.system.positions, result.system.log_weights)

    trace_rows = [["level", "t", "ess", "acceptance", "step"]]
    for i, k in enumerate(range(grid.size - 2, -1, -1)):
        trace_rows.append(
            [
                str(k),
                _g(grid[k]),
                _g(result.ess_trace[i]),
                _g(result.acceptance_trace[i]),
                _g(result.step_trace[i]),
            ]
        )
    _write_csv(out / "trace.csv", trace_rows)

    equalized = _systematic_resample(
        result.system.positions, result.system.log_weights, rng
    )
    t0 = float(grid[0])
    exact = fam.sample(t0, n, rng)
    w2 = metrics.sliced_w2(equalized, exact, rng=rng)
    nulls = np.array(
        [
            metrics.sliced_w2(fam.sample(t0, n, rng), fam.sample(t0, n, rng), rng=rng)
            for _ in range(values["null_pairs"])
        ]
    )
    null_se = float(np.std(nulls, ddof=1) / np.sqrt(nulls.size)) if nulls.size > 1 else 0.0
    rows = [
        ["log_z", "n_resamples", "final_ess", "sliced_w2", "null_w2", "null_se"],
        [
            _g(result.log_z),
            str(result.n_resamples),
            _g(result.system.ess()),
            _g(w2),
            _g(float(np.mean(nulls))),
            _g(null_se),
        ],
    ]
    _write_csv(out / "summary.csv", rows)
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_OK


# -- free-energy -------------------------------------------------------------------

_FREE_ENERGY_SCHEMA = {
    **_COMMON_KEYS,
    "potential": Field(str, "gaussian-pair"),
    "dim": Field(int, 2),
    "sigma_a": Field(float, 1.0),
    "sigma_b": Field(float, 2.0),
    "estimators": Field(str, "fep,ti,mbar"),
    "n_samples": Field(int, 20000),
    "ti_grid": Field(int, 64),
    "ti_per_t": Field(int, 1000),
    "ti_end": Field(int, 5000),
    "fd_step": Field(float, 1e-3),
    "mbar_replicates": Field(int, 8),
    "mbar_tol": Field(float, 1e-10),
}


def cmd_free_energy(values: dict) -> int:
    if values["potential"] != "gaussian-pair":
        raise ConfigError(f"unknown potential {values['potential']!r}")
    d = values["dim"]
    sa, sb = values["sigma_a"], values["sigma_b"]
    if sa <= 0.0 or sb <= 0.0:
        raise ConfigError("gaussian widths must be positive")
    estimators = [e.strip() for e in values["estimators"].split(",") if e.strip()]
    unknown = [e for e in estimators if e not in ("fep", "ti", "mbar")]
    if unknown:
        raise ConfigError(f"unknown estimators: {', '.join(unknown)}")
    out = _out_dir(values)
    rng = np.random.default_rng(values["seed"])

    def u_a(x: np.ndarray) -> np.ndarray:
        return np.sum(x * x, axis=1) / (2.0 * sa * sa)

    def u_b(x: np.ndarray) -> np.ndarray:
        return np.sum(x * x, axis=1) / (2.0 * sb * sb)

    rows = [["estimator", "delta_f", "stderr", "n_samples", "grid"]]
    if "fep" in estimators:
        n = values["n_samples"]
        est = fep(sa * rng.standard_normal((n, d)), u_a, u_b)
        rows.append(["fep", _g(est.delta_f), _g(est.stderr), str(est.n_samples), "0"])
    if "ti" in estimators:

        def precision(t: float) -> float:
            return (1.0 - t) / (sa * sa) + t / (sb * sb)

        def u_path(t: float, x: np.ndarray) -> np.ndarray:
            return 0.5 * precision(t) * np.sum(x * x, axis=1)

        def sample_path(t: float, n: int, r: np.random.Generator) -> np.ndarray:
            return r.standard_normal((n, d)) / np.sqrt(precision(t))

        path = PotentialPath(u=u_path, sample=sample_path, u_a=u_a, u_b=u_b)
        est = ti_estimate(
            path,
            np.linspace(0.0, 1.0, values["ti_grid"]),
            rng,
            n_per_t=values["ti_per_t"],
            n_end=values["ti_end"],
            h=values["fd_step"],
        )
        rows.append(
            ["ti", _g(est.delta_f), _g(est.stderr), str(est.n_samples), str(est.grid_size)]
        )
    if "mbar" in estimators:
        n = values["n_samples"]
        reps = values["mbar_replicates"]
        if reps < 2:
            raise ConfigError("mbar needs at least two replicates for an error bar")
        deltas = np.empty(reps)
        for r in range(reps):
            xa = sa * rng.standard_normal((n, d))
            xb = sb * rng.standard_normal((n, d))
            pooled = np.vstack([xa, xb])
            energies = np.stack([u_a(pooled), u_b(pooled)])
            problem = MbarProblem(energies=energies, counts=np.array([n, n]))
            sol = mbar_solve(problem, tol=values["mbar_tol"])
            if not sol.converged:
                raise NumericalAbort(sol.iterations, "self-consistent iteration stalled")
            # state free energies are -log Z up to a constant, so the
            # log-partition difference flips the sign
            deltas[r] = sol.free_energies[0] - sol.free_energies[1]
        se = float(np.std(deltas, ddof=1) / np.sqrt(reps))
        rows.append(["mbar", _g(float(np.mean(deltas))), _g(se), str(2 * n * reps), "2"])
    _write_csv(out / "free_energy.csv", rows)
    print(f"wrote {out / 'free_energy.csv'}")
    return EXIT_OK


# -- grad-check --------------------------------------------------------------------

_GRAD_CHECK_SCHEMA = {
    **_COMMON_KEYS,
    "dim": Field(int, 2),
    "width": Field(int, 8),
    "depth": Field(int, 3),
    "embed_pairs": Field(int, 4),
    "break_op": Field(str, "", "corrupt one op's adjoint to demo the failure path"),
    "op_tol": Field(float, 1e-6),
    "loss_tol": Field(float, 1e-4),
}


def _op_checks(rng: np.random.Generator):
    """(name, leaf shape, graph builder) for every differentiable op."""
    mat_b = ad.const(rng.standard_normal((4, 2)))
    other = ad.const(rng.standard_normal((3, 4)))
    cat = ad.const(rng.standard_normal((3, 2)))
    yield "matmul", (3, 4), lambda x: ad.matmul(x, mat_b)
    yield "add", (3, 4), lambda x: ad.add(x, other)
    yield "mul", (3, 4), lambda x: ad.mul(x, other)
    yield "tanh", (3, 4), ad.tanh
    yield "sin", (3, 4), ad.sin
    yield "cos", (3, 4), ad.cos
    yield "square", (3, 4), ad.square
    yield "sigmoid", (3, 4), ad.sigmoid
    yield "logsigmoid", (3, 4), ad.logsigmoid
    yield "exp", (3, 4), ad.exp
    yield "sum", (3, 4), lambda x: ad.reduce_sum(x, axis=1)
    yield "logsumexp", (3, 4), lambda x: ad.logsumexp(x, axis=1)
    yield "broadcast", (1, 4), lambda x: ad.broadcast_to(x, (5, 4))
    yield "slice", (3, 4), lambda x: ad.slice_axis(x, axis=1, start=1, stop=3)
    yield "pad", (3, 4), lambda x: ad.pad_axis(x, axis=0, before=1, after=2)
    yield "concat", (3, 4), lambda x: ad.concat([x, cat], axis=1)
    yield "reshape", (3, 4), lambda x: ad.reshape(x, (12,))


def _directional_fd(value_fn: Callable[[float], float], h: float) -> float:
    def central(step: float) -> float:
        return (value_fn(step) - value_fn(-step)) / (2.0 * step)

    return (4.0 * central(h / 2.0) - central(h)) / 3.0


def _check_ops(rng: np.random.Generator, tol: float) -> list:
    rows = []
    for name, shape, build in _op_checks(rng):
        x = ad.leaf("x", shape)
        y = build(x)
        weight = ad.const(rng.standard_normal(y.shape))
        scalar = ad.reduce_sum(ad.mul(weight, y))
        grad_prog = ad.Program([scalar] + ad.grad(scalar, [x]))
        value_prog = ad.Program([scalar])
        x0 = rng.standard_normal(shape)
        direction = rng.standard_normal(shape)
        _, g = grad_prog.run({"x": x0})
        analytic = float(np.sum(g * direction))
        fd = _directional_fd(
            lambda eps: float(value_prog.run({"x": x0 + eps * direction})[0]), 1e-4
        )
        err = abs(analytic - fd) / max(abs(fd), 1e-8)
        rows.append((f"op:{name}", err, err < tol))
    return rows


def _loss_checks(rng: np.random.Generator, values: dict, tol: float) -> list:
    sched = NoisingSchedule(kind=VP)
    d = values["dim"]
    model = EnergyModel(
        d,
        width=values["width"],
        depth=values["depth"],
        m=values["embed_pairs"],
        seed=values["seed"],
    )
    b = 8
    t = rng.uniform(0.1, 0.9, b)
    batch = losses.NoisedBatch(t, rng.standard_normal((b, d)), rng.standard_normal((b, d)))
    clf_samples = rng.standard_normal((3, 4, d))
    pair = (rng.standard_normal((5, d)), rng.standard_normal((6, d)))
    checks = [
        ("dsm", lambda: losses.dsm_loss(model, sched, batch)),
        ("diffclf", lambda: losses.diffclf_loss(model, (0.2, 0.5, 0.8), clf_samples)),
        ("binary_clf", lambda: losses.binary_clf_loss(model, 0.3, 0.6, pair)),
        ("ctsm", lambda: losses.ctsm_loss(model, sched, batch)),
        (
            "bregman_canonical",
            lambda: losses.bregman_binary_loss(model, losses.CANONICAL, 0.3, 0.6, pair),
        ),
    ]
    rows = []
    base = {k: v.copy() for k, v in model.params.items()}
    for name, fn in checks:
        _, grads = fn()
        worst = 0.0
        for _ in range(3):
            direction = {k: rng.standard_normal(v.shape) for k, v in base.items()}
            analytic = float(sum(np.sum(grads[k] * direction[k]) for k in grads))

            def value_at(eps: float) -> float:
                for k in base:
                    model.params[k] = base[k] + eps * direction[k]
                value, _ = fn()
                return value

            fd = _directional_fd(value_at, 1e-5)
            for k in base:
                model.params[k] = base[k].copy()
            worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-8))
        rows.append((f"loss:{name}", worst, worst < tol))
    return rows


def cmd_grad_check(values: dict) -> int:
    out = _out_dir(values)
    rng = np.random.default_rng(values["seed"])
    previous = ad.BROKEN_OP_FOR_TESTS
    if values["break_op"]:
        ad.BROKEN_OP_FOR_TESTS = values["break_op"]
    try:
        rows = _check_ops(rng, values["op_tol"])
        rows += _loss_checks(rng, values, values["loss_tol"])
    finally:
        ad.BROKEN_OP_FOR_TESTS = previous
    table = [["check", "max_rel_err", "status"]]
    failed = []
    for name, err, ok in rows:
        table.append([name, _g(err), "pass" if ok else "FAIL"])
        print(f"{name:24s} {err:12.3e} {'pass' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    _write_csv(out / "grad_check.csv", table)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(rows)} gradient checks passed")
    return EXIT_OK


# -- driver ------------------------------------------------------------------------

_COMMANDS = {
    "train": (_TRAIN_SCHEMA, cmd_train, "fit an energy model to a mixture target"),
    "eval": (_EVAL_SCHEMA, cmd_eval, "score a checkpoint against exact marginals"),
    "sample": (_SAMPLE_SCHEMA, cmd_sample, "draw samples from a checkpoint by denoising"),
    "blindness": (
        _BLINDNESS_SCHEMA,
        cmd_blindness,
        "sweep mode weights to show what score matching cannot see",
    ),
    "compose": (_COMPOSE_SCHEMA, cmd_compose, "sample an OR/AND combination of two models"),
    "smc-bg": (
        _SMC_BG_SCHEMA,
        cmd_smc_bg,
        "diffusion-path sequential Monte Carlo on an interpolant bridge",
    ),
    "free-energy": (
        _FREE_ENERGY_SCHEMA,
        cmd_free_energy,
        "free-energy differences by perturbation, integration and reweighting",
    ),
    "grad-check": (_GRAD_CHECK_SCHEMA, cmd_grad_check, "verify gradients op by op"),
}

_EXTRA_FLAGS = {
    "eval": ["checkpoint"],
    "sample": ["checkpoint"],
    "smc-bg": ["checkpoint"],
    "compose": ["checkpoint_a", "checkpoint_b", "op"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebdl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", type=str, default=None, help="overrides the output directory")
        p.add_argument("--workers", type=int, default=1, help="must be 1 (single-threaded)")
        for key in _EXTRA_FLAGS.get(name, []):
            p.add_argument(f"--{key.replace('_', '-')}", type=str, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    schema, runner, _ = _COMMANDS[args.command]
    try:
        if args.workers != 1:
            raise ConfigError("this build is single-threaded; --workers must be 1")
        raw = read_config_file(args.config) if args.config else {}
        overrides = {"seed": args.seed, "out": args.out}
        for key in _EXTRA_FLAGS.get(args.command, []):
            overrides[key] = getattr(args, key)
        values = resolve_config(schema, raw, overrides)
        return runner(values)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, ad.NonFiniteError, FloatingPointError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
