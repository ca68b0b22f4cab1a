"""Training loop: standardization, batch drawing, Adam, logging, checkpoints.

Training runs in up to two phases: an optional score-matching warmup
followed by the configured joint objective.  Batches are drawn fresh from
the data source every step; randomness is keyed by (seed, step) so a run
can be stopped and continued without replaying earlier steps.
Determinism is guaranteed single-threaded, which is the only mode here.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .losses import JointBatch, JointConfig, MIN_TIME_GAP, NoisedBatch, joint_loss_terms
from .mixtures import GaussianMixture, gmm_sample, standardize_mixture
from .model import EnergyModel
from .schedules import SI_LINEAR, NoisingSchedule

__all__ = [
    "NumericalAbort",
    "TrainConfig",
    "AdamState",
    "TrainResult",
    "MixtureSource",
    "ArraySource",
    "standardize",
    "adam_step",
    "train",
    "LOG_HEADER",
]

LOG_HEADER = ["step", "loss_total", "loss_dsm", "loss_clf", "loss_ctsm", "grad_norm", "wall_ms"]


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or intermediate; carries the step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def standardize(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-coordinate zero-mean unit-variance map with an 1e-8 std floor."""
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), 1e-8)
    return (data - mean) / std, mean, std


@dataclass
class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; params and state are updated in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class MixtureSource:
    """Draws fresh oracle samples every step."""

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return gmm_sample(self.mixture, n, rng)


class ArraySource:
    """Cycles through a fixed dataset, reshuffling at each epoch boundary."""

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=np.float64)
        self._perm: Optional[np.ndarray] = None
        self._cursor = 0

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, self.data.shape[1]))
        filled = 0
        while filled < n:
            if self._perm is None or self._cursor >= len(self._perm):
                self._perm = rng.permutation(self.data.shape[0])
                self._cursor = 0
            take = min(n - filled, len(self._perm) - self._cursor)
            idx = self._perm[self._cursor : self._cursor + take]
            out[filled : filled + take] = self.data[idx]
            self._cursor += take
            filled += take
        return out


@dataclass(frozen=True)
class TrainConfig:
    sched: NoisingSchedule
    out_dir: Path
    use_dsm: bool = True
    use_clf: bool = True
    use_ctsm: bool = False
    n_classes: int = 4
    batch_size: int = 1024
    warmup_steps: int = 0
    steps: int = 1000
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10
    width: int = 64
    depth: int = 4
    embed_pairs: int = 16
    antithetic: Optional[bool] = None  # None: on for interpolant runs only
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.use_clf:
            if self.n_classes < 2:
                raise ValueError("classification needs at least 2 classes")
            if self.batch_size % self.n_classes:
                raise ValueError(
                    f"batch size {self.batch_size} not divisible by {self.n_classes} classes"
                )
        if self.eval_every < 1:
            raise ValueError("eval cadence must be at least 1")
        object.__setattr__(self, "out_dir", Path(self.out_dir))

    @property
    def time_clip(self) -> float:
        return 1e-3 if self.sched.kind == SI_LINEAR else 1e-4

    @property
    def use_antithetic(self) -> bool:
        if self.antithetic is None:
            return self.sched.kind == SI_LINEAR
        return self.antithetic

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.steps


@dataclass
class TrainResult:
    model: EnergyModel
    adam: AdamState
    history: list
    log_path: Path
    final_path: Path
    best_path: Path
    mean: np.ndarray
    std: np.ndarray
    aborted_step: Optional[int] = None


def _draw_class_times(rng: np.random.Generator, n: int, clip: float) -> np.ndarray:
    for _ in range(1000):
        t = np.sort(rng.uniform(clip, 1.0 - clip, size=n))
        if n < 2 or np.min(np.diff(t)) >= MIN_TIME_GAP:
            return t
    raise RuntimeError("could not draw distinct class times")  # pragma: no cover


def _draw_noised(
    rng: np.random.Generator,
    source,
    source1,
    cfg: TrainConfig,
) -> NoisedBatch:
    b = cfg.batch_size
    clip = cfg.time_clip
    interp = cfg.sched.kind == SI_LINEAR
    if cfg.use_antithetic:
        half = b // 2
        t = np.repeat(rng.uniform(clip, 1.0 - clip, size=half), 2)
        x0 = np.repeat(source.draw(half, rng), 2, axis=0)
        zh = rng.standard_normal((half, source.dim))
        z = np.empty((b, source.dim))
        z[0::2] = zh
        z[1::2] = -zh
        x1 = np.repeat(source1.draw(half, rng), 2, axis=0) if interp else None
        return NoisedBatch(t, x0, z, x1=x1, antithetic=True)
    t = rng.uniform(clip, 1.0 - clip, size=b)
    x0 = source.draw(b, rng)
    z = rng.standard_normal((b, source.dim))
    x1 = source1.draw(b, rng) if interp else None
    return NoisedBatch(t, x0, z, x1=x1)


def _draw_class_samples(
    rng: np.random.Generator,
    source,
    source1,
    cfg: TrainConfig,
) -> tuple[np.ndarray, np.ndarray]:
    n, m = cfg.n_classes, cfg.batch_size // cfg.n_classes
    times = _draw_class_times(rng, n, cfg.time_clip)
    d = source.dim
    samples = np.empty((n, m, d))
    interp = cfg.sched.kind == SI_LINEAR
    for i, t in enumerate(times):
        x0 = source.draw(m, rng)
        z = rng.standard_normal((m, d))
        gamma = cfg.sched.gamma(float(t))
        if interp:
            x1 = source1.draw(m, rng)
            samples[i] = (1.0 - t) * x0 + t * x1 + gamma * z
        else:
            samples[i] = cfg.sched.values(float(t)).S * x0 + gamma * z
    return times, samples


def _resolve_source(data) -> tuple[object, np.ndarray, np.ndarray]:
    """Wrap raw data/mixtures into a source, standardizing as we go."""
    if isinstance(data, GaussianMixture):
        std_mix, mean, std = standardize_mixture(data)
        return MixtureSource(std_mix), mean, std
    if isinstance(data, np.ndarray):
        std_data, mean, std = standardize(data)
        return ArraySource(std_data), mean, std
    # anything with draw(n, rng) is taken as already standardized
    if hasattr(data, "draw"):
        d = data.dim
        return data, np.zeros(d), np.ones(d)
    raise TypeError(f"cannot train from {type(data).__name__}")


def _fmt(value: float) -> str:
    return format(value, ".17g")


def train(
    config: TrainConfig,
    data,
    data1=None,
    model: Optional[EnergyModel] = None,
    adam: Optional[AdamState] = None,
    start_step: int = 0,
) -> TrainResult:
    """Run (or continue) a training job; returns the model plus file locations.

    ``data`` is a mixture (standardized analytically, fresh draws each
    step), an (n, d) array (standardized, reshuffled per epoch), or a
    pre-standardized source object.  Interpolant runs need ``data1`` for
    the second endpoint.  Passing ``model``/``adam``/``start_step``
    continues a run: step k+1 after a restart is identical to step k+1 of
    an uninterrupted run because batches are keyed by (seed, step).
    """
    source, mean, std = _resolve_source(data)
    source1 = None
    if config.sched.kind == SI_LINEAR:
        if data1 is None:
            raise ValueError("interpolant training needs a second endpoint dataset")
        source1, _, _ = _resolve_source(data1)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = EnergyModel(
            d=source.dim,
            width=config.width,
            depth=config.depth,
            m=config.embed_pairs,
            seed=config.seed,
        )
    if adam is None:
        adam = AdamState.zeros(model.params)

    log_path = out / "training_log.csv"
    final_path = out / "final.ckpt"
    best_path = out / "best.ckpt"
    transform_path = out / "transform.txt"
    with open(transform_path, "w") as fh:
        fh.write("mean " + " ".join(_fmt(v) for v in mean) + "\n")
        fh.write("std " + " ".join(_fmt(v) for v in std) + "\n")

    warm_cfg = JointConfig(use_dsm=True, use_clf=False, use_ctsm=False)
    main_cfg = JointConfig(
        use_dsm=config.use_dsm, use_clf=config.use_clf, use_ctsm=config.use_ctsm
    )
    history: list = []
    best_loss = np.inf

    mode = "a" if start_step else "w"
    with open(log_path, mode, newline="") as log_file:
        writer = csv.writer(log_file)
        if not start_step:
            writer.writerow(LOG_HEADER)
        for step in range(start_step + 1, config.total_steps + 1):
            tic = time.perf_counter()
            rng = np.random.default_rng([config.seed, step])
            phase_cfg = warm_cfg if step <= config.warmup_steps else main_cfg
            batch = JointBatch(
                dsm=_draw_noised(rng, source, source1, config) if phase_cfg.use_dsm else None,
                clf_times=None,
                clf_samples=None,
                ctsm=_draw_noised(rng, source, source1, config) if phase_cfg.use_ctsm else None,
            )
            if phase_cfg.use_clf:
                times, samples = _draw_class_samples(rng, source, source1, config)
                batch = JointBatch(
                    dsm=batch.dsm, clf_times=times, clf_samples=samples, ctsm=batch.ctsm
                )
            try:
                values, grads = joint_loss_terms(model, config.sched, phase_cfg, batch)
            except ad.NonFiniteError as err:
                raise NumericalAbort(step, str(err)) from err
            if not np.isfinite(values["total"]):
                raise NumericalAbort(step, f"loss is {values['total']!r}")
            grad_norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
            adam_step(
                model.params, grads, adam, config.lr, config.beta1, config.beta2, config.adam_eps
            )
            wall_ms = (time.perf_counter() - tic) * 1e3
            if step % config.eval_every == 0 or step == config.total_steps:
                row = {
                    "step": step,
                    "loss_total": values["total"],
                    "loss_dsm": values.get("dsm"),
                    "loss_clf": values.get("clf"),
                    "loss_ctsm": values.get("ctsm"),
                    "grad_norm": grad_norm,
                    "wall_ms": wall_ms,
                }
                history.append(row)
                writer.writerow(
                    [
                        step,
                        _fmt(values["total"]),
                        _fmt(values["dsm"]) if "dsm" in values else "",
                        _fmt(values["clf"]) if "clf" in values else "",
                        _fmt(values["ctsm"]) if "ctsm" in values else "",
                        _fmt(grad_norm),
                        format(wall_ms, ".3f"),
                    ]
                )
                in_main_phase = step > config.warmup_steps or config.warmup_steps == 0
                if in_main_phase and values["total"] < best_loss:
                    best_loss = values["total"]
                    model.save_checkpoint(best_path)

    model.save_checkpoint(final_path)
    if not best_path.exists():
        model.save_checkpoint(best_path)
    np.savez(
        out / "optimizer.npz",
        step=adam.step,
        **{f"m.{k}": v for k, v in adam.m.items()},
        **{f"v.{k}": v for k, v in adam.v.items()},
    )
    return TrainResult(
        model=model,
        adam=adam,
        history=history,
        log_path=log_path,
        final_path=final_path,
        best_path=best_path,
        mean=mean,
        std=std,
    )
