"""Training loop: standardization, Adam, sources, logging, determinism,
resume semantics, and numerical aborts."""

import csv

import numpy as np
import pytest

from ebdl.losses import JointConfig, joint_loss_terms
from ebdl.mixtures import GaussianMixture, mog2, standardize_mixture
from ebdl.model import EnergyModel, load_checkpoint
from ebdl.schedules import SI_LINEAR, VP, NoisingSchedule
from ebdl.training import (
    LOG_HEADER,
    AdamState,
    ArraySource,
    MixtureSource,
    NumericalAbort,
    TrainConfig,
    adam_step,
    standardize,
    train,
)

SCHED = NoisingSchedule(kind=VP)


def _cfg(out, **kw) -> TrainConfig:
    base = dict(
        sched=SCHED,
        out_dir=out,
        steps=4,
        batch_size=32,
        n_classes=4,
        width=8,
        depth=2,
        embed_pairs=4,
        eval_every=1,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def _read_log(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _mask_wall(rows: list) -> list:
    """Log rows with the wall-clock column blanked for comparisons."""
    wall = LOG_HEADER.index("wall_ms")
    return [row[:wall] + row[wall + 1 :] for row in rows]


def _load_adam(path) -> AdamState:
    with np.load(path) as data:
        m = {k[2:]: data[k] for k in data.files if k.startswith("m.")}
        v = {k[2:]: data[k] for k in data.files if k.startswith("v.")}
        return AdamState(m=m, v=v, step=int(data["step"]))


# -- standardize ---------------------------------------------------------------------


def test_standardize_centers_and_scales():
    rng = np.random.default_rng(0)
    data = rng.normal(loc=[3.0, -2.0], scale=[2.0, 0.5], size=(500, 2))
    out, mean, std = standardize(data)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(out * std + mean, data, rtol=1e-12)


def test_standardize_floors_degenerate_coordinates():
    data = np.column_stack([np.full(10, 7.0), np.arange(10.0)])
    out, mean, std = standardize(data)
    assert std[0] == 1e-8
    assert np.all(np.isfinite(out))


# -- adam ----------------------------------------------------------------------------


def test_adam_first_step_matches_hand_computation():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -1.5])}
    state = AdamState.zeros(params)
    lr, eps = 0.1, 1e-8
    adam_step(params, grads, state, lr, eps=eps)
    # bias correction makes m_hat = g and v_hat = g*g on step one, so the
    # update is -lr * g / (|g| + eps) = -lr * sign(g) up to eps
    want = np.array([1.0, -2.0]) - lr * np.array([0.5, -1.5]) / (
        np.abs([0.5, -1.5]) + eps
    )
    np.testing.assert_allclose(params["w"], want, rtol=1e-12)
    assert state.step == 1


def test_adam_is_stateful_across_steps():
    # with a constant gradient the bias-corrected update is -lr*sign(g)
    # every step; a changed gradient reveals the momentum memory
    g1, g2 = {"w": np.array([1.0])}, {"w": np.array([0.2])}
    warm = {"w": np.array([0.0])}
    state = AdamState.zeros(warm)
    adam_step(warm, g1, state, 0.05)
    before = warm["w"].copy()
    adam_step(warm, g2, state, 0.05)
    warm_update = warm["w"] - before
    fresh = {"w": np.array([0.0])}
    adam_step(fresh, g2, AdamState.zeros(fresh), 0.05)
    assert not np.allclose(warm_update, fresh["w"])


# -- sources --------------------------------------------------------------------------


def test_array_source_visits_every_row_per_epoch():
    data = np.arange(12.0).reshape(6, 2)
    source = ArraySource(data)
    rng = np.random.default_rng(1)
    epoch = source.draw(6, rng)
    assert sorted(map(tuple, epoch)) == sorted(map(tuple, data))
    # drawing across an epoch boundary reshuffles but still avoids
    # within-epoch repeats
    a = source.draw(4, rng)
    b = source.draw(2, rng)
    assert sorted(map(tuple, np.vstack([a, b]))) == sorted(map(tuple, data))


def test_mixture_source_draws_match_dim():
    source = MixtureSource(mog2(2))
    assert source.dim == 2
    draws = source.draw(64, np.random.default_rng(2))
    assert draws.shape == (64, 2)


# -- config ---------------------------------------------------------------------------


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="learning rate"):
        _cfg(tmp_path, lr=0.0)
    with pytest.raises(ValueError, match="non-negative"):
        _cfg(tmp_path, steps=-1)
    with pytest.raises(ValueError, match="classes"):
        _cfg(tmp_path, n_classes=1)
    with pytest.raises(ValueError, match="divisible"):
        _cfg(tmp_path, batch_size=30)
    with pytest.raises(ValueError, match="cadence"):
        _cfg(tmp_path, eval_every=0)


def test_config_derived_properties(tmp_path):
    dm = _cfg(tmp_path)
    assert dm.time_clip == 1e-4 and not dm.use_antithetic
    si = _cfg(tmp_path, sched=NoisingSchedule(kind=SI_LINEAR))
    assert si.time_clip == 1e-3 and si.use_antithetic
    forced = _cfg(tmp_path, antithetic=True)
    assert forced.use_antithetic
    assert _cfg(tmp_path, warmup_steps=3, steps=4).total_steps == 7


# -- the loop -------------------------------------------------------------------------


def test_zero_steps_writes_header_and_checkpoints(tmp_path):
    result = train(_cfg(tmp_path / "run", steps=0), mog2(2))
    rows = _read_log(result.log_path)
    assert rows == [LOG_HEADER]
    assert result.final_path.exists() and result.best_path.exists()
    assert result.final_path.read_bytes() == result.best_path.read_bytes()


def test_training_log_layout_and_transform_file(tmp_path):
    out = tmp_path / "run"
    result = train(_cfg(out, steps=3), mog2(2))
    rows = _read_log(result.log_path)
    assert rows[0] == LOG_HEADER
    assert [row[0] for row in rows[1:]] == ["1", "2", "3"]
    # joint run logs both component losses, no ctsm column value
    assert all(row[2] and row[3] and not row[4] for row in rows[1:])
    _, mean, std = standardize_mixture(mog2(2))
    lines = (out / "transform.txt").read_text().splitlines()
    got_mean = np.array([float(v) for v in lines[0].split()[1:]])
    got_std = np.array([float(v) for v in lines[1].split()[1:]])
    np.testing.assert_allclose(got_mean, mean, rtol=1e-15)
    np.testing.assert_allclose(got_std, std, rtol=1e-15)


def test_warmup_phase_is_score_matching_only(tmp_path):
    result = train(_cfg(tmp_path / "run", warmup_steps=2, steps=2), mog2(2))
    assert [row["loss_clf"] for row in result.history[:2]] == [None, None]
    assert all(row["loss_clf"] is not None for row in result.history[2:])
    assert all(row["loss_dsm"] is not None for row in result.history)


def test_reruns_are_deterministic(tmp_path):
    a = train(_cfg(tmp_path / "a", steps=4), mog2(2))
    b = train(_cfg(tmp_path / "b", steps=4), mog2(2))
    assert _mask_wall(_read_log(a.log_path)) == _mask_wall(_read_log(b.log_path))
    assert a.final_path.read_bytes() == b.final_path.read_bytes()


def test_resume_from_disk_reproduces_uninterrupted_run(tmp_path):
    full = train(_cfg(tmp_path / "full", steps=6), mog2(2))
    out = tmp_path / "split"
    train(_cfg(out, steps=3), mog2(2))
    resumed = train(
        _cfg(out, steps=6),
        mog2(2),
        model=load_checkpoint(out / "final.ckpt"),
        adam=_load_adam(out / "optimizer.npz"),
        start_step=3,
    )
    assert resumed.final_path.read_bytes() == full.final_path.read_bytes()
    assert _mask_wall(_read_log(resumed.log_path)) == _mask_wall(_read_log(full.log_path))


def test_interpolant_training_smoke(tmp_path):
    si = NoisingSchedule(kind=SI_LINEAR)
    m0 = GaussianMixture([1.0], [[-1.0, 0.0]], [[0.3, 0.3]])
    m1 = GaussianMixture([1.0], [[1.5, 0.5]], [[0.4, 0.4]])
    result = train(_cfg(tmp_path / "si", sched=si, steps=2), m0, data1=m1)
    assert len(result.history) == 2
    with pytest.raises(ValueError, match="second endpoint"):
        train(_cfg(tmp_path / "si2", sched=si, steps=1), m0)


def test_nan_in_data_raises_numerical_abort(tmp_path):
    data = np.random.default_rng(3).normal(size=(32, 2))
    data[5, 0] = np.nan
    with pytest.raises(NumericalAbort) as exc:
        train(_cfg(tmp_path / "run", steps=2), data)
    assert exc.value.step == 1


def test_frozen_batch_descent_is_non_increasing():
    # plain gradient descent with a small rate on one fixed batch; the
    # gradients point downhill for 50 consecutive steps
    rng = np.random.default_rng(4)
    model = EnergyModel(d=2, width=8, depth=2, m=4, seed=5)
    from ebdl.losses import JointBatch, NoisedBatch

    t = rng.uniform(0.1, 0.9, size=16)
    batch = JointBatch(
        dsm=NoisedBatch(t, rng.normal(size=(16, 2)), rng.standard_normal((16, 2))),
        clf_times=np.array([0.2, 0.5, 0.8]),
        clf_samples=rng.normal(size=(3, 8, 2)),
    )
    config = JointConfig(use_dsm=True, use_clf=True, use_ctsm=False)
    prev = np.inf
    for _ in range(50):
        values, grads = joint_loss_terms(model, SCHED, config, batch)
        assert values["total"] <= prev + 1e-12
        prev = values["total"]
        for name in model.params:
            model.params[name] -= 1e-3 * grads[name]
