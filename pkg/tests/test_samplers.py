"""Samplers: ESS bookkeeping, MALA invariance, SDE integrators, and the two
sequential Monte Carlo drivers."""

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from ebdl import metrics
from ebdl.mixtures import GaussianMixture, SiMarginalFamily, gmm_sample
from ebdl.samplers import (
    AdaptiveStep,
    KernelPair,
    ParticleSystem,
    SmcResult,
    StaticTarget,
    dm_denoise,
    ess,
    mala_chain,
    multinomial_resample,
    si_integrate,
    smc_classic,
    smc_diffusion,
)
from ebdl.schedules import SI_LINEAR, VP, NoisingSchedule, si_gamma_dot_times_gamma


def _gauss_target(mean: np.ndarray, var: float) -> StaticTarget:
    mean = np.asarray(mean, dtype=np.float64)

    def log_density(x):
        return -0.5 * np.sum((x - mean) ** 2, axis=1) / var - 0.5 * mean.size * np.log(
            2.0 * np.pi * var
        )

    return StaticTarget(
        log_density=log_density,
        score=lambda x: (mean - x) / var,
        sample=lambda n, rng: mean + np.sqrt(var) * rng.standard_normal((n, mean.size)),
    )


# -- particle bookkeeping ---------------------------------------------------------


def test_particle_system_shape_validation():
    with pytest.raises(ValueError):
        ParticleSystem(np.zeros((4, 2)), np.zeros(3), np.random.default_rng(0))
    with pytest.raises(ValueError):
        ParticleSystem(np.zeros(4), np.zeros(4), np.random.default_rng(0))


def test_ess_uniform_and_degenerate():
    assert abs(ess(np.zeros(10)) - 10.0) < 1e-12
    lw = np.full(10, -np.inf)
    lw[3] = 0.0
    assert abs(ess(lw) - 1.0) < 1e-12


def test_ess_constant_shift_invariance():
    rng = np.random.default_rng(1)
    lw = rng.normal(size=64)
    assert abs(ess(lw) - ess(lw + 123.456)) < 1e-12


def test_ess_rejects_collapsed_weights():
    with pytest.raises(ValueError, match="collapsed"):
        ess(np.full(5, -np.inf))


def test_multinomial_resample_resets_weights():
    rng = np.random.default_rng(2)
    lw = np.array([0.0, -50.0, -50.0, -50.0])
    system = ParticleSystem(np.arange(8.0).reshape(4, 2), lw, rng)
    multinomial_resample(system)
    np.testing.assert_allclose(system.log_weights, -np.log(4.0))
    # everything lands on the dominating particle
    np.testing.assert_allclose(system.positions, np.tile([0.0, 1.0], (4, 1)))


# -- mala ---------------------------------------------------------------------------


def test_mala_preserves_gaussian_target():
    rng = np.random.default_rng(3)
    target = _gauss_target(np.zeros(2), 1.0)
    n = 4000
    x0 = target.sample(n, rng)
    x, rate = mala_chain(target.log_density, target.score, x0, 0.6, 40, rng)
    assert 0.2 < rate < 1.0
    fresh = target.sample(n, rng)
    # 1% two-sample KS critical value, applied to the sliced average
    crit = 1.628 * np.sqrt(2.0 * n / (n * n))
    assert metrics.sliced_ks(x, fresh, rng=rng) < crit


def test_mala_acceptance_approaches_one_for_tiny_steps():
    rng = np.random.default_rng(4)
    target = _gauss_target(np.zeros(2), 1.0)
    _, rate = mala_chain(target.log_density, target.score, target.sample(256, rng), 1e-4, 5, rng)
    assert rate > 0.999


def test_mala_input_validation():
    target = _gauss_target(np.zeros(1), 1.0)
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError, match="\\(n, d\\)"):
        mala_chain(target.log_density, target.score, np.zeros(3), 0.1, 1, rng)
    with pytest.raises(ValueError, match="nan"):
        mala_chain(
            lambda x: np.full(x.shape[0], np.nan),
            lambda x: x,
            np.zeros((3, 1)),
            0.1,
            1,
            rng,
        )


def test_adaptive_step_moves_toward_target():
    stepper = AdaptiveStep(0.5, target=0.75)
    up = stepper.update(1.0)
    assert up > 0.5
    down = stepper.update(0.0)
    assert down < up
    # the adaptation gain decays with the update count
    a = AdaptiveStep(1.0)
    first = np.log(a.update(1.0))
    second = np.log(a.update(1.0) / np.exp(first))
    assert second < first


# -- integrators ----------------------------------------------------------------------


def test_dm_denoise_recovers_base_gaussian():
    sched = NoisingSchedule(kind=VP)
    base = GaussianMixture([1.0], [[0.8, -0.5]], [[0.4, 0.4]])
    from ebdl.mixtures import DmMarginalFamily

    fam = DmMarginalFamily(base, sched)
    rng = np.random.default_rng(6)
    out = dm_denoise(fam.score, sched, np.linspace(1e-3, 1.0, 300), 2, 8000, rng)
    np.testing.assert_allclose(out.mean(axis=0), [0.8, -0.5], atol=0.05)
    np.testing.assert_allclose(out.var(axis=0), 0.4, rtol=0.12)


def test_dm_denoise_grid_validation():
    sched = NoisingSchedule(kind=VP)
    rng = np.random.default_rng(7)
    fn = lambda t, y: np.zeros_like(y)
    with pytest.raises(ValueError, match="two points"):
        dm_denoise(fn, sched, np.array([0.5]), 1, 4, rng)
    with pytest.raises(ValueError, match="inside"):
        dm_denoise(fn, sched, np.array([0.0, 1.0]), 1, 4, rng)
    with pytest.raises(ValueError, match="inside"):
        dm_denoise(fn, sched, np.array([0.5, 1.1]), 1, 4, rng)


@pytest.mark.parametrize("direction,g", [("forward", 0.0), ("forward", 0.7), ("backward", 0.7)])
def test_si_integrate_transports_between_endpoints(direction, g):
    amp = 1.0
    sched = NoisingSchedule(kind=SI_LINEAR, gamma_amp=amp)
    m0 = GaussianMixture([1.0], [[-1.0, 0.5]], [[0.3, 0.3]])
    m1 = GaussianMixture([1.0], [[2.0, -1.0]], [[0.5, 0.5]])
    fam = SiMarginalFamily(m0, m1, sched)
    rng = np.random.default_rng(8)
    grid = np.linspace(1e-3, 1.0 - 1e-3, 400)
    t_start = float(grid[-1] if direction == "backward" else grid[0])
    start = gmm_sample(fam.mixture_at(t_start), 6000, rng)
    out = si_integrate(
        fam.velocity,
        fam.score,
        lambda t: si_gamma_dot_times_gamma(t, amp),
        g,
        grid,
        direction,
        start,
        rng,
    )
    t_end = float(grid[0] if direction == "backward" else grid[-1])
    end_mix = fam.mixture_at(t_end)
    np.testing.assert_allclose(out.mean(axis=0), end_mix.means[0], atol=0.08)
    np.testing.assert_allclose(out.var(axis=0), end_mix.diag_vars[0], rtol=0.15)


def test_si_integrate_validation():
    fn = lambda t, y: np.zeros_like(y)
    rng = np.random.default_rng(9)
    x0 = np.zeros((2, 1))
    grid = np.linspace(0.1, 0.9, 5)
    with pytest.raises(ValueError, match="forward or backward"):
        si_integrate(fn, fn, lambda t: 0.0, 0.1, grid, "sideways", x0, rng)
    with pytest.raises(ValueError, match="strictly inside"):
        si_integrate(fn, fn, lambda t: 0.0, 0.1, np.array([0.0, 0.5]), "forward", x0, rng)
    with pytest.raises(ValueError, match="two points"):
        si_integrate(fn, fn, lambda t: 0.0, 0.1, np.array([0.5]), "forward", x0, rng)


# -- smc classic -----------------------------------------------------------------------


def test_smc_classic_identical_targets_has_unit_normalizer():
    target = _gauss_target(np.zeros(2), 1.0)
    rng = np.random.default_rng(10)
    result = smc_classic([target] * 4, 64, rng, mala_steps=2)
    assert abs(result.log_z) < 1e-12
    assert result.n_resamples == 0
    assert isinstance(result, SmcResult)


def test_smc_classic_validation():
    target = _gauss_target(np.zeros(1), 1.0)
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError, match="two annealing levels"):
        smc_classic([target], 8, rng)
    unsampleable = StaticTarget(target.log_density, target.score, sample=None)
    with pytest.raises(ValueError, match="sampleable"):
        smc_classic([target, unsampleable], 8, rng)


def test_smc_classic_normalized_gaussian_path():
    # annealing between normalized densities keeps log Z near zero and the
    # particle cloud on the target
    rng = np.random.default_rng(12)
    # targets[0] is the final (mean 0) level; annealing starts at mean 3
    levels = [_gauss_target(np.full(2, m), 1.0) for m in np.linspace(0.0, 3.0, 9)]
    result = smc_classic(levels, 2048, rng, mala_steps=16)
    assert abs(result.log_z) < 0.1
    np.testing.assert_allclose(result.system.positions.mean(axis=0), 0.0, atol=0.1)
    assert len(result.ess_trace) == 8 and len(result.acceptance_trace) == 8


def test_ais_limit_matches_hand_telescoped_weights():
    # alpha=0 and no rejuvenation: particles never move, weights telescope
    # to p_0/p_2 exactly
    targets = [
        _gauss_target(np.array([0.0]), 1.0),
        _gauss_target(np.array([0.7]), 1.3),
        _gauss_target(np.array([1.5]), 0.8),
    ]
    rng = np.random.default_rng(13)
    result = smc_classic(targets, 256, rng, alpha=0.0, mala_steps=0)
    x = result.system.positions
    hand = -np.log(256.0) + targets[0].log_density(x) - targets[2].log_density(x)
    np.testing.assert_allclose(result.system.log_weights, hand, atol=1e-10)
    assert abs(result.log_z - logsumexp(hand)) < 1e-10
    assert result.n_resamples == 0


def test_smc_resampling_engages_on_hard_path():
    # a deliberately coarse path between far-apart Gaussians must trip the
    # adaptive resampler at least once, and log Z keeps telescoping
    rng = np.random.default_rng(14)
    levels = [_gauss_target(np.full(2, m), 0.5) for m in np.linspace(0.0, 6.0, 4)]
    result = smc_classic(levels, 512, rng, alpha=0.5, mala_steps=8)
    assert result.n_resamples >= 1
    assert np.isfinite(result.log_z)


# -- smc diffusion ----------------------------------------------------------------------


def _si_gaussian_line(shift: float, var0: float, amp: float, k: int):
    """Oracle targets along the interpolant between N(shift*1, var0 I) and
    N(0, I) in d=2, plus the matching backward-drift kernels."""
    sched = NoisingSchedule(kind=SI_LINEAR, gamma_amp=amp)
    m0 = GaussianMixture([1.0], [np.full(2, shift)], [np.full(2, var0)])
    m1 = GaussianMixture([1.0], [np.zeros(2)], [np.ones(2)])
    fam = SiMarginalFamily(m0, m1, sched)
    grid = np.linspace(1e-3, 1.0 - 1e-3, k)
    g = 0.5

    def target_at(t: float) -> StaticTarget:
        mix = fam.mixture_at(t)
        return StaticTarget(
            log_density=lambda x, t=t: np.asarray(fam.log_density(t, x)),
            score=lambda x, t=t: np.asarray(fam.score(t, x)),
            sample=lambda n, rng, mix=mix: gmm_sample(mix, n, rng),
        )

    def drift(t, y):
        return fam.velocity(t, y) - (
            si_gamma_dot_times_gamma(t, amp) + 0.5 * g * g
        ) * fam.score(t, y)

    targets = [target_at(float(t)) for t in grid]
    kernels = KernelPair(drift=drift, g=g, grid=grid)
    return fam, targets, kernels


def test_kernel_pair_validation_and_density():
    fn = lambda t, y: y
    with pytest.raises(ValueError, match="two points"):
        KernelPair(fn, 0.5, np.array([0.3]))
    with pytest.raises(ValueError, match="positive variance"):
        KernelPair(fn, 0.0, np.array([0.2, 0.4]))
    with pytest.raises(ValueError, match="positive variance"):
        KernelPair(fn, 0.5, np.array([0.2, 0.2]))
    pair = KernelPair(fn, 0.7, np.array([0.2, 0.5]))
    value = np.array([[0.3, -0.2]])
    mean = np.array([[0.1, 0.1]])
    want = multivariate_normal.logpdf(value[0], mean[0], 0.49 * 0.25 * np.eye(2))
    assert abs(pair.log_kernel(value, mean, 0.25)[0] - want) < 1e-12


def test_smc_diffusion_target_count_must_match_grid():
    fam, targets, kernels = _si_gaussian_line(2.0, 0.25, 1.0, 8)
    with pytest.raises(ValueError, match="grid points"):
        smc_diffusion(targets[:-1], kernels, 32, np.random.default_rng(15))


def test_smc_diffusion_tracks_oracle_gaussian_path():
    fam, targets, kernels = _si_gaussian_line(2.0, 0.25, 1.0, 24)
    rng = np.random.default_rng(16)
    result = smc_diffusion(targets, kernels, 1024, rng, mala_steps=6)
    # weighted mean of the final cloud sits on the data endpoint
    w = np.exp(result.system.log_weights - result.system.log_weights.max())
    w /= w.sum()
    mean = w @ result.system.positions
    np.testing.assert_allclose(mean, 2.0, atol=0.1)
    # normalized targets on an exact path keep the normalizer near zero
    assert abs(result.log_z) < 0.2
    assert len(result.ess_trace) == 23


def test_smc_diffusion_single_particle_runs():
    fam, targets, kernels = _si_gaussian_line(1.0, 0.5, 1.0, 6)
    result = smc_diffusion(targets, kernels, 1, np.random.default_rng(17), mala_steps=1)
    assert result.system.positions.shape == (1, 2)
    assert np.isfinite(result.log_z)
