"""Metropolis sampler: detailed balance, uniformity, equivariance, tuning."""

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy.stats import chi2

from hegqmc.batching import chunked_vmap
from hegqmc.cell import SimulationCell
from hegqmc.orbitals import fill_shells
from hegqmc.sampler import (
    MetropolisSampler,
    SamplerConfig,
    acceptance_probability,
    all_particle_move,
    default_initial_step,
    tune_step_size,
)
from hegqmc.wavefunction import local_energy, make_bare_model


def constant_log_psi(params, positions):
    """|Psi| = 1 everywhere: the chain must sample the uniform density."""
    return jax.lax.complex(jnp.zeros(()), jnp.zeros(()))


def test_acceptance_probability_bounds():
    assert acceptance_probability(0.0) == 1.0
    assert acceptance_probability(5.0) == 1.0
    assert acceptance_probability(-1.0) == pytest.approx(np.exp(-2.0))


def test_small_step_acceptance_near_one():
    cell = SimulationCell.for_particles(4)
    orbs = fill_shells(cell, 2, 2)
    model = make_bare_model(cell, 1.0, orbs)
    cfg = SamplerConfig(n_walkers=16, initial_step=1e-7)
    sampler = MetropolisSampler(cell, model.log_psi_fn, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(0))
    rates = []
    for _ in range(5):
        ens, rate = sampler.sweep(ens, {})
        rates.append(rate)
    assert np.mean(rates) > 0.999


def test_detailed_balance_discrete_toy():
    """Exhaustive check of pi_i P_ij = pi_j P_ji on an enumerable chain.

    The toy uses the production acceptance rule on a ring of states with a
    symmetric nearest-neighbour proposal, so the balance property of the
    move kernel is tested in isolation.
    """
    rng = np.random.default_rng(3)
    n_states = 12
    log_modulus = rng.normal(size=n_states)
    pi = np.exp(2.0 * log_modulus)
    pi /= pi.sum()

    proposal = np.zeros((n_states, n_states))
    for i in range(n_states):
        proposal[i, (i - 1) % n_states] = 0.5
        proposal[i, (i + 1) % n_states] = 0.5

    transition = np.zeros_like(proposal)
    for i in range(n_states):
        for j in range(n_states):
            if i == j or proposal[i, j] == 0.0:
                continue
            accept = acceptance_probability(log_modulus[j] - log_modulus[i])
            transition[i, j] = proposal[i, j] * accept
        transition[i, i] = 1.0 - transition[i].sum()

    assert np.all(transition >= 0.0)
    np.testing.assert_allclose(transition.sum(axis=1), 1.0, atol=1e-14)
    flow = pi[:, None] * transition
    np.testing.assert_allclose(flow, flow.T, atol=1e-15)


def test_uniform_sampling_chi_squared():
    """Constant |Psi|: marginal of every coordinate is uniform (95% chi^2)."""
    cell = SimulationCell.for_particles(1)
    cfg = SamplerConfig(
        n_walkers=64, n_burn_in=20, initial_step=0.4 * cell.length
    )
    sampler = MetropolisSampler(cell, constant_log_psi, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(7))
    ens = sampler.burn_in(ens, {})
    samples = []
    for _ in range(60):
        ens, _ = sampler.advance(ens, {}, n_sweeps=2)
        samples.append(np.asarray(ens.positions[:, 0, :]))
    coords = np.concatenate(samples, axis=0)
    assert np.all(coords >= 0.0) and np.all(coords < cell.length)

    # coordinates are independent under the uniform target, so the per-axis
    # statistics add into one chi^2 with 3*(n_bins-1) degrees of freedom
    n_bins = 10
    statistic = 0.0
    for axis in range(3):
        counts, _ = np.histogram(
            coords[:, axis], bins=n_bins, range=(0.0, cell.length)
        )
        expected = coords.shape[0] / n_bins
        statistic += np.sum((counts - expected) ** 2 / expected)
    threshold = chi2.ppf(0.95, df=3 * (n_bins - 1))
    assert statistic < threshold, f"chi2 {statistic:.1f} vs {threshold:.1f}"


def test_exchange_invariance_permuted_trajectories():
    """Permuted start + permuted noise -> permuted trajectory.

    |Psi|^2 is exchange invariant, so the all-particle kernel driven with
    permuted noise and shared uniforms must keep the two walkers exact
    relabelings of each other.
    """
    n = 4
    cell = SimulationCell.for_particles(n)
    orbs = fill_shells(cell, 2, 2)
    model = make_bare_model(cell, 1.0, orbs)
    perm = np.array([1, 0, 3, 2])
    assert np.array_equal(orbs.spins[perm], orbs.spins), "spin-sector perm"

    batch_lm = jax.jit(chunked_vmap(lambda x: model.log_psi_fn({}, x).real, 8))
    key = jax.random.PRNGKey(11)
    base = jax.random.uniform(key, (n, 3)) * cell.length
    positions = jnp.stack([base, base[perm]])
    log_modulus = batch_lm(positions)
    step = 0.3

    for t in range(25):
        k_noise, k_u, key = jax.random.split(jax.random.PRNGKey(100 + t), 3)
        noise_a = jax.random.normal(k_noise, (n, 3)) * step
        noise = jnp.stack([noise_a, noise_a[perm]])
        logu_a = jnp.log(jax.random.uniform(k_u, ()))
        logu = jnp.stack([logu_a, logu_a])
        positions, log_modulus, accepted, singular = all_particle_move(
            positions, log_modulus, noise, logu, batch_lm, cell.length
        )
        assert bool(accepted[0]) == bool(accepted[1])
        assert not bool(singular.any())
        np.testing.assert_allclose(
            np.asarray(positions[1]),
            np.asarray(positions[0])[perm],
            atol=1e-12,
        )


def test_tune_step_size_fixed_point_and_clamp():
    length = 3.0
    assert tune_step_size(0.2, 0.5, 0.5, length) == pytest.approx(0.2)
    step = 0.2
    for _ in range(200):
        step = tune_step_size(step, 1.0, 0.5, length)
    assert step == pytest.approx(0.5 * length)
    step = 0.2
    for _ in range(200):
        step = tune_step_size(step, 0.0, 0.5, length)
    assert step == pytest.approx(1e-4 * length)


def test_burn_in_reaches_target_acceptance_window():
    cell = SimulationCell.for_particles(14)
    orbs = fill_shells(cell, 7, 7)
    model = make_bare_model(cell, 1.0, orbs)
    cfg = SamplerConfig(n_walkers=16, n_burn_in=120)
    sampler = MetropolisSampler(cell, model.log_psi_fn, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(2))
    ens = sampler.burn_in(ens, {})
    rates = []
    for _ in range(20):
        ens, rate = sampler.sweep(ens, {})
        rates.append(rate)
    assert 0.35 < np.mean(rates) < 0.65


def test_zero_variance_free_gas_through_sampler():
    """Sampled local energies of the free-gas determinant are all exactly
    the closed-shell kinetic sum, independent of chain quality."""
    cell = SimulationCell.for_particles(14)
    orbs = fill_shells(cell, 7, 7)
    rs = 1.0
    model = make_bare_model(cell, rs, orbs)
    cfg = SamplerConfig(n_walkers=6, n_burn_in=5)
    sampler = MetropolisSampler(cell, model.log_psi_fn, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(5))
    ens = sampler.burn_in(ens, {})

    exact = np.sum(np.sum(np.asarray(orbs.nvecs) ** 2, axis=1)) * (
        2.0 * np.pi / cell.length
    ) ** 2 / (2.0 * rs**2)
    for _ in range(3):
        ens, _ = sampler.advance(ens, {})
        for w in range(ens.n_walkers):
            e = local_energy(model, {}, ens.positions[w], None)
            assert abs(complex(e).real - exact) / abs(exact) < 1e-10
            assert abs(complex(e).imag) / abs(exact) < 1e-10


def test_reproducibility_bit_identical():
    cell = SimulationCell.for_particles(4)
    orbs = fill_shells(cell, 2, 2)
    model = make_bare_model(cell, 1.0, orbs)
    cfg = SamplerConfig(n_walkers=8, n_burn_in=10)

    def run():
        sampler = MetropolisSampler(cell, model.log_psi_fn, cfg)
        ens = sampler.init_ensemble({}, jax.random.PRNGKey(42))
        ens = sampler.burn_in(ens, {})
        for _ in range(5):
            ens, _ = sampler.advance(ens, {})
        return np.asarray(ens.positions)

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_singular_proposals_rejected_and_counted():
    """Non-finite log amplitudes reject the move and count separately."""
    cell = SimulationCell.for_particles(1)
    half = cell.length / 2.0

    def lumpy_log_psi(params, positions):
        bad = positions[0, 0] > half
        re = jnp.where(bad, jnp.nan, 0.0)
        return jax.lax.complex(re, jnp.zeros(()))

    cfg = SamplerConfig(n_walkers=32, initial_step=0.4 * cell.length)
    sampler = MetropolisSampler(cell, lumpy_log_psi, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(9))
    ens.positions = ens.positions * 0.45
    ens = sampler.refresh(ens, {})
    assert bool(jnp.all(jnp.isfinite(ens.log_modulus)))
    for _ in range(10):
        ens, _ = sampler.sweep(ens, {})
    assert ens.n_singular > 0
    assert ens.n_accepted + ens.n_singular <= ens.n_proposed
    assert np.all(np.asarray(ens.positions[:, 0, 0]) <= half)


def test_all_particle_mode_sweep():
    cell = SimulationCell.for_particles(4)
    orbs = fill_shells(cell, 2, 2)
    model = make_bare_model(cell, 1.0, orbs)
    cfg = SamplerConfig(n_walkers=8, move_mode="all", initial_step=0.1)
    sampler = MetropolisSampler(cell, model.log_psi_fn, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(1))
    ens, rate = sampler.sweep(ens, {})
    assert ens.n_proposed == 8
    assert 0.0 <= rate <= 1.0


def test_default_initial_step_scaling():
    cell = SimulationCell.for_particles(14)
    expected = 0.2 * (4.0 * np.pi / 3.0) ** (1.0 / 3.0)
    assert default_initial_step(cell) == pytest.approx(expected)


def test_positions_stay_wrapped():
    cell = SimulationCell.for_particles(2)
    cfg = SamplerConfig(n_walkers=16, initial_step=0.8 * cell.length)
    sampler = MetropolisSampler(cell, constant_log_psi, cfg)
    ens = sampler.init_ensemble({}, jax.random.PRNGKey(3))
    for _ in range(10):
        ens, _ = sampler.sweep(ens, {})
    pos = np.asarray(ens.positions)
    assert np.all(pos >= 0.0) and np.all(pos < cell.length)
