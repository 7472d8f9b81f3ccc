"""g(r), S(k), and blocking analysis against enumerable oracles."""

import jax
import numpy as np
import pytest

from hegqmc.cell import SimulationCell
from hegqmc.errors import EmptyAccumulatorError
from hegqmc.observables import (
    HistogramAccumulator,
    StructureFactorAccumulator,
    accumulate_g2,
    accumulate_sk,
    blocking_error,
    normalize_g2,
    pair_distances,
    reciprocal_vectors,
    structure_factor,
)
from hegqmc.orbitals import bcc_sites


def uniform_batch(cell, n_samples, seed=0):
    key = jax.random.PRNGKey(seed)
    return np.asarray(
        jax.random.uniform(key, (n_samples, cell.n_particles, 3)) * cell.length
    )


def test_two_particle_single_count_in_correct_bin():
    cell = SimulationCell.for_particles(2)
    hist = HistogramAccumulator.for_cell(cell, n_bins=20)
    d = 0.37 * cell.length
    positions = np.array([[0.1, 0.2, 0.3], [0.1 + d, 0.2, 0.3]])
    accumulate_g2(positions, hist, cell.length)
    counts = hist.counts
    assert counts.sum() == 1
    expected_bin = np.searchsorted(hist.edges, d) - 1
    assert counts[expected_bin] == 1


def test_counts_bounded_by_pair_number():
    cell = SimulationCell.for_particles(6)
    hist = HistogramAccumulator.for_cell(cell)
    batch = uniform_batch(cell, 10)
    accumulate_g2(batch, hist, cell.length)
    assert hist.n_samples == 10
    for row in hist.rows:
        assert row.sum() <= 6 * 5 / 2


def test_pair_distances_min_image():
    cell = SimulationCell.for_particles(2)
    length = cell.length
    positions = np.array([[0.05, 0.0, 0.0], [length - 0.05, 0.0, 0.0]])
    d = pair_distances(positions, length)
    assert d[0] == pytest.approx(0.1)


def test_uniform_gas_g_equals_one_within_3sigma():
    cell = SimulationCell.for_particles(8)
    hist = HistogramAccumulator.for_cell(cell, n_bins=25)
    accumulate_g2(uniform_batch(cell, 400, seed=1), hist, cell.length)
    centers, g, err = normalize_g2(hist, cell)
    assert np.all(g >= 0.0)
    # skip the innermost bins where expected counts are <O(1)
    usable = centers > 0.15 * cell.length
    deviations = np.abs(g[usable] - 1.0) / err[usable]
    assert np.max(deviations) < 3.0, f"worst {np.max(deviations):.2f} sigma"

    # finite positive integral of the normalized estimator
    shell = 4.0 * np.pi / 3.0 * np.diff(hist.edges**3)
    integral = (cell.n_particles - 1) / cell.volume * np.sum(g * shell)
    assert np.isfinite(integral) and integral > 0.0


def test_g2_translation_invariance_exact():
    cell = SimulationCell.for_particles(5)
    batch = uniform_batch(cell, 6, seed=2)
    shift = np.array([0.31, -0.12, 0.57]) * cell.length

    hist_a = HistogramAccumulator.for_cell(cell)
    accumulate_g2(batch, hist_a, cell.length)
    hist_b = HistogramAccumulator.for_cell(cell)
    accumulate_g2((batch + shift) % cell.length, hist_b, cell.length)
    np.testing.assert_allclose(hist_a.counts, hist_b.counts, atol=0)


def test_reciprocal_vectors_symmetric_and_bounded():
    nv = reciprocal_vectors(2.0)
    norms = np.sum(nv**2, axis=1)
    assert np.all(norms > 0) and np.all(norms <= 4)
    # closed under the cubic point group: negation and axis permutations
    as_set = {tuple(v) for v in nv}
    for v in nv:
        assert tuple(-v) in as_set
        assert tuple(v[[1, 0, 2]]) in as_set
        assert tuple(v[[2, 1, 0]]) in as_set


def test_single_particle_structure_factor_bound():
    cell = SimulationCell.for_particles(1)
    acc = StructureFactorAccumulator.for_cell(cell, cutoff=2.0)
    accumulate_sk(uniform_batch(cell, 200, seed=3), acc)
    rho = np.asarray(acc.rows)
    np.testing.assert_allclose(np.abs(rho) ** 2, 1.0, atol=1e-12)
    _, s, _ = structure_factor(acc, cell)
    assert np.all(s >= -1e-12)
    assert np.all(s <= 1.0 + 1e-12)


def test_uniform_gas_structure_factor_is_one():
    cell = SimulationCell.for_particles(8)
    acc = StructureFactorAccumulator.for_cell(cell, cutoff=3.0)
    accumulate_sk(uniform_batch(cell, 600, seed=4), acc)
    _, s, err = structure_factor(acc, cell)
    deviations = np.abs(s - 1.0) / err
    assert np.max(deviations) < 3.0, f"worst {np.max(deviations):.2f} sigma"
    assert np.all(s >= -3.0 * err)


def test_structure_factor_translation_invariance():
    cell = SimulationCell.for_particles(5)
    batch = uniform_batch(cell, 40, seed=5)
    shift = np.array([0.2, 0.4, -0.3]) * cell.length
    for raw in (False, True):
        acc_a = StructureFactorAccumulator.for_cell(cell, cutoff=2.0, raw=raw)
        accumulate_sk(batch, acc_a)
        acc_b = StructureFactorAccumulator.for_cell(cell, cutoff=2.0, raw=raw)
        accumulate_sk(batch + shift, acc_b)
        _, s_a, _ = structure_factor(acc_a, cell)
        _, s_b, _ = structure_factor(acc_b, cell)
        np.testing.assert_allclose(s_a, s_b, atol=1e-10)


def test_perfect_bcc_delta_pattern():
    """A noiseless BCC configuration is a delta comb in the raw estimator:
    S = N exactly on the BCC reciprocal lattice and 0 elsewhere."""
    cell = SimulationCell.for_particles(16)
    sites = np.asarray(bcc_sites(cell, polarized=False).sites)
    m = 2
    acc = StructureFactorAccumulator.for_cell(cell, cutoff=4.0, raw=True)
    accumulate_sk(sites, acc)

    rho = np.asarray(acc.rows)[0]
    per_k = np.abs(rho) ** 2 / cell.n_particles
    for nvec, value in zip(acc.nvecs, per_k):
        on_cubic = np.all(nvec % m == 0)
        p = nvec // m
        bragg = on_cubic and (p.sum() % 2 == 0)
        expected = float(cell.n_particles) if bragg else 0.0
        assert value == pytest.approx(expected, abs=1e-9), f"n={nvec}"
    assert per_k.max() == pytest.approx(16.0, abs=1e-9)


def test_blocking_error_iid_matches_naive():
    rng = np.random.default_rng(6)
    x = rng.normal(size=4096)
    naive = np.std(x, ddof=1) / np.sqrt(x.size)
    err = blocking_error(x)
    assert 0.8 * naive < err < 1.4 * naive


def test_blocking_error_detects_correlation():
    rng = np.random.default_rng(7)
    independent = rng.normal(size=256)
    correlated = np.repeat(independent, 16)
    target = np.std(independent, ddof=1) / np.sqrt(independent.size)
    naive = np.std(correlated, ddof=1) / np.sqrt(correlated.size)
    err = blocking_error(correlated)
    assert err > 2.0 * naive
    assert 0.6 * target < err < 1.6 * target


def test_empty_accumulators_raise():
    cell = SimulationCell.for_particles(3)
    with pytest.raises(EmptyAccumulatorError):
        normalize_g2(HistogramAccumulator.for_cell(cell), cell)
    with pytest.raises(EmptyAccumulatorError):
        structure_factor(StructureFactorAccumulator.for_cell(cell), cell)
    with pytest.raises(EmptyAccumulatorError):
        blocking_error(np.array([1.0]))
