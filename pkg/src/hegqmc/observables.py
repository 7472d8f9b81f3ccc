"""Pair correlation g(r), static structure factor S(k), blocking errors.

g(r) counts minimum-image pair distances up to L/2 (the largest radius whose
spherical shell fits the cube without clipping).  S(k) lives on the cell's
reciprocal lattice and is averaged over cubic-symmetry orbits; the default
estimator subtracts |<rho_k>|^2 so phases tied to the fixed total momentum
cancel, with the raw <|rho_k|^2>/N form behind a flag (a perfect crystal is
a delta pattern only in the raw form).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .cell import SimulationCell, min_image
from .errors import EmptyAccumulatorError

DEFAULT_RADIAL_BINS = 100
DEFAULT_K_CUTOFF = 4.0
MIN_BLOCKS = 8


def blocking_error(samples: np.ndarray) -> float:
    """Error of the mean for correlated samples by recursive pair averaging.

    The naive error grows with block size until blocks decorrelate; the
    first plateau (growth within one standard error of the error estimate)
    is returned, falling back to the most conservative level.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise EmptyAccumulatorError(f"need at least 2 samples, have {x.size}")
    errors, counts = [], []
    while x.size >= 2:
        n = x.size
        errors.append(float(np.std(x, ddof=1) / np.sqrt(n)))
        counts.append(n)
        if n < 2 * MIN_BLOCKS:
            break
        if n % 2 == 1:
            x = x[:-1]
        x = 0.5 * (x[0::2] + x[1::2])
    for level in range(len(errors) - 1):
        uncertainty = errors[level] / np.sqrt(2.0 * (counts[level] - 1))
        if errors[level + 1] - errors[level] <= uncertainty:
            return errors[level]
    return max(errors)


@dataclasses.dataclass
class HistogramAccumulator:
    """Per-sample pair-distance counts on radial bins over (0, L/2]."""

    edges: np.ndarray
    rows: list = dataclasses.field(default_factory=list)

    @classmethod
    def for_cell(
        cls, cell: SimulationCell, n_bins: int = DEFAULT_RADIAL_BINS
    ) -> "HistogramAccumulator":
        return cls(edges=np.linspace(0.0, cell.length / 2.0, n_bins + 1))

    @property
    def n_samples(self) -> int:
        return len(self.rows)

    @property
    def counts(self) -> np.ndarray:
        if not self.rows:
            return np.zeros(self.edges.size - 1)
        return np.sum(self.rows, axis=0)


def pair_distances(positions: np.ndarray, length: float) -> np.ndarray:
    """Minimum-image distances of all unordered pairs, shape (N(N-1)/2,)."""
    pos = np.asarray(positions)
    n = pos.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    disp = np.asarray(min_image(pos[iu] - pos[ju], length))
    return np.linalg.norm(disp, axis=1)


def accumulate_g2(
    positions: np.ndarray, hist: HistogramAccumulator, length: float
) -> HistogramAccumulator:
    """Add one configuration (or a batch, leading axis) of pair counts."""
    pos = np.asarray(positions)
    batch = pos[None] if pos.ndim == 2 else pos
    for config in batch:
        dists = pair_distances(config, length)
        counts, _ = np.histogram(dists, bins=hist.edges)
        hist.rows.append(counts)
    return hist


def normalize_g2(
    hist: HistogramAccumulator, cell: SimulationCell
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(r centers, g values, blocking errors).

    g = counts / (n_samples * N(N-1)/2 * V_shell/V) with the exact
    spherical-shell volume, which is unclipped for r <= L/2.
    """
    if hist.n_samples == 0:
        raise EmptyAccumulatorError("no samples accumulated")
    n = cell.n_particles
    shell = 4.0 * np.pi / 3.0 * np.diff(hist.edges**3)
    norm = (n * (n - 1) / 2.0) * shell / cell.volume
    rows = np.asarray(hist.rows) / norm
    g = rows.mean(axis=0)
    if hist.n_samples == 1:
        err = np.full_like(g, np.nan)
    else:
        err = np.array([blocking_error(rows[:, b]) for b in range(rows.shape[1])])
    centers = 0.5 * (hist.edges[:-1] + hist.edges[1:])
    return centers, g, err


def reciprocal_vectors(cutoff: float) -> np.ndarray:
    """Integer n with 0 < |n| <= cutoff, closed under the cubic point group."""
    m = int(np.floor(cutoff))
    grid = np.arange(-m, m + 1)
    nv = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    norms = np.sum(nv**2, axis=1)
    keep = (norms > 0) & (norms <= cutoff**2 + 1e-12)
    nv = nv[keep]
    order = np.lexsort((nv[:, 2], nv[:, 1], nv[:, 0], np.sum(nv**2, axis=1)))
    return nv[order]


@dataclasses.dataclass
class StructureFactorAccumulator:
    """Per-sample rho_k = sum_i exp(i k.r_i) on a symmetric k-list."""

    nvecs: np.ndarray
    kvecs: np.ndarray
    rows: list = dataclasses.field(default_factory=list)
    raw: bool = False

    @classmethod
    def for_cell(
        cls,
        cell: SimulationCell,
        cutoff: float = DEFAULT_K_CUTOFF,
        raw: bool = False,
    ) -> "StructureFactorAccumulator":
        nv = reciprocal_vectors(cutoff)
        return cls(nvecs=nv, kvecs=2.0 * np.pi / cell.length * nv, raw=raw)

    @property
    def n_samples(self) -> int:
        return len(self.rows)


def accumulate_sk(
    positions: np.ndarray, acc: StructureFactorAccumulator
) -> StructureFactorAccumulator:
    pos = np.asarray(positions)
    batch = pos[None] if pos.ndim == 2 else pos
    for config in batch:
        phases = config @ acc.kvecs.T
        acc.rows.append(np.exp(1j * phases).sum(axis=0))
    return acc


def _orbit_labels(nvecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group k-vectors by cubic-symmetry orbit (sorted |components|)."""
    keys = np.sort(np.abs(nvecs), axis=1)
    _, labels = np.unique(keys, axis=0, return_inverse=True)
    return labels, np.unique(labels)


def _sk_estimate(rho: np.ndarray, n_particles: int, raw: bool) -> np.ndarray:
    second = np.mean(np.abs(rho) ** 2, axis=0)
    if raw:
        return second / n_particles
    first = np.abs(np.mean(rho, axis=0)) ** 2
    return (second - first) / n_particles


def structure_factor(
    acc: StructureFactorAccumulator,
    cell: SimulationCell,
    n_error_blocks: int = 32,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(|k| per orbit, S per orbit, errors), orbits sorted by |k|.

    Errors come from the spread of per-block estimates; with fewer samples
    than 2 blocks they are NaN.
    """
    if acc.n_samples == 0:
        raise EmptyAccumulatorError("no samples accumulated")
    rho = np.asarray(acc.rows)
    n = cell.n_particles
    labels, orbit_ids = _orbit_labels(acc.nvecs)

    per_k = _sk_estimate(rho, n, acc.raw)
    k_norms = np.linalg.norm(acc.kvecs, axis=1)
    values = np.array([per_k[labels == o].mean() for o in orbit_ids])
    k_out = np.array([k_norms[labels == o].mean() for o in orbit_ids])

    n_blocks = min(n_error_blocks, acc.n_samples)
    if n_blocks >= 2:
        splits = np.array_split(np.arange(acc.n_samples), n_blocks)
        block_vals = np.stack(
            [
                np.array(
                    [
                        _sk_estimate(rho[idx], n, acc.raw)[labels == o].mean()
                        for o in orbit_ids
                    ]
                )
                for idx in splits
            ]
        )
        errors = block_vals.std(axis=0, ddof=1) / np.sqrt(n_blocks)
    else:
        errors = np.full_like(values, np.nan)

    order = np.argsort(k_out, kind="stable")
    return k_out[order], values[order], errors[order]
