"""Ewald summation for the periodic Coulomb interaction with uniform background.

Energies are reported in scaled units where the Hamiltonian potential term is
(1/r_s) * potential_energy(scaled positions): the returned quantity has no
density dependence of its own, so Hartree-unit potentials scale exactly as
1/r_s.

The total for N unit charges plus neutralizing background splits into

    U = U_real + U_recip + U_const,

    U_real  = 1/2 sum_{i != j} sum_n erfc(kappa |r_ij + n L|) / |r_ij + n L|
    U_recip = sum_{k in half space} w_k (|rho_k|^2 - N)
    U_const = -pi N (N-1) / (2 kappa^2 V) + N xi / 2

with rho_k = sum_i exp(i k . r_i) and xi the Madelung constant (interaction
of one charge with its own images and background). Screening width and
cutoffs are derived from a single accuracy tolerance.
"""

from __future__ import annotations

import dataclasses

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import erfc
from scipy.special import erfc as np_erfc
from scipy.special import erfcinv

from .cell import SimulationCell, displacement_table

# Real-space images n in {-1,0,1}^3 of min-imaged displacements cover every
# pair separation below 1.5 L; kappa is chosen so the remainder is below
# tolerance there.
_REAL_COVERAGE = 1.5
_MADELUNG_IMAGE_RANGE = 4


@dataclasses.dataclass(frozen=True)
class EwaldContext:
    """Precomputed screening parameters, image shifts, and k-space table."""

    length: float
    volume: float
    kappa: float
    madelung: float
    real_shifts: jnp.ndarray  # (27, 3)
    kvecs: jnp.ndarray  # (n_k, 3), one of each +-k pair, k != 0
    kweights: jnp.ndarray  # (n_k,), (4 pi / (V k^2)) exp(-k^2 / 4 kappa^2)


def _half_space(nvecs: np.ndarray) -> np.ndarray:
    """Lexicographically positive representatives of +-n pairs."""
    n0, n1, n2 = nvecs[:, 0], nvecs[:, 1], nvecs[:, 2]
    return (n0 > 0) | ((n0 == 0) & (n1 > 0)) | ((n0 == 0) & (n1 == 0) & (n2 > 0))


def build_ewald(cell: SimulationCell, tolerance: float = 1e-12) -> EwaldContext:
    """Choose kappa and cutoffs for a target per-term accuracy."""
    if not 0 < tolerance < 1e-2:
        raise ValueError(f"tolerance must be in (0, 1e-2), got {tolerance}")
    L = cell.length
    volume = cell.volume
    kappa = float(erfcinv(tolerance)) / (_REAL_COVERAGE * L)

    # Gaussian tail of the reciprocal sum: (2 kappa / sqrt(pi)) erfc(K / 2 kappa).
    k_cut = 2.0 * kappa * float(erfcinv(np.sqrt(np.pi) * tolerance / (2.0 * kappa)))
    n_max = int(np.ceil(k_cut * L / (2.0 * np.pi)))
    grid = np.arange(-n_max, n_max + 1)
    nvecs = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    kall = 2.0 * np.pi / L * nvecs
    k2 = np.sum(kall**2, axis=1)
    keep = _half_space(nvecs) & (k2 <= k_cut**2)
    kvecs = kall[keep]
    k2 = k2[keep]
    kweights = 4.0 * np.pi / (volume * k2) * np.exp(-k2 / (4.0 * kappa**2))

    shift_grid = np.arange(-1, 2)
    shifts = L * np.stack(
        np.meshgrid(shift_grid, shift_grid, shift_grid, indexing="ij"), axis=-1
    ).reshape(-1, 3)

    # Madelung constant with a wider image set; erfc terms there are far below
    # any practical tolerance, so xi is limited only by the k-space cutoff.
    mrange = np.arange(-_MADELUNG_IMAGE_RANGE, _MADELUNG_IMAGE_RANGE + 1)
    mvecs = np.stack(np.meshgrid(mrange, mrange, mrange, indexing="ij"), axis=-1).reshape(-1, 3)
    mnorm = np.linalg.norm(mvecs, axis=1) * L
    mnorm = mnorm[mnorm > 0]
    madelung = float(
        np.sum(np_erfc(kappa * mnorm) / mnorm)
        + 2.0 * np.sum(kweights)
        - 2.0 * kappa / np.sqrt(np.pi)
        - np.pi / (kappa**2 * volume)
    )

    return EwaldContext(
        length=L,
        volume=volume,
        kappa=kappa,
        madelung=madelung,
        real_shifts=jnp.asarray(shifts),
        kvecs=jnp.asarray(kvecs),
        kweights=jnp.asarray(kweights),
    )


def potential_energy(positions: jnp.ndarray, ctx: EwaldContext) -> jnp.ndarray:
    """Total Coulomb energy of unit charges plus background, scaled units.

    jit/vmap friendly; positions shape (N, 3). The Madelung term N xi / 2 is
    included, so a single particle has energy xi / 2 regardless of position.
    """
    n = positions.shape[0]
    disp = displacement_table(positions, ctx.length)  # (N, N, 3)
    image_disp = disp[:, :, None, :] + ctx.real_shifts[None, None, :, :]
    dist = jnp.linalg.norm(image_disp, axis=-1)  # (N, N, 27)
    offdiag = ~jnp.eye(n, dtype=bool)[:, :, None]
    safe = jnp.where(offdiag, dist, 1.0)
    real = 0.5 * jnp.sum(jnp.where(offdiag, erfc(ctx.kappa * safe) / safe, 0.0))

    phases = positions @ ctx.kvecs.T  # (N, n_k)
    rho = jnp.sum(jnp.exp(1j * phases), axis=0)
    recip = jnp.sum(ctx.kweights * (jnp.abs(rho) ** 2 - n))

    const = -jnp.pi * n * (n - 1) / (2.0 * ctx.kappa**2 * ctx.volume) + 0.5 * n * ctx.madelung
    return real + recip + const
