"""Single-particle spin-orbitals evaluable at complex backflow coordinates.

Two families: plane waves exp(i k.y) on momentum shells with a fixed total
momentum, and periodized Gaussians centered on BCC lattice sites. Both are
entire functions of the complex coordinates, so the determinant stays
complex-differentiable through the backflow map.
"""

from __future__ import annotations

import dataclasses
import itertools

import jax
import jax.numpy as jnp
import numpy as np

from .cell import SimulationCell, min_image
from .errors import ConfigurationError, InvalidInputError

PLANEWAVE = "planewave"
GAUSSIAN = "gaussian"

# Exhaustive open-shell subset search is capped; beyond this the deterministic
# paired-greedy rule below takes over.
_MAX_SUBSET_ENUMERATION = 200_000


@dataclasses.dataclass(frozen=True)
class OrbitalSet:
    """Immutable orbital metadata; the Gaussian width lives in the parameter set."""

    kind: str
    length: float
    spins: np.ndarray  # (n_orb,) +1 / -1, all up orbitals first
    nvecs: np.ndarray | None = None  # (n_orb, 3) int, plane waves
    sites: np.ndarray | None = None  # (n_orb, 3) float, Gaussians
    image_cutoff: int = 1
    alpha_init: float = 1.0
    k_tot: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))

    @property
    def n_orbitals(self) -> int:
        return len(self.spins)

    @property
    def n_up(self) -> int:
        return int(np.sum(self.spins == 1))

    @property
    def kvecs(self) -> np.ndarray:
        if self.nvecs is None:
            raise InvalidInputError("k-vectors only exist for plane-wave orbitals")
        return 2.0 * np.pi / self.length * self.nvecs

    def mu_encoding(self) -> np.ndarray:
        """Per-orbital quantum-number features for the orbital-factor network.

        Plane waves: the 3 integers n and the spin label; Gaussians: the 3
        fractional site coordinates and the spin label.
        """
        if self.kind == PLANEWAVE:
            head = self.nvecs.astype(float)
        else:
            head = self.sites / self.length
        return np.concatenate([head, self.spins[:, None].astype(float)], axis=1)


def _shell_sorted_nvecs(count_needed: int) -> np.ndarray:
    """Integer vectors sorted by (|n|^2, n_x, n_y, n_z)."""
    radius = int(np.ceil(count_needed ** (1.0 / 3.0))) + 2
    grid = np.arange(-radius, radius + 1)
    nvecs = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    norms = np.sum(nvecs**2, axis=1)
    order = np.lexsort((nvecs[:, 2], nvecs[:, 1], nvecs[:, 0], norms))
    return nvecs[order]


def _pick_open_shell(shell: np.ndarray, need: int, residual: np.ndarray) -> np.ndarray:
    """Subset of a degenerate shell minimizing |residual + sum(subset)|.

    Exhaustive over combinations when affordable, with lexicographic
    tie-break; otherwise pairs +-n to cancel momentum and resolves any
    leftover state greedily (deterministic either way).
    """
    import math

    n_states = len(shell)
    if math.comb(n_states, need) <= _MAX_SUBSET_ENUMERATION:
        best = None
        for combo in itertools.combinations(range(n_states), need):
            total = residual + shell[list(combo)].sum(axis=0)
            key = (float(total @ total), combo)
            if best is None or key < best[0]:
                best = (key, combo)
        return shell[list(best[1])]

    index = {tuple(v): i for i, v in enumerate(shell)}
    chosen: list[int] = []
    used = np.zeros(n_states, dtype=bool)
    for i in range(n_states):
        if len(chosen) >= need - 1:
            break
        if used[i]:
            continue
        j = index.get(tuple(-shell[i]))
        if j is not None and not used[j] and j != i:
            chosen.extend([i, j])
            used[i] = used[j] = True
    remaining = [i for i in range(n_states) if not used[i]]
    while len(chosen) < need:
        partial = residual + shell[chosen].sum(axis=0) if chosen else residual
        scores = [(float((partial + shell[i]) @ (partial + shell[i])), i) for i in remaining]
        _, pick = min(scores)
        chosen.append(pick)
        remaining.remove(pick)
        used[pick] = True
    return shell[sorted(chosen)]


def fill_shells(
    cell: SimulationCell,
    n_up: int,
    n_down: int,
    k_tot_target: np.ndarray | None = None,
) -> OrbitalSet:
    """Lowest-|k|^2 plane-wave filling with deterministic shell resolution.

    Closed shells take the full degenerate set; an open shell takes the
    subset minimizing the distance of the running total momentum to the
    target (spins resolved in order: up first, then down against the
    combined residual).
    """
    if n_up < 0 or n_down < 0:
        raise InvalidInputError("spin counts must be nonnegative")
    if n_up + n_down != cell.n_particles:
        raise InvalidInputError(
            f"orbital count {n_up}+{n_down} must match particle count {cell.n_particles}"
        )
    target = np.zeros(3) if k_tot_target is None else np.asarray(k_tot_target, dtype=float)

    chosen: list[np.ndarray] = []
    spins: list[int] = []
    running = -target.copy()  # residual in units of 2 pi / L
    for spin, count in ((1, n_up), (-1, n_down)):
        if count == 0:
            continue
        ordered = _shell_sorted_nvecs(count)
        norms = np.sum(ordered**2, axis=1)
        last_norm = norms[count - 1]
        full_prefix = int(np.searchsorted(norms, last_norm))
        closed = ordered[:full_prefix]
        shell = ordered[norms == last_norm]
        need = count - full_prefix
        if need == len(shell):
            picked = shell
        else:
            picked = _pick_open_shell(shell, need, running + closed.sum(axis=0))
        block = np.concatenate([closed, picked], axis=0)
        running += block.sum(axis=0)
        chosen.append(block)
        spins.extend([spin] * count)

    nvecs = np.concatenate(chosen, axis=0)
    achieved = 2.0 * np.pi / cell.length * (running + target)
    return OrbitalSet(
        kind=PLANEWAVE,
        length=cell.length,
        spins=np.array(spins, dtype=int),
        nvecs=nvecs,
        k_tot=achieved,
    )


def bcc_sites(cell: SimulationCell, polarized: bool) -> OrbitalSet:
    """BCC lattice sites tiling the cube: corner sublattice up, center down.

    Requires N = 2 m^3; polarized systems put all sites in one spin species.
    """
    n = cell.n_particles
    m = round((n / 2) ** (1.0 / 3.0))
    if 2 * m**3 != n:
        raise ConfigurationError(
            f"N={n} does not tile a BCC lattice in a cube: need N = 2*m^3 "
            f"(2, 16, 54, 128, ...)"
        )
    spacing = cell.length / m
    grid = np.arange(m) * spacing
    corners = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = corners + spacing / 2.0
    sites = np.concatenate([corners, centers], axis=0)
    if polarized:
        spins = np.ones(n, dtype=int)
    else:
        spins = np.concatenate([np.ones(m**3, dtype=int), -np.ones(m**3, dtype=int)])
    alpha_init = 2.0 * (m / cell.length) ** 2  # half a lattice spacing sets the width
    return OrbitalSet(
        kind=GAUSSIAN,
        length=cell.length,
        spins=spins,
        sites=sites,
        alpha_init=alpha_init,
    )


def _image_shifts(cutoff: int, length: float) -> np.ndarray:
    grid = np.arange(-cutoff, cutoff + 1) * length
    return np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)


def evaluate_orbital_matrix(
    orbitals: OrbitalSet,
    coords: jnp.ndarray,
    spins: jnp.ndarray,
    alpha: jnp.ndarray | None = None,
) -> jnp.ndarray:
    """Matrix phi_mu(y_i) delta_{s_mu, s_i}, shape (N, n_orb), complex.

    coords may be complex backflow positions; with particles and orbitals
    both ordered up-spin first the spin delta makes the matrix block
    diagonal, so the determinant factorizes over spin species.
    """
    if len(spins) != orbitals.n_orbitals:
        raise InvalidInputError(
            f"{len(spins)} particles cannot fill {orbitals.n_orbitals} orbitals"
        )
    coords = jnp.asarray(coords)
    if not jnp.iscomplexobj(coords):
        # lax.complex keeps the reverse-mode cotangent exact and silent
        coords = jax.lax.complex(coords, jnp.zeros_like(coords))
    delta = jnp.asarray(orbitals.spins)[None, :] == jnp.asarray(spins)[:, None]

    if orbitals.kind == PLANEWAVE:
        phases = coords @ jnp.asarray(orbitals.kvecs).T  # (N, n_orb) complex
        values = jnp.exp(1j * phases)
    else:
        if alpha is None:
            raise InvalidInputError("Gaussian orbitals need the width parameter")
        # Wrap the real part to the nearest image of each site; the shift is
        # an exact lattice vector held out of differentiation, which makes
        # the truncated image sum exactly periodic in the real coordinates.
        rel = coords[:, None, :] - jnp.asarray(orbitals.sites)[None, :, :]
        wrap = jax.lax.stop_gradient(rel.real - min_image(rel.real, orbitals.length))
        rel = rel - wrap
        shifts = jnp.asarray(_image_shifts(orbitals.image_cutoff, orbitals.length))
        sq = jnp.sum((rel[:, :, None, :] + shifts[None, None, :, :]) ** 2, axis=-1)
        values = jnp.sum(jnp.exp(-alpha * sq), axis=-1)

    return jnp.where(delta, values, 0.0)
