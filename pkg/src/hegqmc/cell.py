"""Cubic simulation cell, minimum-image convention, and periodic features.

Lengths are measured in units of r_s * a_B, so a cell holding N electrons at
unit density parameter has side L = (4 pi N / 3)^(1/3) and the mean
interparticle spacing is order one regardless of r_s.
"""

from __future__ import annotations

import dataclasses

import jax.numpy as jnp
import numpy as np


@dataclasses.dataclass(frozen=True)
class SimulationCell:
    """Cubic box with periodic boundary conditions."""

    n_particles: int
    length: float

    @classmethod
    def for_particles(cls, n_particles: int) -> "SimulationCell":
        """Cell side in scaled units: L = (4 pi N / 3)^(1/3)."""
        if n_particles < 1:
            raise ValueError(f"need at least one particle, got {n_particles}")
        length = float((4.0 * np.pi * n_particles / 3.0) ** (1.0 / 3.0))
        return cls(n_particles=n_particles, length=length)

    @property
    def volume(self) -> float:
        return self.length**3


def min_image(disp: jnp.ndarray, length: float) -> jnp.ndarray:
    """Map displacement components into (-L/2, L/2].

    The half-box tie maps to +L/2: d - L*ceil(d/L - 1/2) sends both +L/2 and
    -L/2 to +L/2, while the usual round/floor forms pick -L/2.
    """
    return disp - length * jnp.ceil(disp / length - 0.5)


def wrap_positions(positions: jnp.ndarray, length: float) -> jnp.ndarray:
    """Map coordinates into the canonical box [0, L)."""
    return positions - length * jnp.floor(positions / length)


def displacement_table(positions: jnp.ndarray, length: float) -> jnp.ndarray:
    """Minimum-image displacements r_i - r_j, shape (N, N, 3)."""
    raw = positions[:, None, :] - positions[None, :, :]
    return min_image(raw, length)


def fourier_features(disp: jnp.ndarray, length: float) -> jnp.ndarray:
    """Periodic embedding of a displacement: [sin, cos] of 2 pi d / L.

    Last axis doubles from 3 to 6; any L-periodic shift of the input leaves
    the output unchanged.
    """
    angles = (2.0 * jnp.pi / length) * disp
    return jnp.concatenate([jnp.sin(angles), jnp.cos(angles)], axis=-1)


def periodic_norm(disp: jnp.ndarray, length: float) -> jnp.ndarray:
    """Smooth periodic surrogate for |d|: || sin(pi d / L) ||_2.

    Agrees with (pi/L)|d| to leading order near zero, is L-periodic in each
    component, and vanishes exactly on lattice vectors.
    """
    s = jnp.sin(jnp.pi * disp / length)
    return jnp.linalg.norm(s, axis=-1)
