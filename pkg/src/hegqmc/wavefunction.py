"""Wavefunction assembly: log Psi, coordinate derivatives, local energy.

Psi(X) = exp[sum_mu J(Y, mu)] * prod_spin det[phi_mu(y_i)] with y = r + delta_r
the complex backflow coordinates. The orbital factor J multiplies column mu
of the Slater matrix by exp[J(Y, mu)]; by multilinearity that adds
sum_mu J(Y, mu) to the log determinant.

All evaluation functions are pure in (params, positions) and differentiable
by machine; derivatives are exact (reverse mode for gradients, forward over
reverse for the Laplacian).
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .backflow import (
    BackflowConfig,
    apply_mlp,
    backflow_displacements,
    init_backflow_params,
    init_mlp,
)
from .cell import SimulationCell, fourier_features
from .errors import SingularWavefunctionError
from .ewald import EwaldContext, potential_energy
from .orbitals import GAUSSIAN, OrbitalSet, evaluate_orbital_matrix

Params = Any

_JNET_COORD_FEATURES = 9  # 6 fourier of Re(y) + 3 Im(y)


class LogAmplitude(NamedTuple):
    log_modulus: float
    phase: float  # radians in (-pi, pi]


class DerivativeBundle(NamedTuple):
    grad_log: jnp.ndarray  # (N, 3) complex
    laplacian_log: jnp.ndarray  # complex scalar
    param_log_derivs: jnp.ndarray  # (n_params,) complex


@dataclasses.dataclass(frozen=True)
class WavefunctionModel:
    """A wavefunction bound to a system: parameter init plus log Psi."""

    cell: SimulationCell
    rs: float
    orbitals: OrbitalSet
    spins: np.ndarray
    init_params: Callable[[jax.Array], Params]
    log_psi_fn: Callable[[Params, jnp.ndarray], jnp.ndarray]
    name: str = "wavefunction"

    @property
    def n_particles(self) -> int:
        return self.cell.n_particles


def _log_block_determinants(matrix: jnp.ndarray) -> jnp.ndarray:
    """Complex log det of the spin-masked orbital matrix.

    The spin delta zeroes every cross-spin entry, so the pivoted
    factorization of the full matrix equals the product of the per-spin
    block determinants.
    """
    sign, logabs = jnp.linalg.slogdet(matrix)
    return logabs + 1j * jnp.angle(sign)


def _orbital_factor(
    jnet: list, y: jnp.ndarray, mu_encoding: jnp.ndarray, length: float
) -> jnp.ndarray:
    """J(Y, mu) = sum_i j(y_i, mu): per-orbital scalars, shape (n_orb,).

    The real network ingests the complex coordinate as the Fourier map of
    its real part plus the raw imaginary part, then the quantum-number
    encoding of mu.
    """
    coord_feats = jnp.concatenate(
        [fourier_features(y.real, length), y.imag], axis=-1
    )  # (N, 9)
    n, n_orb = coord_feats.shape[0], mu_encoding.shape[0]
    pair_inputs = jnp.concatenate(
        [
            jnp.broadcast_to(coord_feats[:, None, :], (n, n_orb, coord_feats.shape[1])),
            jnp.broadcast_to(mu_encoding[None, :, :], (n, n_orb, mu_encoding.shape[1])),
        ],
        axis=-1,
    )
    return jnp.sum(apply_mlp(jnet, pair_inputs)[..., 0], axis=0)


def make_neural_model(
    cell: SimulationCell,
    rs: float,
    orbitals: OrbitalSet,
    backflow_cfg: BackflowConfig | None = None,
    jnet_hidden: int = 32,
    particle_spins: np.ndarray | None = None,
) -> WavefunctionModel:
    """Neural backflow determinant with orbital factor."""
    cfg = backflow_cfg or BackflowConfig()
    spins = orbitals.spins.copy() if particle_spins is None else np.asarray(particle_spins)
    spins_dev = jnp.asarray(spins)
    mu_enc = jnp.asarray(orbitals.mu_encoding())
    length = cell.length
    is_gaussian = orbitals.kind == GAUSSIAN

    def init_params(key: jax.Array) -> Params:
        k_bf, k_j = jax.random.split(key)
        jnet = init_mlp(k_j, (_JNET_COORD_FEATURES + mu_enc.shape[1], jnet_hidden, 1))
        # zeroed output layer: J vanishes at initialization, so the starting
        # state is exactly the bare backflow determinant
        jnet[-1] = {"w": jnp.zeros_like(jnet[-1]["w"]), "b": jnp.zeros_like(jnet[-1]["b"])}
        params = {"backflow": init_backflow_params(k_bf, cfg), "jnet": jnet}
        if is_gaussian:
            params["log_alpha"] = jnp.log(jnp.asarray(orbitals.alpha_init))
        return params

    def log_psi_fn(params: Params, positions: jnp.ndarray) -> jnp.ndarray:
        delta = backflow_displacements(positions, spins_dev, params["backflow"], length)
        y = jax.lax.complex(positions, jnp.zeros_like(positions)) + delta
        alpha = jnp.exp(params["log_alpha"]) if is_gaussian else None
        matrix = evaluate_orbital_matrix(orbitals, y, spins_dev, alpha=alpha)
        j_factor = jnp.sum(_orbital_factor(params["jnet"], y, mu_enc, length))
        return j_factor + _log_block_determinants(matrix)

    return WavefunctionModel(
        cell=cell,
        rs=rs,
        orbitals=orbitals,
        spins=spins,
        init_params=init_params,
        log_psi_fn=log_psi_fn,
        name=f"neural[T={cfg.n_iterations}]",
    )


def make_bare_model(
    cell: SimulationCell,
    rs: float,
    orbitals: OrbitalSet,
    particle_spins: np.ndarray | None = None,
) -> WavefunctionModel:
    """Plain determinant at unmodified coordinates (identity backflow, no J).

    Plane-wave sets carry no parameters at all; Gaussian sets keep the width.
    """
    spins = orbitals.spins.copy() if particle_spins is None else np.asarray(particle_spins)
    spins_dev = jnp.asarray(spins)
    is_gaussian = orbitals.kind == GAUSSIAN

    def init_params(key: jax.Array) -> Params:
        del key
        if is_gaussian:
            return {"log_alpha": jnp.log(jnp.asarray(orbitals.alpha_init))}
        return {}

    def log_psi_fn(params: Params, positions: jnp.ndarray) -> jnp.ndarray:
        alpha = jnp.exp(params["log_alpha"]) if is_gaussian else None
        matrix = evaluate_orbital_matrix(orbitals, positions, spins_dev, alpha=alpha)
        return _log_block_determinants(matrix)

    return WavefunctionModel(
        cell=cell,
        rs=rs,
        orbitals=orbitals,
        spins=spins,
        init_params=init_params,
        log_psi_fn=log_psi_fn,
        name="bare",
    )


def log_psi(model: WavefunctionModel, params: Params, positions: jnp.ndarray) -> LogAmplitude:
    """LogAmplitude with phase wrapped to (-pi, pi]; raises on singular matrices."""
    value = model.log_psi_fn(params, jnp.asarray(positions))
    log_modulus = float(value.real)
    phase = float(value.imag)
    if not np.isfinite(log_modulus) or not np.isfinite(phase):
        raise SingularWavefunctionError(
            f"log|Psi| = {log_modulus}: orbital matrix numerically singular"
        )
    return LogAmplitude(log_modulus=log_modulus, phase=float(np.angle(np.exp(1j * phase))))


def coordinate_derivatives(
    log_psi_fn: Callable[[Params, jnp.ndarray], jnp.ndarray],
    params: Params,
    positions: jnp.ndarray,
) -> tuple[jnp.ndarray, jnp.ndarray]:
    """(grad log Psi (N,3) complex, sum_i laplacian_i log Psi complex).

    Gradient by reverse mode on real and imaginary fields; Laplacian as the
    trace of the Hessian computed forward-over-reverse along coordinate
    basis directions.
    """
    shape = positions.shape
    flat = positions.reshape(-1)

    def f(x: jnp.ndarray) -> jnp.ndarray:
        return log_psi_fn(params, x.reshape(shape))

    def grad_c(x: jnp.ndarray) -> jnp.ndarray:
        return (
            jax.grad(lambda z: f(z).real)(x) + 1j * jax.grad(lambda z: f(z).imag)(x)
        )

    # linearize shares one primal evaluation across all tangent directions;
    # re-tracing the primal per direction is both slower and memory-hungry.
    grad, hessian_vp = jax.linearize(grad_c, flat)
    basis = jnp.eye(flat.shape[0], dtype=flat.dtype)
    diag = jax.lax.map(lambda e: jnp.vdot(e, hessian_vp(e)), basis)
    laplacian = jnp.sum(diag)
    return grad.reshape(shape), laplacian


def parameter_derivatives(
    log_psi_fn: Callable[[Params, jnp.ndarray], jnp.ndarray],
    params: Params,
    positions: jnp.ndarray,
) -> jnp.ndarray:
    """Flat complex vector O = d log Psi / d theta (real parameters)."""
    grad_re = jax.grad(lambda p: log_psi_fn(p, positions).real)(params)
    grad_im = jax.grad(lambda p: log_psi_fn(p, positions).imag)(params)
    flat_re, _ = ravel_pytree(grad_re)
    flat_im, _ = ravel_pytree(grad_im)
    if flat_re.size == 0:
        return jnp.zeros(0, dtype=jnp.complex128)
    return flat_re + 1j * flat_im


def derivatives(
    model: WavefunctionModel, params: Params, positions: jnp.ndarray
) -> DerivativeBundle:
    grad, lap = coordinate_derivatives(model.log_psi_fn, params, positions)
    o = parameter_derivatives(model.log_psi_fn, params, positions)
    return DerivativeBundle(grad_log=grad, laplacian_log=lap, param_log_derivs=o)


def local_energy(
    model: WavefunctionModel,
    params: Params,
    positions: jnp.ndarray,
    ewald_ctx: EwaldContext | None,
) -> jnp.ndarray:
    """E_loc = -1/(2 r_s^2) [lap log Psi + sum_i (grad_i log Psi)^2] + V / r_s.

    The gradient square is the complex square (no conjugation); the
    imaginary part is a diagnostic that averages to zero for a real
    Hamiltonian. ewald_ctx None disables the interaction entirely.
    """
    grad, lap = coordinate_derivatives(model.log_psi_fn, params, positions)
    kinetic = -(lap + jnp.sum(grad**2)) / (2.0 * model.rs**2)
    if ewald_ctx is None:
        return kinetic
    return kinetic + potential_energy(positions, ewald_ctx) / model.rs


def flat_parameters(params: Params) -> tuple[jnp.ndarray, Callable[[jnp.ndarray], Params]]:
    """Real flat view of a parameter pytree and its inverse."""
    return ravel_pytree(params)
