"""Metropolis-Hastings sampling of |Psi|^2 over walker ensembles.

Moves are Gaussian with a symmetric proposal, so acceptance reduces to
min(1, exp(2 * delta log|Psi|)).  Single-particle sweeps are the default;
an all-particle mode exists mainly for equivariance tests.  Step-size
tuning happens during burn-in only, since adapting afterwards would bias
the stationary distribution.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .batching import chunked_vmap
from .cell import SimulationCell, wrap_positions

LogPsiFn = Callable[[dict, jnp.ndarray], jnp.ndarray]

STEP_TUNE_GAIN = 0.5
STEP_MIN_FRACTION = 1e-4
STEP_MAX_FRACTION = 0.5


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    n_walkers: int = 1024
    n_burn_in: int = 200
    n_decorrelation: int = 1
    target_acceptance: float = 0.5
    move_mode: str = "single"
    initial_step: float | None = None
    eval_chunk: int = 256

    def __post_init__(self):
        if self.n_walkers < 1:
            raise ValueError(f"n_walkers must be positive, got {self.n_walkers}")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError(
                f"target_acceptance must be in (0, 1), got {self.target_acceptance}"
            )
        if self.move_mode not in ("single", "all"):
            raise ValueError(f"unknown move_mode {self.move_mode!r}")


@dataclasses.dataclass
class WalkerEnsemble:
    """Walker positions with cached log-moduli and per-walker rng streams."""

    positions: jnp.ndarray
    log_modulus: jnp.ndarray
    keys: jnp.ndarray
    step_size: float
    n_accepted: int = 0
    n_proposed: int = 0
    n_singular: int = 0

    @property
    def n_walkers(self) -> int:
        return self.positions.shape[0]

    @property
    def acceptance_rate(self) -> float:
        if self.n_proposed == 0:
            return 0.0
        return self.n_accepted / self.n_proposed


def acceptance_probability(delta_log_modulus: float) -> float:
    """min(1, exp(2 dlog|Psi|)); the |Psi|^2 Metropolis rule."""
    return float(min(1.0, np.exp(2.0 * float(delta_log_modulus))))


def default_initial_step(cell: SimulationCell) -> float:
    """0.2 of the mean interparticle spacing (scaled units)."""
    return 0.2 * cell.length / cell.n_particles ** (1.0 / 3.0)


def tune_step_size(
    step: float, rate: float, target: float, length: float
) -> float:
    new = step * float(np.exp(STEP_TUNE_GAIN * (rate - target)))
    return float(
        np.clip(new, STEP_MIN_FRACTION * length, STEP_MAX_FRACTION * length)
    )


def _log_uniform(key: jnp.ndarray, shape) -> jnp.ndarray:
    u = jax.random.uniform(key, shape)
    return jnp.log(jnp.maximum(u, jnp.finfo(jnp.float64).tiny))


def all_particle_move(
    positions: jnp.ndarray,
    log_modulus: jnp.ndarray,
    noise: jnp.ndarray,
    log_uniform: jnp.ndarray,
    log_modulus_fn: Callable[[jnp.ndarray], jnp.ndarray],
    length: float,
) -> tuple[jnp.ndarray, jnp.ndarray, jnp.ndarray, jnp.ndarray]:
    """One collective move from explicit noise; exposed for equivariance tests.

    Returns (positions, log_modulus, accepted mask, singular mask).
    """
    proposal = wrap_positions(positions + noise, length)
    new_lm = log_modulus_fn(proposal)
    finite = jnp.isfinite(new_lm)
    accept = finite & (log_uniform < 2.0 * (new_lm - log_modulus))
    positions = jnp.where(accept[:, None, None], proposal, positions)
    log_modulus = jnp.where(accept, new_lm, log_modulus)
    return positions, log_modulus, accept, ~finite


class MetropolisSampler:
    """Sampler bound to a cell and a log-amplitude function."""

    def __init__(
        self,
        cell: SimulationCell,
        log_psi_fn: LogPsiFn,
        config: SamplerConfig | None = None,
    ):
        self.cell = cell
        self.config = config or SamplerConfig()
        self._log_psi_fn = log_psi_fn
        batch_lm = chunked_vmap(
            lambda x, p: log_psi_fn(p, x).real, self.config.eval_chunk
        )
        self._batch_log_modulus = jax.jit(batch_lm)
        if self.config.move_mode == "single":
            self._sweep_kernel = jax.jit(self._single_particle_sweep)
        else:
            self._sweep_kernel = jax.jit(self._all_particle_sweep)

    def _single_particle_sweep(self, positions, log_modulus, keys, step, params):
        n = self.cell.n_particles
        length = self.cell.length

        def move(i, carry):
            pos, lm, keys, acc, sing = carry
            split = jax.vmap(lambda k: jax.random.split(k, 3))(keys)
            keys_next, k_noise, k_u = split[:, 0], split[:, 1], split[:, 2]
            noise = step * jax.vmap(lambda k: jax.random.normal(k, (3,)))(k_noise)
            proposal = wrap_positions(pos.at[:, i, :].add(noise), length)
            new_lm = self._batch_log_modulus(proposal, params)
            logu = jax.vmap(lambda k: _log_uniform(k, ()))(k_u)
            finite = jnp.isfinite(new_lm)
            accept = finite & (logu < 2.0 * (new_lm - lm))
            pos = jnp.where(accept[:, None, None], proposal, pos)
            lm = jnp.where(accept, new_lm, lm)
            return pos, lm, keys_next, acc + accept.sum(), sing + (~finite).sum()

        init = (positions, log_modulus, keys, jnp.array(0), jnp.array(0))
        pos, lm, keys, acc, sing = jax.lax.fori_loop(0, n, move, init)
        return pos, lm, keys, acc, jnp.array(n * positions.shape[0]), sing

    def _all_particle_sweep(self, positions, log_modulus, keys, step, params):
        n = self.cell.n_particles
        split = jax.vmap(lambda k: jax.random.split(k, 3))(keys)
        keys_next, k_noise, k_u = split[:, 0], split[:, 1], split[:, 2]
        noise = step * jax.vmap(lambda k: jax.random.normal(k, (n, 3)))(k_noise)
        logu = jax.vmap(lambda k: _log_uniform(k, ()))(k_u)
        pos, lm, accept, singular = all_particle_move(
            positions,
            log_modulus,
            noise,
            logu,
            lambda x: self._batch_log_modulus(x, params),
            self.cell.length,
        )
        return (
            pos,
            lm,
            keys_next,
            accept.sum(),
            jnp.array(positions.shape[0]),
            singular.sum(),
        )

    def init_ensemble(self, params: dict, key: jnp.ndarray) -> WalkerEnsemble:
        k_pos, k_walkers = jax.random.split(key)
        b = self.config.n_walkers
        positions = (
            jax.random.uniform(k_pos, (b, self.cell.n_particles, 3))
            * self.cell.length
        )
        step = self.config.initial_step
        if step is None:
            step = default_initial_step(self.cell)
        return WalkerEnsemble(
            positions=positions,
            log_modulus=self._batch_log_modulus(positions, params),
            keys=jax.random.split(k_walkers, b),
            step_size=float(step),
        )

    def refresh(self, ensemble: WalkerEnsemble, params: dict) -> WalkerEnsemble:
        """Recompute cached log-moduli after a parameter update."""
        ensemble.log_modulus = self._batch_log_modulus(ensemble.positions, params)
        return ensemble

    def sweep(
        self, ensemble: WalkerEnsemble, params: dict
    ) -> tuple[WalkerEnsemble, float]:
        pos, lm, keys, acc, prop, sing = self._sweep_kernel(
            ensemble.positions,
            ensemble.log_modulus,
            ensemble.keys,
            ensemble.step_size,
            params,
        )
        ensemble.positions = pos
        ensemble.log_modulus = lm
        ensemble.keys = keys
        acc, prop, sing = int(acc), int(prop), int(sing)
        ensemble.n_accepted += acc
        ensemble.n_proposed += prop
        ensemble.n_singular += sing
        return ensemble, acc / prop

    def burn_in(self, ensemble: WalkerEnsemble, params: dict) -> WalkerEnsemble:
        """Equilibration sweeps with step-size tuning toward the target rate."""
        for _ in range(self.config.n_burn_in):
            ensemble, rate = self.sweep(ensemble, params)
            ensemble.step_size = tune_step_size(
                ensemble.step_size,
                rate,
                self.config.target_acceptance,
                self.cell.length,
            )
        return ensemble

    def advance(
        self, ensemble: WalkerEnsemble, params: dict, n_sweeps: int | None = None
    ) -> tuple[WalkerEnsemble, float]:
        """Decorrelation sweeps at frozen step size; returns mean acceptance."""
        n_sweeps = self.config.n_decorrelation if n_sweeps is None else n_sweeps
        rates = []
        for _ in range(n_sweeps):
            ensemble, rate = self.sweep(ensemble, params)
            rates.append(rate)
        return ensemble, float(np.mean(rates)) if rates else 0.0
