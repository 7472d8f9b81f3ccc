"""Fixed-node diffusion Monte Carlo with a Slater-Jastrow trial state.

The trial is Psi_V = exp(J) S_up S_down with plane-wave determinants and a
two-channel pair Jastrow built from the periodic kernel j.  Propagation uses
the free-particle Gaussian propagator with mirror samples X +- dX; potential
and trial-ratio factors enter through per-mirror weights, the fixed-node
constraint zeroes negative-ratio mirrors, and a weight-proportional
resampling step keeps the population at its target size.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .batching import chunked_vmap
from .cell import SimulationCell, displacement_table, wrap_positions
from .errors import InvalidInputError, PopulationExtinctionError
from .ewald import EwaldContext, potential_energy
from .orbitals import OrbitalSet, evaluate_orbital_matrix
from .wavefunction import Params, WavefunctionModel, _log_block_determinants

# Coalescence slope of the pair function in Bohr-unit distance; these cancel
# the 1/r singularity exactly, so they are never optimized.
CUSP_SAME_SPIN = 0.25
CUSP_ANTI_SPIN = 0.5


def jastrow_kernel(x: jnp.ndarray, length: float) -> jnp.ndarray:
    """j(x) = |x| (1 - 2 (|x|/L)^3): even, j(0) = 0, flat at |x| = L/2.

    The zero slope at the half-cell edge makes the min-image pair function
    continuously differentiable across the wrap-around.
    """
    a = jnp.abs(x)
    return a * (1.0 - 2.0 * (a / length) ** 3)


def _full_coefficients(free: jnp.ndarray, cusp: float) -> jnp.ndarray:
    return jnp.concatenate([jnp.asarray([cusp], dtype=free.dtype), free])


def jastrow_log(
    positions: jnp.ndarray,
    free_same: jnp.ndarray,
    free_anti: jnp.ndarray,
    spins: jnp.ndarray,
    length: float,
    rs: float,
) -> jnp.ndarray:
    """J(X) = sum_{i<j} sum_n c_{n,s_i s_j} b_ij^{n/2}.

    b_ij = rs^2 [j(dx)^2 + j(dy)^2 + j(dz)^2] is the squared kernel distance
    in Bohr units; expressing the expansion in unscaled distance keeps the
    fixed n=1 coefficients equal to the textbook cusp slopes at every rs.
    """
    n = positions.shape[0]
    disp = displacement_table(positions, length)  # (N, N, 3) min-image
    b = rs**2 * jnp.sum(jastrow_kernel(disp, length) ** 2, axis=-1)
    pair = jnp.triu(jnp.ones((n, n), dtype=bool), k=1)
    # sqrt has an infinite derivative at zero, so the diagonal is masked to a
    # positive dummy before the root and the result masked back to zero
    r = jnp.sqrt(jnp.where(pair, b, 1.0))
    c_same = _full_coefficients(free_same, CUSP_SAME_SPIN)
    c_anti = _full_coefficients(free_anti, CUSP_ANTI_SPIN)
    orders = jnp.arange(1, c_same.shape[0] + 1)
    powers = r[..., None] ** orders  # (N, N, N_J)
    same = spins[:, None] == spins[None, :]
    coeffs = jnp.where(same[..., None], c_same, c_anti)
    u = jnp.sum(powers * coeffs, axis=-1)
    return jnp.sum(jnp.where(pair, u, 0.0))


def make_sj_model(
    cell: SimulationCell,
    rs: float,
    orbitals: OrbitalSet,
    n_jastrow: int = 6,
    particle_spins: np.ndarray | None = None,
) -> WavefunctionModel:
    """Slater-Jastrow trial: determinant at bare coordinates times exp(J).

    Free parameters are the n >= 2 pair coefficients of each spin channel;
    the n = 1 coefficients stay pinned to the cusp values.
    """
    if n_jastrow < 1:
        raise InvalidInputError("n_jastrow must be at least 1")
    spins = orbitals.spins.copy() if particle_spins is None else np.asarray(particle_spins)
    spins_dev = jnp.asarray(spins)
    length = cell.length

    def init_params(key: jax.Array) -> Params:
        del key
        return {
            "same": jnp.zeros(n_jastrow - 1),
            "anti": jnp.zeros(n_jastrow - 1),
        }

    def log_psi_fn(params: Params, positions: jnp.ndarray) -> jnp.ndarray:
        matrix = evaluate_orbital_matrix(orbitals, positions, spins_dev)
        j = jastrow_log(positions, params["same"], params["anti"], spins_dev, length, rs)
        return j + _log_block_determinants(matrix)

    return WavefunctionModel(
        cell=cell,
        rs=rs,
        orbitals=orbitals,
        spins=spins,
        init_params=init_params,
        log_psi_fn=log_psi_fn,
        name=f"slater-jastrow[{n_jastrow}]",
    )


@dataclasses.dataclass(frozen=True)
class DMCConfig:
    """Propagation knobs; time_step is in inverse Hartree."""

    n_walkers: int = 1000
    time_step: float = 0.01
    target_offset: float = 0.0  # initial E_T (total energy, Hartree)
    energy_offset_window: int = 100
    eval_chunk: int = 256

    def __post_init__(self) -> None:
        if self.n_walkers < 2:
            raise InvalidInputError("n_walkers must be at least 2")
        if self.time_step <= 0:
            raise InvalidInputError("time_step must be positive")


class DMCPopulation(NamedTuple):
    """Walker ensemble between propagation steps; weights are uniform after
    each resampling barrier."""

    positions: jnp.ndarray  # (W, N, 3)
    log_psi: jnp.ndarray  # (W,) complex
    potential: jnp.ndarray  # (W,) Hartree
    weights: jnp.ndarray  # (W,)
    key: jax.Array


class DMCStepInfo(NamedTuple):
    mean_weight: jnp.ndarray
    growth_energy: jnp.ndarray
    n_killed: jnp.ndarray
    n_crossings: jnp.ndarray
    acceptance_plus: jnp.ndarray


class DMCPropagator:
    """One imaginary-time step: mirror diffusion, fixed-node weights,
    heat-bath mirror selection, and systematic resampling."""

    def __init__(
        self,
        trial: WavefunctionModel,
        ewald_ctx: EwaldContext | None,
        config: DMCConfig,
    ) -> None:
        self.trial = trial
        self.config = config
        self.ewald_ctx = ewald_ctx
        chunk = config.eval_chunk
        self._log_psi = jax.jit(
            chunked_vmap(lambda x, p: trial.log_psi_fn(p, x), chunk)
        )
        if ewald_ctx is None:
            self._potential = lambda x: jnp.zeros(x.shape[0])
        else:
            pot = chunked_vmap(lambda x: potential_energy(x, ewald_ctx) / trial.rs, chunk)
            self._potential = jax.jit(pot)
        self._step = jax.jit(self._build_step())

    def init_population(self, positions: jnp.ndarray, params: Params, key: jax.Array) -> DMCPopulation:
        w = positions.shape[0]
        if w != self.config.n_walkers:
            raise InvalidInputError(
                f"expected {self.config.n_walkers} walkers, got {w}"
            )
        return DMCPopulation(
            positions=jnp.asarray(positions),
            log_psi=self._log_psi(jnp.asarray(positions), params),
            potential=self._potential(jnp.asarray(positions)),
            weights=jnp.ones(w),
            key=key,
        )

    def _build_step(self) -> Callable:
        tau = self.config.time_step
        rs = self.trial.rs
        length = self.trial.cell.length
        n_walkers = self.config.n_walkers

        def step(pop: DMCPopulation, params: Params, e_t: jnp.ndarray):
            key, k_noise, k_pick, k_resample = jax.random.split(pop.key, 4)
            sigma = jnp.sqrt(tau) / rs  # free-propagator width per component
            delta = sigma * jax.random.normal(k_noise, pop.positions.shape)
            x_plus = wrap_positions(pop.positions + delta, length)
            x_minus = wrap_positions(pop.positions - delta, length)

            log_plus = self._log_psi(x_plus, params)
            log_minus = self._log_psi(x_minus, params)
            ratio_plus = jnp.real(jnp.exp(log_plus - pop.log_psi))
            ratio_minus = jnp.real(jnp.exp(log_minus - pop.log_psi))
            ratio_plus = jnp.where(jnp.isfinite(ratio_plus), ratio_plus, 0.0)
            ratio_minus = jnp.where(jnp.isfinite(ratio_minus), ratio_minus, 0.0)

            v_plus = self._potential(x_plus)
            v_minus = self._potential(x_minus)
            trotter_plus = jnp.exp(-0.5 * tau * (v_plus + pop.potential))
            trotter_minus = jnp.exp(-0.5 * tau * (v_minus + pop.potential))
            w_plus = ratio_plus * trotter_plus
            w_minus = ratio_minus * trotter_minus

            # the signed average is the assigned weight; the node constraint
            # zeroes negative mirrors only for the heat-bath selection, and a
            # walker with no selectable mirror dies
            mean_pair = 0.5 * (w_plus + w_minus)
            sel_plus = jnp.maximum(w_plus, 0.0)
            sel_minus = jnp.maximum(w_minus, 0.0)
            total = sel_plus + sel_minus
            alive = total > 0.0
            p_plus = jnp.where(alive, sel_plus / jnp.where(alive, total, 1.0), 0.0)
            pick_plus = jax.random.uniform(k_pick, (n_walkers,)) < p_plus

            new_positions = jnp.where(pick_plus[:, None, None], x_plus, x_minus)
            new_log_psi = jnp.where(pick_plus, log_plus, log_minus)
            new_potential = jnp.where(pick_plus, v_plus, v_minus)

            weights = pop.weights * jnp.where(alive, mean_pair, 0.0) * jnp.exp(e_t * tau)
            mean_weight = jnp.mean(weights)
            growth = e_t - jnp.log(mean_weight) / tau

            # resampling needs a distribution, so the rare signed-negative
            # weights drop out here; the growth average above keeps them
            positive = jnp.maximum(weights, 0.0)
            prob = positive / jnp.sum(positive)
            edges = jnp.cumsum(prob)
            points = (jax.random.uniform(k_resample) + jnp.arange(n_walkers)) / n_walkers
            idx = jnp.searchsorted(edges, points)
            idx = jnp.clip(idx, 0, n_walkers - 1)

            new_pop = DMCPopulation(
                positions=new_positions[idx],
                log_psi=new_log_psi[idx],
                potential=new_potential[idx],
                weights=jnp.ones(n_walkers),
                key=key,
            )
            info = DMCStepInfo(
                mean_weight=mean_weight,
                growth_energy=growth,
                n_killed=jnp.sum(~alive),
                n_crossings=jnp.sum((w_plus < 0.0) | (w_minus < 0.0)),
                acceptance_plus=jnp.mean(pick_plus.astype(jnp.float64)),
            )
            return new_pop, info

        return step

    def advance(
        self, pop: DMCPopulation, params: Params, e_t: float
    ) -> tuple[DMCPopulation, DMCStepInfo]:
        """One step; raises if every walker died or weights went non-finite."""
        new_pop, info = self._step(pop, params, jnp.asarray(e_t))
        mean_w = float(info.mean_weight)
        if not np.isfinite(mean_w) or mean_w <= 0.0:
            raise PopulationExtinctionError(
                f"population collapsed: mean weight {mean_w}, "
                f"{int(info.n_killed)} of {self.config.n_walkers} walkers killed"
            )
        return new_pop, info


class EnergyOffsetController:
    """E_T as a running average of recent growth estimates."""

    def __init__(self, initial: float, window: int) -> None:
        if window < 1:
            raise InvalidInputError("window must be at least 1")
        self._window = window
        self._history: list[float] = []
        self._initial = initial

    @property
    def value(self) -> float:
        if not self._history:
            return self._initial
        return float(np.mean(self._history[-self._window:]))

    def record(self, growth_energy: float) -> None:
        if np.isfinite(growth_energy):
            self._history.append(float(growth_energy))
            del self._history[: -self._window]


def optimize_jastrow(
    trial: WavefunctionModel,
    ewald_ctx: EwaldContext | None,
    key: jax.Array,
    n_steps: int = 200,
    sampler_config: "SamplerConfig | None" = None,
    sr_config: "SRConfig | None" = None,
    log: Callable[[str], None] | None = None,
) -> tuple[Params, list[dict]]:
    """Energy-minimize the free pair coefficients by stochastic
    reconfiguration, returning the best-seen coefficients.

    The parameter space is tiny (two channels of N_J - 1 numbers), so the
    quantum geometric tensor is solved densely.  A diverging step cannot
    poison the result: the lowest-energy iterate wins.
    """
    from .sampler import MetropolisSampler, SamplerConfig
    from .sr import EstimatorAccumulator, SRConfig, estimate_force, estimate_qgt, sr_update
    from .wavefunction import local_energy, parameter_derivatives

    s_cfg = sampler_config or SamplerConfig(n_walkers=256, n_burn_in=100)
    o_cfg = sr_config or SRConfig()
    eta = o_cfg.resolve_learning_rate(trial.rs)
    k_init, k_walk = jax.random.split(key)
    params = trial.init_params(k_init)
    chunk = s_cfg.eval_chunk

    energy_batch = jax.jit(
        chunked_vmap(lambda x, p: local_energy(trial, p, x, ewald_ctx), chunk)
    )
    deriv_batch = jax.jit(
        chunked_vmap(lambda x, p: parameter_derivatives(trial.log_psi_fn, p, x), chunk)
    )

    sampler = MetropolisSampler(trial.cell, trial.log_psi_fn, s_cfg)
    ensemble = sampler.burn_in(sampler.init_ensemble(params, k_walk), params)

    best_params = params
    best_energy = np.inf
    history: list[dict] = []
    for step in range(1, n_steps + 1):
        ensemble, _ = sampler.advance(ensemble, params)
        e_loc = np.asarray(energy_batch(ensemble.positions, params))
        o = np.asarray(deriv_batch(ensemble.positions, params))
        e_mean = float(np.mean(e_loc.real))
        if np.isfinite(e_mean) and e_mean < best_energy:
            best_energy = e_mean
            best_params = params
        acc = EstimatorAccumulator(e_loc, o)
        force = estimate_force(acc)
        qgt = estimate_qgt(acc, explicit=True)
        params, info = sr_update(params, force, qgt, o_cfg, eta)
        history.append(
            {
                "step": step,
                "energy": e_mean,
                "force_norm": info.force_norm,
                "aborted": info.aborted,
            }
        )
        if info.aborted:
            params = best_params
        ensemble = sampler.refresh(ensemble, params)
        if log is not None and (step % 25 == 0 or step == n_steps):
            log(f"jastrow step {step}: E = {e_mean:.6f} Ha, |F| = {info.force_norm:.3g}")

    # final iterate is unmeasured; prefer it only if nothing better was seen
    if best_energy is np.inf:
        best_params = params
    return best_params, history
