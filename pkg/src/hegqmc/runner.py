"""Experiment orchestration: optimize, measure, checkpoint, export.

Artifacts per run directory: energy_trace.jsonl (one record per optimizer
iteration), checkpoint.zip (refreshed periodically and at the end), g2.csv
and sk.csv from the measurement phase, and summary.json.  Traces contain no
timestamps, so a fixed config and seed reproduce them byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .backflow import BackflowConfig
from .batching import chunked_vmap
from .cell import SimulationCell
from .checkpoint import check_config_hash, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ConfigurationError, NumericalAbortError
from .ewald import EwaldContext, build_ewald
from .observables import (
    HistogramAccumulator,
    StructureFactorAccumulator,
    accumulate_g2,
    accumulate_sk,
    blocking_error,
    normalize_g2,
    structure_factor,
)
from .orbitals import OrbitalSet, bcc_sites, fill_shells
from .sampler import MetropolisSampler, SamplerConfig, WalkerEnsemble
from .sr import (
    EstimatorAccumulator,
    SRConfig,
    estimate_force,
    estimate_qgt,
    sr_update,
)
from .wavefunction import (
    WavefunctionModel,
    local_energy,
    make_bare_model,
    make_neural_model,
    parameter_derivatives,
)

CHECKPOINT_NAME = "checkpoint.zip"
TRACE_NAME = "energy_trace.jsonl"


@dataclasses.dataclass
class System:
    cell: SimulationCell
    orbitals: OrbitalSet
    model: WavefunctionModel
    ewald_ctx: EwaldContext | None


def build_system(config: ExperimentConfig) -> System:
    sys_cfg = config.system
    cell = SimulationCell.for_particles(sys_cfg.n_particles)
    if sys_cfg.orbital_kind == "planewave":
        n_up, n_down = sys_cfg.spin_counts
        orbitals = fill_shells(cell, n_up, n_down)
    else:
        orbitals = bcc_sites(cell, polarized=sys_cfg.polarization == "polarized")
        if sys_cfg.gaussian_width is not None:
            orbitals = dataclasses.replace(
                orbitals, alpha_init=sys_cfg.gaussian_width
            )
    if sys_cfg.k_tot is not None:
        achieved = np.asarray(orbitals.k_tot)
        wanted = np.asarray(sys_cfg.k_tot, dtype=float)
        if not np.allclose(achieved, wanted, atol=1e-9):
            raise ConfigurationError(
                f"requested k_tot {wanted.tolist()} but shell filling gives "
                f"{achieved.tolist()}"
            )

    net = config.network
    if net.kind == "bare":
        model = make_bare_model(cell, sys_cfg.rs, orbitals)
    else:
        backflow_cfg = BackflowConfig(
            n_iterations=net.n_iterations,
            embed_dim=net.embed_dim,
            node_hidden=net.node_hidden,
            edge_hidden=net.edge_hidden,
            mlp_hidden=net.mlp_hidden,
        )
        model = make_neural_model(
            cell,
            sys_cfg.rs,
            orbitals,
            backflow_cfg,
            jnet_hidden=net.jastrow_hidden,
        )
    ewald_ctx = (
        build_ewald(cell, sys_cfg.ewald_tolerance) if sys_cfg.interacting else None
    )
    return System(cell=cell, orbitals=orbitals, model=model, ewald_ctx=ewald_ctx)


def _energy_batch_fn(system: System, chunk: int) -> Callable:
    ctx = system.ewald_ctx
    model = system.model
    return jax.jit(
        chunked_vmap(lambda x, p: local_energy(model, p, x, ctx), chunk)
    )


def _deriv_batch_fn(system: System, chunk: int) -> Callable:
    log_psi_fn = system.model.log_psi_fn
    return jax.jit(
        chunked_vmap(lambda x, p: parameter_derivatives(log_psi_fn, p, x), chunk)
    )


class _TraceWriter:
    def __init__(self, path: Path, append: bool):
        self._fh = open(path, "a" if append else "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _ensemble_state(ensemble: WalkerEnsemble) -> dict[str, np.ndarray]:
    return {
        "positions": np.asarray(ensemble.positions),
        "log_modulus": np.asarray(ensemble.log_modulus),
        "walker_keys": np.asarray(ensemble.keys),
        "step_size": np.asarray(ensemble.step_size),
    }


def _restore_ensemble(ckpt, sampler: MetropolisSampler, params) -> WalkerEnsemble:
    ensemble = WalkerEnsemble(
        positions=jnp.asarray(ckpt.state_array("positions")),
        log_modulus=jnp.asarray(ckpt.state_array("log_modulus")),
        keys=jnp.asarray(ckpt.state_array("walker_keys")),
        step_size=float(ckpt.state_array("step_size")),
    )
    return sampler.refresh(ensemble, params)


def _check_cancel(cancel) -> bool:
    return cancel is not None and cancel.is_set()


def run_vmc(
    config: ExperimentConfig,
    output_dir: str | Path,
    resume: str | Path | None = None,
    force_resume: bool = False,
    cancel=None,
    log: Callable[[str], None] = print,
) -> dict:
    """Optimize (unless the model is parameter-free), then measure.

    Returns the summary dict also written to summary.json.  Persistent
    non-finite energies abort with NumericalAbortError; the last checkpoint
    is retained.
    """
    t_start = time.monotonic()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = build_system(config)
    model = system.model
    n = system.cell.n_particles
    config_hash = config.config_hash()

    sampler = MetropolisSampler(
        system.cell,
        model.log_psi_fn,
        SamplerConfig(**config.sampler.model_dump()),
    )
    energy_batch = _energy_batch_fn(system, config.optimizer.energy_chunk)
    deriv_batch = _deriv_batch_fn(system, config.optimizer.deriv_chunk)

    params = model.init_params(jax.random.PRNGKey(config.network.seed))
    n_params = ravel_pytree(params)[0].size
    start_iteration = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        check_config_hash(ckpt, config_hash, force=force_resume)
        params = ckpt.params(params)
        start_iteration = ckpt.iteration
        ensemble = _restore_ensemble(ckpt, sampler, params)
        log(f"resumed from {resume} at iteration {start_iteration}")
    else:
        ensemble = sampler.init_ensemble(params, jax.random.PRNGKey(config.seed))
        ensemble = sampler.burn_in(ensemble, params)
        log(
            f"burn-in done: step size {ensemble.step_size:.4f}, "
            f"acceptance {ensemble.acceptance_rate:.3f}"
        )

    sr_config = SRConfig(
        learning_rate=config.optimizer.learning_rate,
        diagonal_shift=config.optimizer.diagonal_shift,
        cg_tol=config.optimizer.cg_tol,
        cg_max_iter=config.optimizer.cg_max_iter,
    )
    eta = sr_config.resolve_learning_rate(config.system.rs)
    ckpt_path = out / CHECKPOINT_NAME

    def save(iteration: int) -> None:
        save_checkpoint(
            ckpt_path,
            params=params,
            state=_ensemble_state(ensemble),
            iteration=iteration,
            config_hash=config_hash,
            scalars={"eta": eta},
        )

    trace = _TraceWriter(out / TRACE_NAME, append=start_iteration > 0)
    failures = 0
    cancelled = False
    iteration = start_iteration
    optimizing = n_params > 0
    try:
        while iteration < config.optimizer.n_steps:
            if _check_cancel(cancel):
                cancelled = True
                break
            iteration += 1
            ensemble, acceptance = sampler.advance(ensemble, params)
            e_loc = np.asarray(energy_batch(ensemble.positions, params))
            e_mean = float(np.mean(e_loc.real))
            e_err = float(
                np.std(e_loc.real, ddof=1) / np.sqrt(e_loc.size)
            )
            if not np.isfinite(e_mean):
                failures += 1
                if failures >= config.optimizer.abort_after_failures:
                    raise NumericalAbortError(
                        f"non-finite energy for {failures} consecutive steps "
                        f"at iteration {iteration}"
                    )
                trace.write(
                    {
                        "iteration": iteration,
                        "energy_per_particle": None,
                        "error_per_particle": None,
                        "acceptance": acceptance,
                        "force_norm": None,
                    }
                )
                continue

            force_norm = 0.0
            if optimizing:
                o_mat = np.asarray(deriv_batch(ensemble.positions, params))
                acc = EstimatorAccumulator(e_loc, o_mat)
                force = estimate_force(acc)
                qgt = estimate_qgt(acc)
                new_params, info = sr_update(params, force, qgt, sr_config, eta)
                force_norm = info.force_norm
                if info.aborted:
                    failures += 1
                    if failures >= config.optimizer.abort_after_failures:
                        raise NumericalAbortError(
                            f"SR update aborted {failures} times in a row "
                            f"at iteration {iteration}"
                        )
                else:
                    failures = 0
                    params = new_params
                    ensemble = sampler.refresh(ensemble, params)
            else:
                failures = 0

            trace.write(
                {
                    "iteration": iteration,
                    "energy_per_particle": e_mean / n,
                    "error_per_particle": e_err / n,
                    "acceptance": acceptance,
                    "force_norm": force_norm,
                }
            )
            if iteration % config.optimizer.checkpoint_every == 0:
                save(iteration)
    finally:
        # the final save happens only on clean exits; an abort mid-step must
        # keep the last periodic checkpoint instead of freezing bad state
        trace.close()
    save(iteration)

    measurement = {}
    if config.observables.n_samples > 0 and not cancelled and not _check_cancel(cancel):
        measurement = measure_observables(
            system,
            params,
            sampler,
            ensemble,
            config,
            out,
            energy_batch=energy_batch,
            cancel=cancel,
            log=log,
        )

    summary = {
        "kind": "vmc",
        "iterations": iteration,
        "n_parameters": int(n_params),
        "acceptance_rate": ensemble.acceptance_rate,
        "n_singular_rejects": ensemble.n_singular,
        "cancelled": cancelled,
        "wall_seconds": time.monotonic() - t_start,
        "config": config.resolved(),
        "config_hash": config_hash,
        **measurement,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def measure_observables(
    system: System,
    params,
    sampler: MetropolisSampler,
    ensemble: WalkerEnsemble,
    config: ExperimentConfig,
    out: Path,
    energy_batch: Callable | None = None,
    cancel=None,
    log: Callable[[str], None] = print,
) -> dict:
    """Fixed-parameter sampling: final energy with blocking error, g2, S(k)."""
    obs = config.observables
    cell = system.cell
    if energy_batch is None:
        energy_batch = _energy_batch_fn(system, config.optimizer.energy_chunk)
    hist = HistogramAccumulator.for_cell(cell, obs.n_radial_bins)
    sk_acc = StructureFactorAccumulator.for_cell(
        cell, obs.k_cutoff, raw=obs.raw_structure_factor
    )
    sweep_means = []
    for _ in range(obs.n_samples):
        if _check_cancel(cancel):
            break
        ensemble, _ = sampler.advance(ensemble, params)
        e_loc = np.asarray(energy_batch(ensemble.positions, params))
        sweep_means.append(float(np.mean(e_loc.real)))
        positions = np.asarray(ensemble.positions)
        accumulate_g2(positions, hist, cell.length)
        accumulate_sk(positions, sk_acc)

    n = cell.n_particles
    result: dict = {"n_measure_samples": len(sweep_means)}
    if len(sweep_means) >= 2:
        energy = float(np.mean(sweep_means))
        error = blocking_error(np.asarray(sweep_means)) / 1.0
        result["energy_per_particle"] = energy / n
        result["error_per_particle"] = error / n
        # walkers are independent chains, so the sweep means already average
        # over them; the blocking handles the remaining time correlation
        result["energy_total"] = energy
        result["error_total"] = error

    if hist.n_samples >= 2:
        centers, g_vals, g_err = normalize_g2(hist, cell)
        with open(out / "g2.csv", "w") as fh:
            fh.write("r,g,g_err\n")
            for r, g, e in zip(centers, g_vals, g_err):
                fh.write(f"{r:.12g},{g:.12g},{e:.12g}\n")
        k_vals, s_vals, s_err = structure_factor(sk_acc, cell)
        with open(out / "sk.csv", "w") as fh:
            fh.write("k,S,S_err\n")
            for k, s, e in zip(k_vals, s_vals, s_err):
                fh.write(f"{k:.12g},{s:.12g},{e:.12g}\n")
        result["g2_file"] = "g2.csv"
        result["sk_file"] = "sk.csv"
        peak = int(np.argmax(s_vals))
        result["sk_peak"] = {"k": float(k_vals[peak]), "S": float(s_vals[peak])}
    log(
        "measurement done: E/N = "
        f"{result.get('energy_per_particle', float('nan')):.6f} "
        f"+- {result.get('error_per_particle', float('nan')):.6f} Ha"
    )
    return result


def run_measure(
    config: ExperimentConfig,
    checkpoint_path: str | Path,
    output_dir: str | Path,
    force: bool = False,
    cancel=None,
    log: Callable[[str], None] = print,
) -> dict:
    """Observables from a stored checkpoint without optimizing."""
    t_start = time.monotonic()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = build_system(config)
    sampler = MetropolisSampler(
        system.cell,
        system.model.log_psi_fn,
        SamplerConfig(**config.sampler.model_dump()),
    )
    params = system.model.init_params(jax.random.PRNGKey(config.network.seed))
    ckpt = load_checkpoint(checkpoint_path)
    check_config_hash(ckpt, config.config_hash(), force=force)
    params = ckpt.params(params)
    try:
        ensemble = _restore_ensemble(ckpt, sampler, params)
    except KeyError:
        ensemble = sampler.init_ensemble(params, jax.random.PRNGKey(config.seed))
        ensemble = sampler.burn_in(ensemble, params)
    measurement = measure_observables(
        system, params, sampler, ensemble, config, out, cancel=cancel, log=log
    )
    summary = {
        "kind": "measure",
        "checkpoint": str(checkpoint_path),
        "wall_seconds": time.monotonic() - t_start,
        "config": config.resolved(),
        "config_hash": config.config_hash(),
        **measurement,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


DMC_TRACE_NAME = "dmc_trace.jsonl"
_VMC_BASELINE_SWEEPS = 100


def run_dmc(
    config: ExperimentConfig,
    output_dir: str | Path,
    resume: str | Path | None = None,
    force_resume: bool = False,
    cancel=None,
    log: Callable[[str], None] = print,
) -> dict:
    """Slater-Jastrow trial preparation, then fixed-node projection.

    Phases: optimize the free pair coefficients (skipped when a checkpoint
    supplies them or the system is non-interacting), measure the trial's
    variational energy while equilibrating the walker ensemble, propagate.
    Per-step records go to dmc_trace.jsonl; growth and mixed estimates with
    blocking errors go to summary.json.
    """
    from .dmc import (
        DMCConfig,
        DMCPropagator,
        EnergyOffsetController,
        make_sj_model,
        optimize_jastrow,
    )

    t_start = time.monotonic()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dmc_cfg = config.dmc
    system = build_system(config)
    cell = system.cell
    n = cell.n_particles
    rs = config.system.rs
    config_hash = config.config_hash()
    time_step = dmc_cfg.resolve_time_step(rs)

    trial = make_sj_model(cell, rs, system.orbitals, n_jastrow=dmc_cfg.n_jastrow)
    params = trial.init_params(jax.random.PRNGKey(config.network.seed))

    if resume is not None:
        ckpt = load_checkpoint(resume)
        check_config_hash(ckpt, config_hash, force=force_resume)
        params = ckpt.params(params)
        log(f"trial coefficients loaded from {resume}")
    elif system.ewald_ctx is not None and dmc_cfg.jastrow_steps > 0:
        log(f"optimizing {ravel_pytree(params)[0].size} pair coefficients")
        params, history = optimize_jastrow(
            trial,
            system.ewald_ctx,
            jax.random.PRNGKey(config.seed),
            n_steps=dmc_cfg.jastrow_steps,
            sampler_config=SamplerConfig(
                n_walkers=dmc_cfg.jastrow_walkers,
                n_burn_in=config.sampler.n_burn_in,
            ),
            sr_config=SRConfig(explicit=True),
            log=log,
        )
        if _check_cancel(cancel):
            return {"kind": "dmc", "cancelled": True}
    save_checkpoint(
        out / CHECKPOINT_NAME,
        params=params,
        iteration=0,
        config_hash=config_hash,
    )

    # variational baseline of the finished trial; its final ensemble seeds
    # the projection population
    sampler = MetropolisSampler(
        cell,
        trial.log_psi_fn,
        SamplerConfig(n_walkers=dmc_cfg.n_walkers, n_burn_in=config.sampler.n_burn_in),
    )
    ensemble = sampler.init_ensemble(params, jax.random.PRNGKey(config.seed + 1))
    ensemble = sampler.burn_in(ensemble, params)
    trial_system = System(
        cell=cell, orbitals=system.orbitals, model=trial, ewald_ctx=system.ewald_ctx
    )
    energy_batch = _energy_batch_fn(trial_system, config.optimizer.energy_chunk)
    vmc_sweeps = []
    for _ in range(_VMC_BASELINE_SWEEPS):
        if _check_cancel(cancel):
            break
        ensemble, _ = sampler.advance(ensemble, params)
        e_loc = np.asarray(energy_batch(ensemble.positions, params))
        vmc_sweeps.append(float(np.mean(e_loc.real)))
    vmc_energy = float(np.mean(vmc_sweeps))
    vmc_error = float(blocking_error(np.asarray(vmc_sweeps)))
    log(f"trial VMC energy: {vmc_energy / n:.6f} +- {vmc_error / n:.6f} Ha/particle")

    propagator = DMCPropagator(
        trial,
        system.ewald_ctx,
        DMCConfig(
            n_walkers=dmc_cfg.n_walkers,
            time_step=time_step,
            energy_offset_window=dmc_cfg.energy_offset_window,
            eval_chunk=config.optimizer.energy_chunk * 4,
        ),
    )
    population = propagator.init_population(
        ensemble.positions, params, jax.random.PRNGKey(config.seed + 2)
    )
    controller = EnergyOffsetController(vmc_energy, dmc_cfg.energy_offset_window)

    trace = _TraceWriter(out / DMC_TRACE_NAME, append=False)
    growth_samples: list[float] = []
    mixed_samples: list[float] = []
    cancelled = False
    total_steps = dmc_cfg.n_equilibration + dmc_cfg.n_steps
    try:
        for step in range(1, total_steps + 1):
            if _check_cancel(cancel):
                cancelled = True
                break
            e_t = controller.value
            population, info = propagator.advance(population, params, e_t)
            growth = float(info.growth_energy)
            controller.record(growth)
            in_production = step > dmc_cfg.n_equilibration
            record = {
                "step": step,
                "growth_energy": growth,
                "e_t": e_t,
                "mean_weight": float(info.mean_weight),
                "population": int(dmc_cfg.n_walkers - int(info.n_killed)),
                "production": in_production,
            }
            if in_production:
                growth_samples.append(growth)
                if (step - dmc_cfg.n_equilibration) % dmc_cfg.mixed_stride == 0:
                    e_loc = np.asarray(energy_batch(population.positions, params))
                    mixed = float(np.mean(e_loc.real))
                    mixed_samples.append(mixed)
                    record["mixed_energy"] = mixed
            trace.write(record)
            if step % 200 == 0:
                log(f"dmc step {step}/{total_steps}: growth {growth / n:.6f} Ha/particle")
    finally:
        trace.close()

    summary: dict = {
        "kind": "dmc",
        "steps": total_steps,
        "time_step": time_step,
        "n_walkers": dmc_cfg.n_walkers,
        "cancelled": cancelled,
        "vmc_energy_per_particle": vmc_energy / n,
        "vmc_error_per_particle": vmc_error / n,
        "jastrow_same": np.asarray(params["same"]).tolist(),
        "jastrow_anti": np.asarray(params["anti"]).tolist(),
        "wall_seconds": time.monotonic() - t_start,
        "config": config.resolved(),
        "config_hash": config_hash,
    }
    if len(growth_samples) >= 2:
        g = np.asarray(growth_samples)
        summary["growth_energy_per_particle"] = float(np.mean(g)) / n
        summary["growth_error_per_particle"] = float(blocking_error(g)) / n
    if len(mixed_samples) >= 2:
        m = np.asarray(mixed_samples)
        summary["mixed_energy_per_particle"] = float(np.mean(m)) / n
        summary["mixed_error_per_particle"] = float(blocking_error(m)) / n
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    log(
        "dmc done: growth "
        f"{summary.get('growth_energy_per_particle', float('nan')):.6f}, mixed "
        f"{summary.get('mixed_energy_per_particle', float('nan')):.6f} Ha/particle"
    )
    return summary
