"""Produce the reference run artifacts consumed by tests/test_acceptance.py.

Each named chain is a sequence of VMC stages that share one output directory
under runs/.  Later stages resume from the previous checkpoint with a smaller
diagonal shift and learning rate; at 256 walkers the stochastic-reconfiguration
force is noisy enough that starting directly at the final shift diverges.
Stages change the optimizer block, so resuming requires force=True.

Usage: python scripts/acceptance_runs.py CHAIN [CHAIN ...]
       python scripts/acceptance_runs.py all
"""

from __future__ import annotations

import copy
import json
import sys
import time
from pathlib import Path
from typing import Any

from hegqmc.config import validate_config
from hegqmc.errors import NumericalAbortError
from hegqmc.runner import CHECKPOINT_NAME, run_dmc, run_vmc

ROOT = Path(__file__).resolve().parent.parent
RUNS = ROOT / "runs"

SAMPLER = {"n_walkers": 256, "n_burn_in": 200}
OPTIMIZER = {"cg_max_iter": 200, "checkpoint_every": 25, "energy_chunk": 16, "deriv_chunk": 64}

# (extra steps, diagonal shift, learning rate) per stage; cumulative step
# counts feed optimizer.n_steps so resumed traces keep a single numbering.
# 256-walker forces are noisy, so shifts start large and the rate stays small;
# a stage that still diverges is retried at half rate from its last checkpoint.
STAGES = [
    (150, 1e-2, 0.02),
    (450, 1e-3, 0.015),
    (200, 1e-4, 0.01),
]
MAX_STAGE_RETRIES = 3


def neural_chain(name: str, rs: float, n_iterations: int) -> dict[str, Any]:
    return {
        "name": name,
        "base": {
            "system": {"n_particles": 14, "rs": rs, "polarization": "unpolarized"},
            "network": {"kind": "neural", "n_iterations": n_iterations},
            "sampler": dict(SAMPLER),
            "observables": {"n_samples": 0},
            "seed": 7,
        },
        "stages": STAGES,
        "measure_samples": 240,
    }


def measurement_only(name: str, system: dict[str, Any], *, n_samples: int = 240,
                     observables: dict[str, Any] | None = None) -> dict[str, Any]:
    return {
        "name": name,
        "base": {
            "system": system,
            "network": {"kind": "bare"},
            "sampler": dict(SAMPLER),
            "optimizer": {"n_steps": 0},
            "observables": {"n_samples": n_samples, **(observables or {})},
            "seed": 7,
        },
        "stages": [],
        "measure_samples": n_samples,
    }


def dmc_chain(name: str, rs: float, time_step: float | None,
              resume_from: str | None = None) -> dict[str, Any]:
    return {
        "name": name,
        "kind": "dmc",
        "resume_from": resume_from,
        "base": {
            "system": {"n_particles": 14, "rs": rs, "polarization": "unpolarized"},
            "network": {"kind": "bare"},
            "sampler": {"n_burn_in": 200},
            "dmc": {
                "n_walkers": 500,
                "n_equilibration": 300,
                "n_steps": 1500,
                "jastrow_steps": 200,
                "jastrow_walkers": 256,
                **({} if time_step is None else {"time_step": time_step}),
            },
            "seed": 7,
        },
    }


CHAINS: dict[str, dict[str, Any]] = {
    "rs1": neural_chain("rs1", 1.0, 1),
    "rs5": neural_chain("rs5", 5.0, 1),
    "rs5_t2": neural_chain("rs5_t2", 5.0, 2),
    "bare_rs1": measurement_only("bare_rs1", {"n_particles": 14, "rs": 1.0}),
    "bare_rs5": measurement_only("bare_rs5", {"n_particles": 14, "rs": 5.0}),
    # raw S(k): the variance estimator subtracts |<rho>|^2 and would erase the
    # Bragg peak of a pinned crystal; the first BCC reflection for N=16 sits
    # at |k| ~ 4.37, so the cutoff must clear it in both runs
    "liquid_rs1": measurement_only(
        "liquid_rs1",
        {"n_particles": 16, "rs": 1.0, "polarization": "unpolarized"},
        n_samples=200,
        observables={"raw_structure_factor": True, "k_cutoff": 6.0}),
    "crystal_rs110": measurement_only(
        "crystal_rs110",
        {"n_particles": 16, "rs": 110.0, "polarization": "unpolarized",
         "orbital_kind": "gaussian"},
        n_samples=200,
        observables={"raw_structure_factor": True, "k_cutoff": 6.0}),
    "dmc_rs1_dt1": dmc_chain("dmc_rs1_dt1", 1.0, None),
    "dmc_rs1_dt2": dmc_chain("dmc_rs1_dt2", 1.0, 0.005, resume_from="dmc_rs1_dt1"),
    "dmc_rs5_dt1": dmc_chain("dmc_rs5_dt1", 5.0, None),
    "dmc_rs5_dt2": dmc_chain("dmc_rs5_dt2", 5.0, 0.125, resume_from="dmc_rs5_dt1"),
}

ORDER = ["rs1", "rs5", "rs5_t2", "bare_rs1", "bare_rs5", "liquid_rs1",
         "crystal_rs110", "dmc_rs1_dt1", "dmc_rs1_dt2", "dmc_rs5_dt1",
         "dmc_rs5_dt2"]


def run_chain(chain: dict[str, Any]) -> None:
    out = RUNS / chain["name"]
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "driver.log"

    def log(msg: str) -> None:
        line = f"[{time.strftime('%H:%M:%S')}] {msg}"
        print(line, flush=True)
        with log_path.open("a") as fh:
            fh.write(line + "\n")

    if chain.get("kind") == "dmc":
        config = validate_config(copy.deepcopy(chain["base"]))
        source = chain.get("resume_from")
        resume = RUNS / source / CHECKPOINT_NAME if source else None
        if resume is not None and not resume.exists():
            resume = None
        log(f"dmc run: time_step={config.dmc.resolve_time_step(config.system.rs)}")
        t0 = time.time()
        run_dmc(config, out, resume=resume, force_resume=resume is not None, log=log)
        log(f"dmc chain {chain['name']} done in {time.time() - t0:.0f} s")
        return

    stages = chain["stages"] or [(0, None, None)]
    total = 0
    for idx, (steps, shift, eta) in enumerate(stages):
        total += steps
        raw = copy.deepcopy(chain["base"])
        opt = {**OPTIMIZER, **raw.get("optimizer", {}), "n_steps": total}
        if shift is not None:
            opt["diagonal_shift"] = shift
            opt["learning_rate"] = eta
        raw["optimizer"] = opt
        last = idx == len(stages) - 1
        if last:
            raw["observables"] = {**raw.get("observables", {}),
                                  "n_samples": chain["measure_samples"]}
        ckpt = out / CHECKPOINT_NAME
        t0 = time.time()
        for attempt in range(MAX_STAGE_RETRIES + 1):
            config = validate_config(raw)
            # any existing checkpoint continues the chain, so a killed driver
            # can be relaunched mid-stage without losing iterations
            resume = ckpt if ckpt.exists() else None
            log(f"stage {idx} attempt {attempt}: n_steps={total} shift={shift} "
                f"eta={raw['optimizer'].get('learning_rate')} "
                f"resume={'yes' if resume else 'no'}")
            try:
                run_vmc(config, out, resume=resume,
                        force_resume=resume is not None, log=log)
                break
            except NumericalAbortError as exc:
                if attempt == MAX_STAGE_RETRIES:
                    raise
                if raw["optimizer"].get("learning_rate"):
                    raw["optimizer"]["learning_rate"] /= 2.0
                log(f"stage {idx} diverged ({exc}); retrying at "
                    f"eta={raw['optimizer'].get('learning_rate')}")
        log(f"stage {idx} done in {time.time() - t0:.0f} s")

    summary = json.loads((out / "summary.json").read_text())
    e = summary.get("energy_per_particle")
    err = summary.get("error_per_particle")
    log(f"chain {chain['name']} complete: E/N = {e} +- {err}")


def main(argv: list[str]) -> int:
    names = argv or ["all"]
    if names == ["all"]:
        names = ORDER
    for name in names:
        if name not in CHAINS:
            print(f"unknown chain {name!r}; choose from {', '.join(ORDER)}")
            return 2
    for name in names:
        print(f"=== chain {name} ===", flush=True)
        run_chain(CHAINS[name])
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
