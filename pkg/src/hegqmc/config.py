"""Experiment configuration: YAML file -> validated, fully-defaulted model.

Unknown keys are rejected everywhere (typo safety).  Environment variables
prefixed HEGQMC_ override file values, nested sections addressed with a
double underscore (HEGQMC_SAMPLER__N_WALKERS=256); values are parsed as
YAML scalars.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Literal, Mapping

import pydantic
import yaml

from .errors import ConfigurationError


class _Block(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid")


class SystemBlock(_Block):
    n_particles: int = pydantic.Field(ge=1)
    rs: float = pydantic.Field(gt=0.0)
    polarization: Literal["unpolarized", "polarized"]
    orbital_kind: Literal["planewave", "gaussian"] = "planewave"
    interacting: bool = True
    k_tot: list[float] | None = None
    gaussian_width: float | None = pydantic.Field(default=None, gt=0.0)
    ewald_tolerance: float = pydantic.Field(default=1e-12, gt=0.0)

    @pydantic.field_validator("k_tot")
    @classmethod
    def _k_tot_is_vector(cls, v):
        if v is not None and len(v) != 3:
            raise ValueError("k_tot must have 3 components")
        return v

    @property
    def spin_counts(self) -> tuple[int, int]:
        n = self.n_particles
        if self.polarization == "polarized":
            return n, 0
        return n - n // 2, n // 2


class NetworkBlock(_Block):
    kind: Literal["neural", "bare"] = "neural"
    n_iterations: int = pydantic.Field(default=1, ge=0)
    embed_dim: int = pydantic.Field(default=8, ge=1)
    node_hidden: int = pydantic.Field(default=32, ge=1)
    edge_hidden: int = pydantic.Field(default=32, ge=1)
    mlp_hidden: int = pydantic.Field(default=32, ge=1)
    jastrow_hidden: int = pydantic.Field(default=32, ge=1)
    seed: int = 0


class SamplerBlock(_Block):
    n_walkers: int = pydantic.Field(default=1024, ge=1)
    n_burn_in: int = pydantic.Field(default=200, ge=0)
    n_decorrelation: int = pydantic.Field(default=1, ge=1)
    target_acceptance: float = pydantic.Field(default=0.5, gt=0.0, lt=1.0)
    move_mode: Literal["single", "all"] = "single"
    initial_step: float | None = pydantic.Field(default=None, gt=0.0)
    eval_chunk: int = pydantic.Field(default=256, ge=1)


class OptimizerBlock(_Block):
    n_steps: int = pydantic.Field(default=2000, ge=0)
    learning_rate: float | None = pydantic.Field(default=None, gt=0.0)
    diagonal_shift: float = pydantic.Field(default=1e-4, gt=0.0)
    cg_tol: float = pydantic.Field(default=1e-6, gt=0.0)
    cg_max_iter: int = pydantic.Field(default=1000, ge=1)
    checkpoint_every: int = pydantic.Field(default=50, ge=1)
    energy_chunk: int = pydantic.Field(default=16, ge=1)
    deriv_chunk: int = pydantic.Field(default=64, ge=1)
    abort_after_failures: int = pydantic.Field(default=5, ge=1)


class ObservablesBlock(_Block):
    n_samples: int = pydantic.Field(default=500, ge=0)
    n_radial_bins: int = pydantic.Field(default=100, ge=1)
    k_cutoff: float = pydantic.Field(default=4.0, gt=0.0)
    raw_structure_factor: bool = False


class DMCBlock(_Block):
    n_walkers: int = pydantic.Field(default=1000, ge=2)
    time_step: float | None = pydantic.Field(default=None, gt=0.0)
    n_equilibration: int = pydantic.Field(default=500, ge=0)
    n_steps: int = pydantic.Field(default=2000, ge=1)
    mixed_stride: int = pydantic.Field(default=10, ge=1)
    n_jastrow: int = pydantic.Field(default=6, ge=1)
    jastrow_steps: int = pydantic.Field(default=200, ge=0)
    jastrow_walkers: int = pydantic.Field(default=256, ge=2)
    energy_offset_window: int = pydantic.Field(default=100, ge=1)

    def resolve_time_step(self, rs: float) -> float:
        if self.time_step is not None:
            return self.time_step
        return 0.01 * rs**2


class ExperimentConfig(_Block):
    system: SystemBlock
    network: NetworkBlock = NetworkBlock()
    sampler: SamplerBlock = SamplerBlock()
    optimizer: OptimizerBlock = OptimizerBlock()
    observables: ObservablesBlock = ObservablesBlock()
    dmc: DMCBlock = DMCBlock()
    seed: int = 0
    output_dir: str = "runs/experiment"

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


ENV_PREFIX = "HEGQMC_"


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_env_overrides(
    data: dict, environ: Mapping[str, str] | None = None
) -> dict:
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX) :].lower().split("__")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(
                    f"env override {name} conflicts with non-section value"
                )
        node[path[-1]] = _parse_scalar(raw)
    return data


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except pydantic.ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{loc}: {err['msg']}")
        raise ConfigurationError(
            "invalid configuration:\n  " + "\n  ".join(lines)
        ) from exc


def load_config(
    path: str,
    environ: Mapping[str, str] | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    """Parse a YAML config file, apply env and explicit overrides, validate."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"cannot parse {path}{where}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    data = apply_env_overrides(data, environ)
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return validate_config(data)
