"""Request and response bodies for the HTTP layer."""

import datetime
from typing import Any, Literal

import pydantic

JobKind = Literal["vmc", "dmc", "measure"]
JobState = Literal["queued", "running", "done", "failed", "cancelled"]


class JobRequest(pydantic.BaseModel):
    """Submission payload: a run kind plus the full experiment config."""

    model_config = pydantic.ConfigDict(extra="forbid")

    kind: JobKind = "vmc"
    config: dict[str, Any]
    resume: str | None = None
    force_resume: bool = False
    label: str | None = None


class JobInfo(pydantic.BaseModel):
    id: str
    kind: JobKind
    state: JobState
    label: str | None = None
    created: datetime.datetime
    started: datetime.datetime | None = None
    finished: datetime.datetime | None = None
    error: str | None = None
    output_dir: str
    summary: dict[str, Any] | None = None


class JobList(pydantic.BaseModel):
    jobs: list[JobInfo]


class ValidateRequest(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid")

    config: dict[str, Any]


class ValidateResponse(pydantic.BaseModel):
    valid: bool
    errors: list[str] = []
    warnings: list[str] = []
    resolved: dict[str, Any] | None = None
    config_hash: str | None = None
    learning_rate: float | None = None


class TracePage(pydantic.BaseModel):
    """A slice of a JSON-lines trace; poll again from next_offset."""

    records: list[dict[str, Any]]
    next_offset: int


class ArtifactEntry(pydantic.BaseModel):
    name: str
    size: int


class ArtifactList(pydantic.BaseModel):
    artifacts: list[ArtifactEntry]


class HealthResponse(pydantic.BaseModel):
    status: Literal["ok"]
    version: str
    active_jobs: int
