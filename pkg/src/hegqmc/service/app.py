"""HTTP front end: job submission, status, traces, and artifact download."""

import contextlib
import json
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse

from .. import __version__
from ..config import validate_config
from ..errors import ConfigurationError
from ..runner import DMC_TRACE_NAME, TRACE_NAME
from ..sr import learning_rate_with_warning
from .jobs import Job, JobManager
from .models import (
    ArtifactEntry,
    ArtifactList,
    HealthResponse,
    JobInfo,
    JobList,
    JobRequest,
    TracePage,
    ValidateRequest,
    ValidateResponse,
)

DEFAULT_OUTPUT_ROOT = "hegqmc_jobs"


def _job_info(job: Job) -> JobInfo:
    return JobInfo(
        id=job.id,
        kind=job.kind,
        state=job.state,
        label=job.label,
        created=job.created,
        started=job.started,
        finished=job.finished,
        error=job.error,
        output_dir=str(job.output_dir),
        summary=job.summary,
    )


def check_config(data: dict) -> ValidateResponse:
    """Shared by the endpoint and the CLI validate subcommand."""
    try:
        config = validate_config(data)
    except ConfigurationError as exc:
        return ValidateResponse(valid=False, errors=str(exc).splitlines())
    eta = config.optimizer.learning_rate
    warnings = []
    if eta is None:
        eta, note = learning_rate_with_warning(config.system.rs)
        if note is not None:
            warnings.append(note)
    return ValidateResponse(
        valid=True,
        warnings=warnings,
        resolved=config.resolved(),
        config_hash=config.config_hash(),
        learning_rate=eta,
    )


def create_app(output_root: str | Path = DEFAULT_OUTPUT_ROOT) -> FastAPI:
    manager = JobManager(output_root)

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        manager.shutdown()

    app = FastAPI(title="hegqmc", version=__version__, lifespan=lifespan)
    app.state.manager = manager

    def find(job_id: str) -> Job:
        job = manager.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return job

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok", version=__version__, active_jobs=manager.n_active()
        )

    @app.post("/config/validate", response_model=ValidateResponse)
    def validate(request: ValidateRequest) -> ValidateResponse:
        return check_config(request.config)

    @app.post("/jobs", response_model=JobInfo, status_code=201)
    def submit(request: JobRequest) -> JobInfo:
        report = check_config(request.config)
        if not report.valid:
            raise HTTPException(status_code=422, detail=report.errors)
        config = validate_config(request.config)
        try:
            job = manager.submit(
                request.kind,
                config,
                resume=request.resume,
                force_resume=request.force_resume,
                label=request.label,
            )
        except ConfigurationError as exc:
            raise HTTPException(status_code=422, detail=[str(exc)])
        return _job_info(job)

    @app.get("/jobs", response_model=JobList)
    def list_jobs() -> JobList:
        return JobList(jobs=[_job_info(j) for j in manager.list()])

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def job_status(job_id: str) -> JobInfo:
        return _job_info(find(job_id))

    @app.post("/jobs/{job_id}/cancel", response_model=JobInfo)
    def cancel(job_id: str) -> JobInfo:
        find(job_id)
        return _job_info(manager.cancel(job_id))

    @app.get("/jobs/{job_id}/trace", response_model=TracePage)
    def trace(job_id: str, offset: int = 0) -> TracePage:
        job = find(job_id)
        name = DMC_TRACE_NAME if job.kind == "dmc" else TRACE_NAME
        path = job.output_dir / name
        if offset < 0 or not path.exists():
            return TracePage(records=[], next_offset=max(offset, 0))
        lines = path.read_text().splitlines()[offset:]
        return TracePage(
            records=[json.loads(line) for line in lines],
            next_offset=offset + len(lines),
        )

    @app.get("/jobs/{job_id}/artifacts", response_model=ArtifactList)
    def artifacts(job_id: str) -> ArtifactList:
        job = find(job_id)
        entries = [
            ArtifactEntry(name=p.name, size=p.stat().st_size)
            for p in sorted(job.output_dir.iterdir())
            if p.is_file()
        ]
        return ArtifactList(artifacts=entries)

    @app.get("/jobs/{job_id}/artifacts/{name}")
    def download(job_id: str, name: str) -> FileResponse:
        job = find(job_id)
        path = (job.output_dir / name).resolve()
        # resolving first defeats traversal through ".." or encoded slashes
        if path.parent != job.output_dir.resolve() or not path.is_file():
            raise HTTPException(status_code=404, detail=f"no artifact {name}")
        return FileResponse(path)

    return app
