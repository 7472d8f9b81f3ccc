"""Background execution of runner jobs with an in-memory registry.

A single worker thread drains the queue, so concurrent submissions
serialize; that matches the compute budget (the runner already saturates
the machine) and keeps job state transitions trivial to reason about.
"""

import dataclasses
import datetime
import queue
import threading
import traceback
import uuid
from pathlib import Path

from ..config import ExperimentConfig
from ..errors import ConfigurationError
from ..runner import run_dmc, run_measure, run_vmc

JOB_LOG_NAME = "job.log"


def _utcnow() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


@dataclasses.dataclass
class Job:
    id: str
    kind: str
    config: ExperimentConfig
    output_dir: Path
    resume: Path | None
    force_resume: bool
    label: str | None
    state: str = "queued"
    created: datetime.datetime = dataclasses.field(default_factory=_utcnow)
    started: datetime.datetime | None = None
    finished: datetime.datetime | None = None
    error: str | None = None
    summary: dict | None = None
    cancel_event: threading.Event = dataclasses.field(default_factory=threading.Event)


class JobManager:
    """Owns the registry, the work queue, and the single worker thread."""

    def __init__(self, output_root: str | Path):
        self.output_root = Path(output_root)
        self.output_root.mkdir(parents=True, exist_ok=True)
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue[str | None] = queue.Queue()
        self._worker: threading.Thread | None = None

    def submit(
        self,
        kind: str,
        config: ExperimentConfig,
        resume: str | None = None,
        force_resume: bool = False,
        label: str | None = None,
    ) -> Job:
        if kind == "measure" and resume is None:
            raise ConfigurationError("measure jobs need a checkpoint in 'resume'")
        job_id = uuid.uuid4().hex[:12]
        job = Job(
            id=job_id,
            kind=kind,
            config=config,
            output_dir=self.output_root / job_id,
            resume=Path(resume) if resume is not None else None,
            force_resume=force_resume,
            label=label,
        )
        job.output_dir.mkdir(parents=True, exist_ok=True)
        with self._lock:
            self._jobs[job_id] = job
            self._ensure_worker()
        self._queue.put(job_id)
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def list(self) -> list[Job]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda j: j.created)

    def cancel(self, job_id: str) -> Job | None:
        job = self.get(job_id)
        if job is not None:
            job.cancel_event.set()
        return job

    def n_active(self) -> int:
        with self._lock:
            return sum(1 for j in self._jobs.values() if j.state in ("queued", "running"))

    def shutdown(self) -> None:
        """Cancel everything and wait for the worker to drain."""
        for job in self.list():
            job.cancel_event.set()
        if self._worker is not None:
            self._queue.put(None)
            self._worker.join()
            self._worker = None

    # worker side

    def _ensure_worker(self) -> None:
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._drain, daemon=True)
            self._worker.start()

    def _drain(self) -> None:
        while True:
            job_id = self._queue.get()
            if job_id is None:
                return
            job = self.get(job_id)
            if job is None:
                continue
            self._execute(job)

    def _execute(self, job: Job) -> None:
        if job.cancel_event.is_set():
            job.state = "cancelled"
            job.finished = _utcnow()
            return
        job.state = "running"
        job.started = _utcnow()
        log_path = job.output_dir / JOB_LOG_NAME
        with open(log_path, "a") as log_fh:

            def log(msg: str) -> None:
                stamp = _utcnow().strftime("%H:%M:%S")
                log_fh.write(f"[{stamp}] {msg}\n")
                log_fh.flush()

            try:
                summary = self._dispatch(job, log)
            except Exception as exc:  # state machine owns all failure kinds
                job.state = "failed"
                job.error = f"{type(exc).__name__}: {exc}"
                log("failed:\n" + traceback.format_exc())
            else:
                job.summary = summary
                job.state = "cancelled" if summary.get("cancelled") else "done"
        job.finished = _utcnow()

    def _dispatch(self, job: Job, log) -> dict:
        if job.kind == "vmc":
            return run_vmc(
                job.config,
                job.output_dir,
                resume=job.resume,
                force_resume=job.force_resume,
                cancel=job.cancel_event,
                log=log,
            )
        if job.kind == "dmc":
            return run_dmc(
                job.config,
                job.output_dir,
                resume=job.resume,
                force_resume=job.force_resume,
                cancel=job.cancel_event,
                log=log,
            )
        return run_measure(
            job.config,
            job.resume,
            job.output_dir,
            force=job.force_resume,
            cancel=job.cancel_event,
            log=log,
        )
