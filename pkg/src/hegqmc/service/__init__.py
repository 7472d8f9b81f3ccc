from .app import check_config, create_app
from .jobs import JobManager

__all__ = ["check_config", "create_app", "JobManager"]
