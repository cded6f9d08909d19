"""Agent-in-the-loop loss weighting for a stagewise-trained restoration process."""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config
from .orchestrator import run
from .trajectory import Trajectory, TrajectoryEntry, load, persist

__all__ = [
    "RunConfig",
    "Trajectory",
    "TrajectoryEntry",
    "load",
    "load_config",
    "parse_config",
    "persist",
    "run",
    "__version__",
]
