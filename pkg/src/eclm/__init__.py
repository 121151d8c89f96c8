"""Desk-scale simulator of modular edge-cloud collaborative learning."""

__version__ = "0.1.0"

from .config import ScenarioConfig
from .orchestrator import run_baseline, run_offline, run_online

__all__ = ["ScenarioConfig", "run_offline", "run_online", "run_baseline", "__version__"]
