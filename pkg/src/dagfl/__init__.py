"""DAG-ledger federated learning: contributors publish model updates into a DAG,
committees settle rewards, and a proof-of-learning protocol audits updates."""

from .config import ExperimentConfig, load_config
from .sim import RunResult, run_experiment

__all__ = ["ExperimentConfig", "RunResult", "load_config", "run_experiment"]
__version__ = "0.1.0"
