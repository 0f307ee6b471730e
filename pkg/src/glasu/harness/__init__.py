from .config import ExperimentConfig, load_config
from .experiment import (Centralized, ExperimentReport, Glasu, SimCentralized, Standalone,
                         apply_preset, run_experiment)
from .fixtures import make_sbm_fixture

__all__ = ["ExperimentConfig", "load_config", "Centralized", "ExperimentReport", "Glasu",
           "SimCentralized", "Standalone", "apply_preset", "run_experiment", "make_sbm_fixture"]
