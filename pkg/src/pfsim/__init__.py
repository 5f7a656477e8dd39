"""Personalized federated learning simulator and benchmark harness."""

from pfsim.config import ConfigError, ExperimentConfig, build_config, parse_config
from pfsim.data import ClientData, DataSplit, DeviceProfile, GroupSpec, synth_generate
from pfsim.metrics import EvalReport, FairnessReport, SystemReport
from pfsim.models import ModelSpec, init_params
from pfsim.params import KeyMask, NamedParams
from pfsim.privacy import DpConfig
from pfsim.runtime import RunResult, RuntimeConfig, run_experiment, run_federated
from pfsim.strategies import StrategyConfig

__version__ = "0.1.0"

__all__ = [
    "ClientData",
    "ConfigError",
    "DataSplit",
    "DeviceProfile",
    "DpConfig",
    "EvalReport",
    "ExperimentConfig",
    "FairnessReport",
    "GroupSpec",
    "KeyMask",
    "ModelSpec",
    "NamedParams",
    "RunResult",
    "RuntimeConfig",
    "StrategyConfig",
    "SystemReport",
    "build_config",
    "init_params",
    "parse_config",
    "run_experiment",
    "run_federated",
    "synth_generate",
]
