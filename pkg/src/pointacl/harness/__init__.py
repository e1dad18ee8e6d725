from .config import ConfigError, DataConfig, EvalConfig, ExperimentSpec, load_spec, parse_perturbation
from .experiment import MetricsRecord, ablation_specs, evaluate, run_ablation, run_experiment
from .io import ParseError, read_cloud, write_xyz

__all__ = [
    "ConfigError", "DataConfig", "EvalConfig", "ExperimentSpec", "load_spec", "parse_perturbation",
    "MetricsRecord", "ablation_specs", "evaluate", "run_ablation", "run_experiment",
    "ParseError", "read_cloud", "write_xyz",
]
