"""Federated fine-tuning of pre-trained models that transmits only small parameter subsets."""

__version__ = "0.1.0"

from .comm import CommLedger, cost_to_target, format_cost, round_cost
from .data import Dataset, SyntheticTaskSpec, dirichlet_partition, make_synthetic
from .errors import ConfigError, ContractError, DataError, DivergenceError, ParseError, ShapeError
from .federation import FederationConfig, RoundRecord, aggregate, client_update, run_training
from .models import GlobalModel, ModelSpec, build_model, count_params, load_transmitted, snapshot_transmitted
from .peft import TuningMode, apply_mode
from .privacy import DpConfig, clip_gradient, dp_step, gaussian_sigma
from .tensor import SgdConfig, Tensor, no_grad

__all__ = [
    "CommLedger", "ConfigError", "ContractError", "DataError", "Dataset", "DivergenceError",
    "DpConfig", "FederationConfig", "GlobalModel", "ModelSpec", "ParseError", "RoundRecord",
    "SgdConfig", "ShapeError", "SyntheticTaskSpec", "Tensor", "TuningMode", "aggregate",
    "apply_mode", "build_model", "client_update", "clip_gradient", "cost_to_target",
    "count_params", "dirichlet_partition", "dp_step", "format_cost", "gaussian_sigma",
    "load_transmitted", "make_synthetic", "no_grad", "round_cost", "run_training",
    "snapshot_transmitted",
]
