"""Federated unlearning simulator: a small numpy autodiff engine, FedAvg training,
KL-based unlearning against third-party data, and a membership-inference audit."""

from .errors import (
    ArchMismatchError, ConfigError, ContractError, DataFormatError, FedUnlearnError, ShapeError,
)
from .tensor import SGD, SgdConfig, Tensor, no_grad
from .nn import Model, build_har_net, build_lenet5, build_mlp, load_model, save_model
from .federation import FederationConfig, FederationState, fedavg, retrain_baseline, run_federation
from .unlearning import UnlearnConfig, UnlearnTrace, unlearn
from .mia import AttackModel, MiaVerdict, evaluate_unlearning, train_attack
from .seeding import derive_seed

__version__ = "0.1.0"

__all__ = [
    "ArchMismatchError", "ConfigError", "ContractError", "DataFormatError", "FedUnlearnError", "ShapeError",
    "SGD", "SgdConfig", "Tensor", "no_grad",
    "Model", "build_har_net", "build_lenet5", "build_mlp", "load_model", "save_model",
    "FederationConfig", "FederationState", "fedavg", "retrain_baseline", "run_federation",
    "UnlearnConfig", "UnlearnTrace", "unlearn",
    "AttackModel", "MiaVerdict", "evaluate_unlearning", "train_attack",
    "derive_seed",
]
