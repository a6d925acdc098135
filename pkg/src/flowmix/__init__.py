"""Finite mixtures of normalizing flows trained by an exact discrete-latent ELBO."""

from .autodiff import Node, Param, backward, no_grad
from .datasets import LabeledDataset, gen_pinwheel, gen_two_circles, load_mnist_idx
from .errors import (ConfigError, ContractError, DomainError, FlowmixError, FormatError,
                     NumericError, ShapeError)
from .flows import FlowStack, build_stack, flow_log_prob, flow_sample
from .mixture import (MixtureModel, TemperatureSchedule, assign_cluster, elbo,
                      exact_log_evidence, exact_posterior, sample_component)
from .nn import MLP, Adam

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigError", "ContractError", "DomainError", "FlowStack", "FlowmixError",
    "FormatError", "LabeledDataset", "MLP", "MixtureModel", "Node", "NumericError", "Param",
    "ShapeError", "TemperatureSchedule", "assign_cluster", "backward", "build_stack", "elbo",
    "exact_log_evidence", "exact_posterior", "flow_log_prob", "flow_sample", "gen_pinwheel",
    "gen_two_circles", "load_mnist_idx", "no_grad", "sample_component",
]
