"""QuerySAT lab: unsupervised recurrent SAT solving with query-based message passing."""

from .cnf import CnfFormula, check_assignment, load_dataset, parse_dimacs, read_cnf
from .errors import SatLabError
from .models import ModelConfig, build_model, forward
from .training import TrainConfig, evaluate, train

__all__ = [
    "CnfFormula",
    "ModelConfig",
    "SatLabError",
    "TrainConfig",
    "build_model",
    "check_assignment",
    "evaluate",
    "forward",
    "load_dataset",
    "parse_dimacs",
    "read_cnf",
    "train",
]
