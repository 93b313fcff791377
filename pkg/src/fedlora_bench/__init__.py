"""Federated LoRA fine-tuning benchmark on simulated edge devices."""

from .fed_methods import MethodKind, StrategyKind
from .protocols import dense_rank, derive_targets

__version__ = "0.1.0"

__all__ = ["MethodKind", "StrategyKind", "dense_rank", "derive_targets", "__version__"]
