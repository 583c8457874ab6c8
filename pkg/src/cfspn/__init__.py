"""Class-conditional probabilistic circuits with two-step counterfactuals.

The package trains sum-product networks as class-conditional density models
and explains their decisions by moving an input along two closed-form
gradient steps: one across the decision boundary, one toward higher density.
"""

from .circuit import (
    BernoulliLeaf,
    CategoricalLeaf,
    Circuit,
    CircuitFormatError,
    GaussianLeaf,
    ProductNode,
    SumNode,
    ValidationReport,
    load,
    save,
    validate,
)
from .structure import StructureConfig, build_circuit
from .training import TrainConfig, TrainReport, cross_validate, fit
from .counterfactual import CfConfig, CfResult, generate, wachter_baseline

__all__ = [
    "BernoulliLeaf",
    "CategoricalLeaf",
    "CfConfig",
    "CfResult",
    "Circuit",
    "CircuitFormatError",
    "GaussianLeaf",
    "ProductNode",
    "StructureConfig",
    "SumNode",
    "TrainConfig",
    "TrainReport",
    "ValidationReport",
    "build_circuit",
    "cross_validate",
    "fit",
    "generate",
    "load",
    "save",
    "validate",
    "wachter_baseline",
]

__version__ = "0.1.0"
