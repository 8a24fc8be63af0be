"""Deterministic dense numerics: layers with analytic backward passes,
AdamW, cosine schedule, counter-based RNG, tensor container IO, and a
finite-difference gradient-check harness."""

from tempoground.numerics.rng import Rng, splitmix64
from tempoground.numerics.params import (
    Parameter,
    ParamStore,
    adamw_step,
    cosine_lr,
)
from tempoground.numerics.checkpoint import read_tensors, write_tensors
from tempoground.numerics.gradcheck import GradCheckReport, grad_check

__all__ = [
    "Rng",
    "splitmix64",
    "Parameter",
    "ParamStore",
    "adamw_step",
    "cosine_lr",
    "read_tensors",
    "write_tensors",
    "GradCheckReport",
    "grad_check",
]
