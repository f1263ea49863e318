"""Sequence modeling blocks (selective state space and attention) plus a
scaling benchmark harness, implemented on numpy.

The pieces most scripts need are re-exported here; the submodules hold
the rest (seqcore, ssm, layers, attention, archs, presets, bench, cli).
"""

from .bench import BenchConfig, detect_crossover, fit_exponent, measure, measure_blocks
from .presets import PRESETS, build_model, load_preset
from .seqcore import DTYPE, Rng
from .ssm import make_lti_params, make_params, ssm_recurrence, ssm_scan

__version__ = "0.1.0"

__all__ = [
    "BenchConfig",
    "DTYPE",
    "PRESETS",
    "Rng",
    "build_model",
    "detect_crossover",
    "fit_exponent",
    "load_preset",
    "make_lti_params",
    "make_params",
    "measure",
    "measure_blocks",
    "ssm_recurrence",
    "ssm_scan",
]
