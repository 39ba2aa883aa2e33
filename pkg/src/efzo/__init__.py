"""Error-feedback compressed zeroth-order optimisation for multi-agent tracking."""

from .compressors import CompressorSpec, compress, parse_compressor
from .metrics import METHODS, Method, MetricsSeries, get_method
from .optimizers import StepSchedule, ef_zo_sgd_step, fed_ef_zo_sgd_round

__all__ = [
    "CompressorSpec",
    "compress",
    "parse_compressor",
    "METHODS",
    "Method",
    "MetricsSeries",
    "get_method",
    "StepSchedule",
    "ef_zo_sgd_step",
    "fed_ef_zo_sgd_round",
]
