"""Per-run metric records and the method catalogue shared by both scenarios."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compressors import CompressorSpec, parse_compressor
from .errors import ConfigurationError

FED = "fed"
FIRST_ORDER = "fo"
SGDM = "sgdm"


@dataclass(frozen=True)
class Method:
    """How the agents move: federated ZO, federated first-order, or local SGDm."""

    name: str
    algorithm: str = FED
    compressor: CompressorSpec = field(default_factory=CompressorSpec.identity)
    error_feedback: bool = True

    def __post_init__(self):
        if self.algorithm not in (FED, FIRST_ORDER, SGDM):
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")


def _fed(name, text, ef=True):
    return Method(name, FED, parse_compressor(text), ef)


METHODS: dict[str, Method] = {
    m.name: m
    for m in [
        Method("sgdm", SGDM),
        _fed("no-comp", "none"),
        _fed("qsgd1b-ef", "qsgd:1"),
        _fed("qsgd1b", "qsgd:1", ef=False),
        _fed("qsgd3b-ef", "qsgd:3"),
        _fed("qsgd3b", "qsgd:3", ef=False),
        _fed("topk-ef", "topk:0.5"),
        _fed("topk", "topk:0.5", ef=False),
        _fed("randk-ef", "randk:0.5"),
        _fed("randk", "randk:0.5", ef=False),
        _fed("dropout-b", "dropout-b:0.5"),
        _fed("dropout-u", "dropout-u:0.5"),
        Method("fo-qsgd1b-ef", FIRST_ORDER, parse_compressor("qsgd:1")),
    ]
}


def get_method(name: str) -> Method:
    """Look up a catalogue method, or build ``fed`` from a compressor string.

    ``"topk:0.3"`` gives EF-enabled FED-EF-ZO-SGD with that compressor; a
    trailing ``"/noef"`` disables error feedback.
    """
    if name in METHODS:
        return METHODS[name]
    text, _, flag = name.partition("/")
    try:
        comp = parse_compressor(text)
    except ConfigurationError:
        raise ConfigurationError(f"unknown method {name!r}; valid: {sorted(METHODS)} or a compressor string") from None
    return Method(name, FED, comp, error_feedback=flag != "noef")


@dataclass
class MetricsSeries:
    """Per-step records of one simulation run.

    ``cumulative_collisions`` and ``bytes_transmitted`` are running totals.
    If the run diverged, entries from ``diverged_step`` on are NaN (errors,
    norms) or frozen (counters).
    """

    tracking_error: np.ndarray
    cumulative_collisions: np.ndarray
    grad_norm: np.ndarray
    bytes_transmitted: np.ndarray
    diverged: bool = False
    diverged_step: int | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    trajectory: np.ndarray | None = None

    @classmethod
    def empty(cls, steps: int) -> "MetricsSeries":
        return cls(
            tracking_error=np.full(steps, np.nan),
            cumulative_collisions=np.zeros(steps, dtype=np.int64),
            grad_norm=np.full(steps, np.nan),
            bytes_transmitted=np.zeros(steps, dtype=np.int64),
        )

    @property
    def steps(self) -> int:
        return len(self.tracking_error)

    @property
    def final_error(self) -> float:
        return float(self.tracking_error[-1])

    @property
    def total_collisions(self) -> int:
        return int(self.cumulative_collisions[-1]) if self.steps else 0

    def mark_diverged(self, step: int):
        self.diverged = True
        self.diverged_step = step
        if step > 0:
            self.cumulative_collisions[step:] = self.cumulative_collisions[step - 1]
            self.bytes_transmitted[step:] = self.bytes_transmitted[step - 1]
            for arr in self.extra.values():
                arr[step:] = arr[step - 1]
