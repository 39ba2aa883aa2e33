"""Compression operators for agent-to-server messages.

All operators act row-wise on float64 arrays.  ``compress`` handles one
vector, ``compress_batch`` a stack of vectors with one random stream per
row; ``compress`` is literally ``compress_batch`` on a single row so the two
paths are bit-identical.

String forms accepted by :func:`parse_compressor`::

    none            identity
    topk:0.5        keep the largest half (float -> fraction of the length)
    topk:3          keep the 3 largest entries (int -> absolute count)
    randk:0.5       same convention as topk
    dropout-b:0.5   keep each entry with probability 0.5
    dropout-u:0.5   keep with probability 0.5 and rescale by 1/0.5
    qsgd:1          1-bit stochastic quantisation
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .rng import RngStream

__all__ = [
    "Kind",
    "CompressorSpec",
    "ContractionEstimate",
    "parse_compressor",
    "compress",
    "compress_batch",
    "analytic_delta",
    "estimate_contraction",
    "transmitted_bytes",
    "qsgd_scale",
]


class Kind(str, enum.Enum):
    TOPK = "topk"
    RANDK = "randk"
    DROPOUT_B = "dropout-b"
    DROPOUT_U = "dropout-u"
    QSGD = "qsgd"
    IDENTITY = "none"


@dataclass(frozen=True)
class CompressorSpec:
    """A compression operator and its single parameter.

    ``k`` is an absolute entry count and ``fraction`` a share of the vector
    length; TopK/RandK take exactly one of them.
    """

    kind: Kind
    k: int | None = None
    fraction: float | None = None
    p: float | None = None
    bits: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        kind = self.kind
        if kind in (Kind.TOPK, Kind.RANDK):
            if (self.k is None) == (self.fraction is None):
                raise ConfigurationError(f"{kind.value} needs exactly one of k or fraction")
            if self.k is not None and self.k < 1:
                raise ConfigurationError(f"{kind.value}: k must be >= 1, got {self.k}")
            if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
                raise ConfigurationError(f"{kind.value}: fraction must lie in (0, 1], got {self.fraction}")
        elif kind in (Kind.DROPOUT_B, Kind.DROPOUT_U):
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise ConfigurationError(f"{kind.value}: p must lie in [0, 1], got {self.p}")
            if kind is Kind.DROPOUT_U and self.p == 0.0:
                raise ConfigurationError("dropout-u: p = 0 makes the rescaling undefined")
        elif kind is Kind.QSGD:
            if self.bits is None or int(self.bits) != self.bits or self.bits < 1:
                raise ConfigurationError(f"qsgd: bits must be a positive integer, got {self.bits}")

    @classmethod
    def identity(cls) -> "CompressorSpec":
        return cls(Kind.IDENTITY)

    @classmethod
    def topk(cls, k: int | None = None, fraction: float | None = None) -> "CompressorSpec":
        return cls(Kind.TOPK, k=k, fraction=fraction)

    @classmethod
    def randk(cls, k: int | None = None, fraction: float | None = None) -> "CompressorSpec":
        return cls(Kind.RANDK, k=k, fraction=fraction)

    @classmethod
    def dropout_b(cls, p: float) -> "CompressorSpec":
        return cls(Kind.DROPOUT_B, p=p)

    @classmethod
    def dropout_u(cls, p: float) -> "CompressorSpec":
        return cls(Kind.DROPOUT_U, p=p)

    @classmethod
    def qsgd(cls, bits: int) -> "CompressorSpec":
        return cls(Kind.QSGD, bits=bits)

    def resolve_k(self, dim: int) -> int:
        """Number of kept entries for TopK/RandK on a ``dim``-long vector."""
        if self.kind not in (Kind.TOPK, Kind.RANDK):
            raise ConfigurationError(f"{self.kind.value} has no k")
        k = self.k if self.k is not None else max(1, int(round(self.fraction * dim)))
        if k > dim:
            raise ConfigurationError(f"{self.kind.value}: k={k} exceeds vector length {dim}")
        return k

    def to_string(self) -> str:
        if self.kind is Kind.IDENTITY:
            return "none"
        if self.kind in (Kind.TOPK, Kind.RANDK):
            arg = str(self.k) if self.k is not None else repr(float(self.fraction))
        elif self.kind is Kind.QSGD:
            arg = str(self.bits)
        else:
            arg = repr(float(self.p))
        return f"{self.kind.value}:{arg}"

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for name in ("k", "fraction", "p", "bits"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CompressorSpec":
        unknown = set(data) - {"kind", "k", "fraction", "p", "bits"}
        if unknown:
            raise ConfigurationError(f"unknown compressor fields: {sorted(unknown)}")
        try:
            kind = Kind(data["kind"])
        except (KeyError, ValueError):
            raise ConfigurationError(
                f"compressor kind must be one of {[k.value for k in Kind]}, got {data.get('kind')!r}"
            ) from None
        return cls(kind, k=data.get("k"), fraction=data.get("fraction"), p=data.get("p"), bits=data.get("bits"))

    def __str__(self) -> str:
        return self.to_string()


def parse_compressor(text: str) -> CompressorSpec:
    """Parse ``"topk:0.5"``-style strings (see module docstring)."""
    text = text.strip().lower()
    if text in ("none", "identity"):
        return CompressorSpec.identity()
    name, sep, arg = text.partition(":")
    if not sep or not arg:
        raise ConfigurationError(f"cannot parse compressor {text!r}; expected e.g. 'topk:0.5'")
    try:
        kind = Kind(name)
    except ValueError:
        raise ConfigurationError(
            f"unknown compressor {name!r}; valid: {[k.value for k in Kind]}"
        ) from None
    try:
        if kind in (Kind.TOPK, Kind.RANDK):
            if any(c in arg for c in ".eE"):
                return CompressorSpec(kind, fraction=float(arg))
            return CompressorSpec(kind, k=int(arg))
        if kind is Kind.QSGD:
            return CompressorSpec.qsgd(int(arg))
        return CompressorSpec(kind, p=float(arg))
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad parameter in compressor {text!r}") from None


def qsgd_scale(bits: int, dim: int) -> float:
    """The damping factor ``w = 1 + min(sqrt(d)/2^b, d/2^(2b))``."""
    levels = 2.0**bits
    return 1.0 + min(math.sqrt(dim) / levels, dim / levels**2)


def _check(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"expected a 2-D batch, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("compressor input contains NaN or inf")
    return x


def _uniforms(rngs: Sequence[RngStream], m: int, d: int) -> np.ndarray:
    if len(rngs) != m:
        raise ConfigurationError(f"need one rng per row: {m} rows, {len(rngs)} streams")
    return np.stack([rng.random(d) for rng in rngs]) if m else np.empty((0, d))


def compress_batch(spec: CompressorSpec, x: np.ndarray, rngs: Sequence[RngStream] | None = None) -> np.ndarray:
    """Compress each row of ``x`` (shape ``(m, d)``) independently.

    Randomised operators draw exactly one length-``d`` block from row ``i``'s
    stream per call, whatever the input values are.
    """
    x = _check(x)
    m, d = x.shape
    kind = spec.kind

    if kind is Kind.IDENTITY:
        return x.copy()

    if kind is Kind.TOPK:
        k = spec.resolve_k(d)
        # stable sort: equal magnitudes keep ascending index order
        order = np.argsort(-np.abs(x), axis=1, kind="stable")[:, :k]
        out = np.zeros_like(x)
        rows = np.arange(m)[:, None]
        out[rows, order] = x[rows, order]
        return out

    if rngs is None:
        raise ConfigurationError(f"{kind.value} is randomised and needs rng streams")

    if kind is Kind.RANDK:
        k = spec.resolve_k(d)
        if len(rngs) != m:
            raise ConfigurationError(f"need one rng per row: {m} rows, {len(rngs)} streams")
        out = np.zeros_like(x)
        for i, rng in enumerate(rngs):
            keep = rng.permutation(d)[:k]
            out[i, keep] = x[i, keep]
        return out

    u = _uniforms(rngs, m, d)

    if kind is Kind.DROPOUT_B:
        return np.where(u <= spec.p, x, 0.0)

    if kind is Kind.DROPOUT_U:
        return np.where(u <= spec.p, x / spec.p, 0.0)

    if kind is Kind.QSGD:
        levels = 2.0**spec.bits
        w = qsgd_scale(spec.bits, d)
        norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        safe = np.where(norm > 0.0, norm, 1.0)
        level = np.floor(levels * np.abs(x) / safe + u)
        out = np.sign(x) * (safe / (levels * w)) * level
        out[norm[:, 0] == 0.0] = 0.0
        return out

    raise ConfigurationError(f"unhandled compressor kind {kind!r}")


def compress(spec: CompressorSpec, x: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
    """Apply ``spec`` to a single vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected a 1-D vector, got shape {x.shape}")
    return compress_batch(spec, x[None, :], None if rng is None else [rng])[0]


def analytic_delta(spec: CompressorSpec, dim: int) -> float | None:
    """Closed-form contraction constant where one is known, else ``None``."""
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if spec.kind is Kind.IDENTITY:
        return 1.0
    if spec.kind in (Kind.TOPK, Kind.RANDK):
        return spec.resolve_k(dim) / dim
    if spec.kind is Kind.DROPOUT_B:
        return float(spec.p)
    return None


@dataclass(frozen=True)
class ContractionEstimate:
    delta_hat: float
    trials: int
    dim: int
    standard_error: float
    contractive: bool


def _probe_directions(dim: int, n_random: int, rng: RngStream) -> np.ndarray:
    ones = np.ones((1, dim))
    alternating = np.where(np.arange(dim) % 2 == 0, 1.0, -1.0)[None, :]
    axes = np.eye(dim)[: min(dim, 4)]
    gauss = rng.standard_normal((n_random, dim))
    return np.concatenate([ones, alternating, axes, gauss])


def estimate_contraction(
    spec: CompressorSpec,
    dim: int,
    trials: int,
    rng: RngStream,
    directions: int = 20,
) -> ContractionEstimate:
    """Monte-Carlo worst-case estimate of ``delta`` in E||C(x)-x||^2 <= (1-delta)||x||^2.

    Probes the all-ones and alternating-sign vectors, a few coordinate axes
    and ``directions`` Gaussian directions, ``trials`` compressor draws each.
    ``contractive`` is false when the estimate is not above three standard
    errors of the worst direction's mean ratio.
    """
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    directions = max(directions, 20)
    probes = _probe_directions(dim, directions, rng)
    worst_ratio, worst_se = -np.inf, 0.0
    # one sub-stream per probe keeps the estimate independent of probe order
    seeds = rng.integers(0, 2**63, size=len(probes))
    for x, s in zip(probes, seeds):
        local = np.random.Generator(np.random.Philox(int(s)))
        batch = np.broadcast_to(x, (trials, dim))
        out = compress_batch(spec, batch, [local] * trials if spec.kind is not Kind.TOPK else None)
        ratios = np.sum((out - batch) ** 2, axis=1) / np.dot(x, x)
        mean = float(ratios.mean())
        se = float(ratios.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
        if mean > worst_ratio:
            worst_ratio, worst_se = mean, se
    delta_hat = 1.0 - worst_ratio
    return ContractionEstimate(
        delta_hat=delta_hat,
        trials=trials,
        dim=dim,
        standard_error=worst_se,
        contractive=bool(delta_hat > 3.0 * worst_se),
    )


def transmitted_bytes(spec: CompressorSpec, message: np.ndarray) -> int:
    """Bytes-on-the-wire proxy for one compressed message.

    Selection schemes send (index, value) pairs accounted as 8 bytes per
    nonzero; qsgd sends ``bits`` per entry plus one float64 norm.
    """
    message = np.asarray(message)
    d = message.shape[-1]
    if spec.kind is Kind.QSGD:
        per_row = int(math.ceil(d * spec.bits / 8)) + 8
        return per_row * (message.size // d)
    if spec.kind is Kind.IDENTITY:
        return 8 * message.size
    return 8 * int(np.count_nonzero(message))
