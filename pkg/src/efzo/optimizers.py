"""Error-feedback zeroth-order SGD, single-agent and federated.

The update loop for one agent is::

    u ~ N(0, I)
    g = (loss(x + mu u) - loss(x)) / mu * u
    p = g + e
    x <- x - eta * C(p)
    e <- p - C(p)

The federated round runs the same agent-side recipe on every agent's
structured estimate of its local loss over all ``N*d`` coordinates, then
the server averages the compressed messages (optionally rescaled to unit
norm) and moves every agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .compressors import CompressorSpec, compress, compress_batch, transmitted_bytes
from .errors import ConfigurationError, DivergenceError
from .rng import RngStream
from .zo import DEFAULT_MU, SmoothingParams, WorldView, two_point_estimate

DIVERGENCE_LIMIT = 1e6


NORMALIZE_NONE = "none"
NORMALIZE_GLOBAL = "global"
NORMALIZE_PER_AGENT = "per-agent"
NORMALIZE_MODES = (NORMALIZE_NONE, NORMALIZE_GLOBAL, NORMALIZE_PER_AGENT)


@dataclass(frozen=True)
class StepSchedule:
    """Step size, smoothing radius and server-side normalisation.

    ``normalize`` is ``"none"``, ``"global"`` (the averaged message is
    rescaled to unit norm) or ``"per-agent"`` (each agent's ``d``-block of
    the average is rescaled to unit norm, so every agent moves exactly
    ``eta``).
    """

    eta: float = 1.0
    mu: float = DEFAULT_MU
    normalize: str = NORMALIZE_NONE

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be positive, got {self.mu}")
        if self.normalize not in NORMALIZE_MODES:
            raise ConfigurationError(f"normalize must be one of {NORMALIZE_MODES}, got {self.normalize!r}")

    @property
    def normalize_aggregate(self) -> bool:
        return self.normalize != NORMALIZE_NONE

    @property
    def smoothing(self) -> SmoothingParams:
        return SmoothingParams(self.mu)


@dataclass
class EfState:
    x: np.ndarray
    e: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, x0) -> "EfState":
        x0 = np.array(x0, dtype=np.float64)
        return cls(x=x0, e=np.zeros_like(x0), t=0)


def _guard(x: np.ndarray, step: int):
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"iterate diverged at step {step}", step)


def ef_zo_sgd_step(
    st: EfState,
    loss: Callable[[np.ndarray, int], float],
    sched: StepSchedule,
    comp: CompressorSpec,
    rng: RngStream,
    comp_rng: RngStream | None = None,
) -> EfState:
    """One iteration of single-agent EF-ZO-SGD.

    ``rng`` supplies the Gaussian direction; ``comp_rng`` (default: ``rng``)
    supplies the compressor's randomness.
    """
    u = rng.standard_normal(st.x.shape)
    g = two_point_estimate(loss, st.x, sched.smoothing, u, st.t)
    p = g + st.e
    c = compress(comp, p, rng if comp_rng is None else comp_rng)
    x = st.x - sched.eta * c
    _guard(x, st.t)
    return EfState(x=x, e=p - c, t=st.t + 1)


@dataclass
class FedState:
    """Server positions plus every agent's error memory.

    ``errors[i]`` is agent ``i``'s memory over all ``N*d`` coordinates.  The
    remaining fields describe the round that produced this state.
    """

    positions: np.ndarray
    errors: np.ndarray
    step: int = 0
    displacement: np.ndarray | None = None
    aggregate: np.ndarray | None = None
    estimate_norm: float = 0.0
    bytes_sent: int = 0

    @classmethod
    def for_agents(cls, positions, n_agents: int) -> "FedState":
        positions = np.array(positions, dtype=np.float64).reshape(-1)
        return cls(positions=positions, errors=np.zeros((n_agents, positions.size)), step=0)


def server_update(
    positions: np.ndarray, messages: np.ndarray, eta: float, normalize: str = NORMALIZE_NONE
) -> tuple[np.ndarray, np.ndarray]:
    """Average ``messages`` (one row per agent) and take a step.

    Returns the new positions and the applied displacement.  A zero
    aggregate (or zero agent block, in per-agent mode) means no movement.
    """
    n = messages.shape[0]
    aggregate = messages.sum(axis=0) / n
    if normalize == NORMALIZE_GLOBAL:
        norm = math.sqrt(float(np.dot(aggregate, aggregate)))
        aggregate = aggregate / norm if norm > 0.0 else np.zeros_like(aggregate)
    elif normalize == NORMALIZE_PER_AGENT:
        blocks = aggregate.reshape(n, -1)
        norms = np.sqrt(np.sum(blocks * blocks, axis=1, keepdims=True))
        aggregate = np.where(norms > 0.0, blocks / np.where(norms > 0.0, norms, 1.0), 0.0).reshape(-1)
    elif normalize != NORMALIZE_NONE:
        raise ConfigurationError(f"unknown normalisation {normalize!r}")
    step = eta * aggregate
    return positions - step, -step


def _agent_side(estimates: np.ndarray, errors: np.ndarray, comp: CompressorSpec, comp_rngs, error_feedback: bool):
    p = estimates + errors if error_feedback else estimates
    c = compress_batch(comp, p, comp_rngs)
    new_errors = p - c if error_feedback else np.zeros_like(errors)
    return c, new_errors


def _round(state, estimates, sched, comp, comp_rngs, error_feedback):
    if estimates.shape != state.errors.shape:
        raise ConfigurationError(
            f"estimate shape {estimates.shape} does not match agent memory {state.errors.shape}"
        )
    messages, errors = _agent_side(estimates, state.errors, comp, comp_rngs, error_feedback)
    positions, moved = server_update(state.positions, messages, sched.eta, sched.normalize)
    _guard(positions, state.step)
    return FedState(
        positions=positions,
        errors=errors,
        step=state.step + 1,
        displacement=moved,
        aggregate=-moved / sched.eta,
        estimate_norm=float(np.mean(np.linalg.norm(estimates, axis=1))),
        bytes_sent=transmitted_bytes(comp, messages),
    )


def fed_ef_zo_sgd_round(
    state: FedState,
    world: WorldView,
    sched: StepSchedule,
    comp: CompressorSpec,
    rngs: Sequence[RngStream],
    comp_rngs: Sequence[RngStream] | None = None,
    error_feedback: bool = True,
) -> FedState:
    """One FED-EF-ZO-SGD round over all agents.

    Agent ``i`` draws its directions from ``rngs[i]`` and its compressor
    randomness from ``comp_rngs[i]`` (default: the same stream).  With
    ``error_feedback=False`` the memory stays at zero and the raw estimate
    is compressed.
    """
    estimates = world.estimates(sched.smoothing, rngs)
    return _round(state, estimates, sched, comp, rngs if comp_rngs is None else comp_rngs, error_feedback)


def fo_fedavg_ef_round(
    state: FedState,
    world: WorldView,
    sched: StepSchedule,
    comp: CompressorSpec,
    comp_rngs: Sequence[RngStream],
    error_feedback: bool = True,
) -> FedState:
    """Federated round driven by exact local-loss gradients (first-order baseline)."""
    return _round(state, world.gradients(), sched, comp, comp_rngs, error_feedback)


@dataclass
class AgentState:
    x: np.ndarray
    m: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.x)


def sgdm_baseline_step(
    agent: AgentState,
    target: np.ndarray,
    eta: float,
    beta_m: float,
    rng: RngStream,
    mu: float = DEFAULT_MU,
) -> AgentState:
    """Local momentum ZO step on the pure distance-to-target loss.

    The momentum direction is normalised so every step has length ``eta``
    (no step at all when the momentum is exactly zero).
    """
    target = np.asarray(target, dtype=np.float64)

    def source_loss(y, t):
        return 0.5 * np.sum((y - target) ** 2)

    u = rng.standard_normal(agent.x.shape)
    g = two_point_estimate(source_loss, agent.x, SmoothingParams(mu), u)
    m = beta_m * agent.m + g
    norm = math.sqrt(float(np.dot(m, m)))
    x = agent.x - eta * m / norm if norm > 0.0 else agent.x.copy()
    _guard(x, 0)
    return AgentState(x=x, m=m)


@dataclass(frozen=True)
class TheoremParams:
    """Constants entering the convergence bounds.

    ``Q`` and ``Z`` are the heterogeneity constants and only matter for the
    federated bound.
    """

    Delta: float
    sigma: float
    M: float
    L: float
    d: int
    T: int
    delta: float = 1.0
    omega_bar: float = 0.0
    Q: float = 1.0
    Z: float = 0.0

    def __post_init__(self):
        for name in ("Delta", "sigma", "M", "L", "d", "T", "Q"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1], got {self.delta}")
        if self.omega_bar < 0 or self.Z < 0:
            raise ConfigurationError("omega_bar and Z must be non-negative")


def theorem1_schedule(params: TheoremParams) -> StepSchedule:
    d, T = params.d, params.T
    eta = 1.0 / (params.sigma * math.sqrt((d + 4) * params.M * T * params.L))
    mu = 1.0 / ((d + 4) * math.sqrt(T))
    return StepSchedule(eta=eta, mu=mu)


def theorem2_schedule(params: TheoremParams) -> StepSchedule:
    d, T = params.d, params.T
    eta = 1.0 / (params.sigma * math.sqrt((d + 4) * params.M * params.Q * T * params.L))
    mu = 1.0 / ((d + 4) * math.sqrt(T))
    return StepSchedule(eta=eta, mu=mu)


def theorem1_terms(params: TheoremParams) -> list[float]:
    """The eight summands of the single-agent bound, in order."""
    D, s, M, L, d, T, dl, w = (
        params.Delta, params.sigma, params.M, params.L, params.d, params.T, params.delta, params.omega_bar,
    )
    return [
        8 * D * s * (d + 4) ** 0.5 * M**0.5 * L**0.5 / T**0.5,
        8 * s * d * L**1.5 * M**0.5 / (T**1.5 * (d + 3) ** 1.5),
        2 * (d + 6) ** 1.5 * L**2.5 / (s * (d + 4) ** 2.5 * T**1.5 * M**0.5),
        8 * s * (d + 4) ** 0.5 * L**0.5 / (M**0.5 * T**0.5),
        (d + 3) ** 3 * L**2 / ((d + 2) ** 2 * T),
        32 * L / (dl**2 * s**2 * M * T),
        8 * (d + 6) ** 3 * L**3 / (dl**2 * s**2 * (d + 4) ** 3 * M * T**2),
        8 * w * s * (d + 4) ** 0.5 * M**0.5 * L**0.5 / T**0.5,
    ]


def theorem2_terms(params: TheoremParams) -> list[float]:
    """The nine summands of the federated bound, in order."""
    D, s, M, L, d, T, dl, w, Q, Z = (
        params.Delta, params.sigma, params.M, params.L, params.d, params.T,
        params.delta, params.omega_bar, params.Q, params.Z,
    )
    return [
        8 * D * s * (d + 4) ** 0.5 * M**0.5 * Q**0.5 * L**0.5 / T**0.5,
        8 * L**1.5 * d * s * M**0.5 * Q**0.5 / ((d + 4) ** 1.5 * T**1.5),
        8 * L**0.5 * (d + 4) ** 0.5 * M**0.5 * Z**2 / (s * Q**0.5 * T**0.5),
        8 * L**0.5 * (d + 4) ** 0.5 * s / (M**0.5 * Q**0.5 * T**0.5),
        2 * L**2.5 * (d + 6) ** 3 / ((d + 4) ** 1.5 * T**1.5 * s * M**0.5 * Q**0.5),
        32 * L * Z**2 / (s**2 * Q * T * dl**2),
        32 * L / (M * Q * T * dl**2),
        8 * L**3 * (d + 6) ** 3 / ((d + 4) ** 3 * T**2 * s**2 * M * Q),
        8 * w * s * (d + 4) ** 0.5 * M**0.5 * Q**0.5 * L**0.5 / T**0.5,
    ]


def theorem1_bound(params: TheoremParams) -> float:
    """Right-hand side of the single-agent average-squared-gradient bound."""
    return float(sum(theorem1_terms(params)))


def theorem2_bound(params: TheoremParams) -> float:
    """Right-hand side of the federated average-squared-gradient bound."""
    return float(sum(theorem2_terms(params)))
