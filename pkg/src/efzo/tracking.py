"""Multi-agent evasive target tracking with collision-avoidance regularisation.

N agents chase N sources on the plane.  Each source runs straight away
from its own agent at speed ``beta``.  Agents only see distances: each
builds a ZO estimate of its local loss (distance to its source minus a
repulsion term for every sensed neighbour) and the server moves everyone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, DivergenceError, NumericalError
from .metrics import FED, FIRST_ORDER, SGDM, Method, MetricsSeries
from .optimizers import (
    NORMALIZE_PER_AGENT,
    AgentState,
    FedState,
    StepSchedule,
    fed_ef_zo_sgd_round,
    fo_fedavg_ef_round,
    sgdm_baseline_step,
)
from .zo import PERTURB_NEIGHBOR, PERTURB_SELF, WorldView

DEFAULT_LAMBDA = 10.0
# the lookahead shift of the source adds a constant of order
# beta * distance / mu to every quotient; at small mu that swamps the signal
SIM_MU = 1.0


@dataclass(frozen=True)
class TrackingConfig:
    n_agents: int = 20
    dim: int = 2
    sensing_radius: float = 10.0
    collision_radius: float = 3.0
    lam: float = DEFAULT_LAMBDA
    beta: float = 0.1
    neighbor_dropout: float = 0.5
    agent_box: tuple[float, float] = (-100.0, 100.0)
    source_box: tuple[float, float] = (200.0, 400.0)
    steps: int = 1000
    eta: float = 1.0
    mu: float = SIM_MU
    normalize: str = NORMALIZE_PER_AGENT
    perturb: str = PERTURB_NEIGHBOR
    momentum: float = 0.9
    squared_error: bool = False

    def __post_init__(self):
        if self.n_agents < 1 or self.dim < 1 or self.steps < 1:
            raise ConfigurationError("n_agents, dim and steps must be >= 1")
        if not self.sensing_radius > self.collision_radius > 0:
            raise ConfigurationError("need sensing_radius > collision_radius > 0")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if not 0.0 <= self.neighbor_dropout <= 1.0:
            raise ConfigurationError("neighbor_dropout must lie in [0, 1]")
        for name in ("agent_box", "source_box"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} is not ordered: {lo} > {hi}")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(eta=self.eta, mu=self.mu, normalize=self.normalize)


@dataclass
class WorldState:
    agent_positions: np.ndarray
    source_positions: np.ndarray
    agent_velocities: np.ndarray
    source_velocities: np.ndarray
    step: int = 0
    collision_count: int = 0

    @property
    def n_agents(self) -> int:
        return self.agent_positions.shape[0]


def init_world(cfg: TrackingConfig, rng: rngmod.RngStream) -> WorldState:
    """Agents uniform in ``agent_box^d``, sources uniform in ``source_box^d``."""
    shape = (cfg.n_agents, cfg.dim)
    agents = rng.uniform(*cfg.agent_box, size=shape)
    sources = rng.uniform(*cfg.source_box, size=shape)
    return WorldState(
        agent_positions=agents,
        source_positions=sources,
        agent_velocities=np.zeros(shape),
        source_velocities=np.zeros(shape),
    )


def evasion_velocity(agents: np.ndarray, sources: np.ndarray, beta: float) -> np.ndarray:
    """Each source's velocity: speed ``beta`` straight away from its agent (zero if coincident)."""
    away = sources - agents
    dist = np.linalg.norm(away, axis=1, keepdims=True)
    return np.where(dist > 0.0, beta * away / np.where(dist > 0.0, dist, 1.0), 0.0)


def evasion_step(ws: WorldState, beta: float) -> WorldState:
    vel = evasion_velocity(ws.agent_positions, ws.source_positions, beta)
    return replace(ws, source_positions=ws.source_positions + vel, source_velocities=vel)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def neighbor_mask(dist: np.ndarray, radius: float, p: float, rng: rngmod.RngStream) -> np.ndarray:
    n = dist.shape[0]
    # a full N x N draw every step keeps stream consumption position-independent
    keep = rng.random((n, n)) > p
    within = dist <= radius
    np.fill_diagonal(within, False)
    return within & keep


def neighbor_sets(ws: WorldState, r: float, p: float, rng: rngmod.RngStream) -> np.ndarray:
    """Directed neighbour sets with dropout: row ``i`` marks the members of ``D^i``.

    Each in-range ordered pair survives independently with probability ``1 - p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1], got {p}")
    return neighbor_mask(pairwise_distances(ws.agent_positions), r, p, rng)


def as_index_sets(mask: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero(row).tolist()) for row in mask]


def _members(D) -> list[int]:
    if isinstance(D, np.ndarray) and D.dtype == bool:
        return np.flatnonzero(D).tolist()
    return sorted(D)


def local_loss(i: int, ws: WorldState, D, lam: float, r: float) -> float:
    """Agent ``i``'s loss: half squared distance to its source minus the repulsion sum."""
    x = ws.agent_positions
    s = 0.5 * float(np.sum((x[i] - ws.source_positions[i]) ** 2))
    reg = sum(lam * (float(np.sum((x[i] - x[j]) ** 2)) - r * r) for j in _members(D))
    return s - reg


def local_loss_plus(i: int, ws: WorldState, D, lam: float, r: float, mu: float, u_blocks,
                    perturb: str = PERTURB_NEIGHBOR) -> dict:
    """Lookahead terms of agent ``i``'s loss, one per block.

    ``u_blocks[j]`` is the direction for block ``j``.  The source is advanced
    by half its velocity and each neighbour by half its own velocity.  The
    ``mu u`` shift goes on agent ``i`` in the source term; in repulsion terms
    it goes on neighbour ``j`` (``perturb="neighbor"``) or on agent ``i``
    (``perturb="self"``).  Returns ``{"s": s_plus, "r": {j: r_plus_j}}``.
    """
    x = ws.agent_positions
    target = ws.source_positions[i] + 0.5 * ws.source_velocities[i]
    s_plus = 0.5 * float(np.sum((x[i] + mu * u_blocks[i] - target) ** 2))
    r_plus = {}
    for j in _members(D):
        ahead = x[j] + 0.5 * ws.agent_velocities[j]
        if perturb == PERTURB_SELF:
            diff = x[i] + mu * u_blocks[j] - ahead
        else:
            diff = x[i] - (ahead + mu * u_blocks[j])
        r_plus[j] = lam * (float(np.sum(diff**2)) - r * r)
    return {"s": s_plus, "r": r_plus}


def count_pairs_within(points: np.ndarray, radius: float) -> int:
    dist = pairwise_distances(points)
    return int(np.count_nonzero(np.triu(dist <= radius, k=1)))


def count_collisions(ws: WorldState, R: float) -> int:
    """Unordered agent pairs at distance ``<= R`` in this state."""
    if not R > 0:
        raise ConfigurationError("collision radius must be positive")
    return count_pairs_within(ws.agent_positions, R)


def mean_distance(agents: np.ndarray, targets: np.ndarray, squared: bool = False) -> float:
    sq = np.sum((agents - targets) ** 2, axis=1)
    return float(np.mean(sq if squared else np.sqrt(sq)))


def tracking_error(ws: WorldState, squared: bool = False) -> float:
    """Mean agent-to-own-source distance (or squared distance)."""
    return mean_distance(ws.agent_positions, ws.source_positions, squared)


@dataclass
class _Streams:
    estimator: list
    compressor: list
    dropout: rngmod.RngStream
    world: rngmod.RngStream = field(default=None)

    @classmethod
    def for_seed(cls, seed: int, n: int) -> "_Streams":
        return cls(
            estimator=rngmod.agent_streams(seed, rngmod.ESTIMATOR, n),
            compressor=rngmod.agent_streams(seed, rngmod.COMPRESSOR, n),
            dropout=rngmod.stream(seed, rngmod.NEIGHBOR_DROPOUT),
            world=rngmod.stream(seed, rngmod.WORLD_INIT),
        )


class AgentController:
    """Moves the agents one step given the current world, for any method.

    Shared by the tracking and coverage scenarios; the caller supplies the
    targets, their velocities and the neighbour mask.
    """

    def __init__(self, method: Method, positions: np.ndarray, sched: StepSchedule,
                 streams: _Streams, lam: float, radius: float, perturb: str, momentum: float):
        self.method = method
        self.sched = sched
        self.streams = streams
        self.lam = lam
        self.radius = radius
        self.perturb = perturb
        self.momentum = momentum
        n, d = positions.shape
        self.n, self.d = n, d
        self.velocity = np.zeros((n, d))
        if method.algorithm == SGDM:
            self.agents = [AgentState(positions[i].copy()) for i in range(n)]
        else:
            self.state = FedState.for_agents(positions, n)

    @property
    def positions(self) -> np.ndarray:
        if self.method.algorithm == SGDM:
            return np.stack([a.x for a in self.agents])
        return self.state.positions.reshape(self.n, self.d)

    def step(self, targets, target_velocity, mask) -> tuple[float, int]:
        """Advance one round; returns (mean estimate norm, bytes sent)."""
        before = self.positions
        if self.method.algorithm == SGDM:
            self.agents = [
                sgdm_baseline_step(a, targets[i], self.sched.eta, self.momentum,
                                   self.streams.estimator[i], self.sched.mu)
                for i, a in enumerate(self.agents)
            ]
            norm, sent = float(np.mean([np.linalg.norm(a.m) for a in self.agents])), 0
        else:
            view = WorldView(before, targets, target_velocity, self.velocity, mask,
                             self.lam, self.radius, self.perturb)
            if self.method.algorithm == FIRST_ORDER:
                self.state = fo_fedavg_ef_round(self.state, view, self.sched, self.method.compressor,
                                                self.streams.compressor, self.method.error_feedback)
            else:
                self.state = fed_ef_zo_sgd_round(self.state, view, self.sched, self.method.compressor,
                                                 self.streams.estimator, self.streams.compressor,
                                                 self.method.error_feedback)
            norm, sent = self.state.estimate_norm, self.state.bytes_sent
        self.velocity = (self.positions - before) / self.sched.eta
        return norm, sent


def simulate_tracking(cfg: TrackingConfig, method: Method, seed: int, record_trajectory: bool = False) -> MetricsSeries:
    """Run one seeded tracking episode and return its per-step metrics.

    Step ``t``: sources pick their escape velocity from the current
    positions, neighbour sets are sensed, agents move, sources move, and
    collisions are counted on the new agent positions.
    """
    streams = _Streams.for_seed(seed, cfg.n_agents)
    ws = init_world(cfg, streams.world)
    ctrl = AgentController(method, ws.agent_positions, cfg.schedule, streams,
                           cfg.lam, cfg.sensing_radius, cfg.perturb, cfg.momentum)
    out = MetricsSeries.empty(cfg.steps)
    traj = np.full((cfg.steps + 1, 2, cfg.n_agents, cfg.dim), np.nan) if record_trajectory else None
    if traj is not None:
        traj[0] = ws.agent_positions, ws.source_positions

    agents, sources = ws.agent_positions, ws.source_positions
    dist = pairwise_distances(agents)
    collisions, sent_total = 0, 0
    for t in range(cfg.steps):
        zeta = evasion_velocity(agents, sources, cfg.beta)
        mask = neighbor_mask(dist, cfg.sensing_radius, cfg.neighbor_dropout, streams.dropout)
        try:
            norm, sent = ctrl.step(sources, zeta, mask)
        except (DivergenceError, NumericalError):
            out.mark_diverged(t)
            break
        agents = ctrl.positions
        sources = sources + zeta
        dist = pairwise_distances(agents)
        collisions += int(np.count_nonzero(np.triu(dist <= cfg.collision_radius, k=1)))
        sent_total += sent
        out.tracking_error[t] = mean_distance(agents, sources, cfg.squared_error)
        out.cumulative_collisions[t] = collisions
        out.grad_norm[t] = norm
        out.bytes_transmitted[t] = sent_total
        if traj is not None:
            traj[t + 1] = agents, sources
    out.trajectory = traj
    return out
