"""Area coverage: agents patrol circular routes inside overlapping disks.

Each agent tracks a target that runs around a circle inside its own disk.
The tracking machinery is reused unchanged with a larger sensing radius, so
the repulsion term keeps agents out of overlap zones another agent is
already covering.  Area violations are pair-steps with two agents closer
than ``violation_distance``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import rng as rngmod
from .errors import ConfigurationError, DivergenceError, NumericalError
from .metrics import Method, MetricsSeries
from .optimizers import NORMALIZE_PER_AGENT, StepSchedule
from .tracking import AgentController, _Streams, mean_distance, neighbor_mask, pairwise_distances

DEFAULT_THRESHOLDS = (3.0, 5.0, 10.0)


def lens_overlap_fraction(spacing: float, radius: float) -> float:
    """Area shared by two equal disks, as a fraction of one disk's area."""
    if spacing >= 2 * radius:
        return 0.0
    if spacing <= 0:
        return 1.0
    h = spacing / (2 * radius)
    area = 2 * radius**2 * math.acos(h) - 0.5 * spacing * math.sqrt(4 * radius**2 - spacing**2)
    return area / (math.pi * radius**2)


def spacing_for_overlap(fraction: float, radius: float) -> float:
    """Centre spacing giving the requested lens-overlap fraction."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"overlap fraction must lie in (0, 1), got {fraction}")
    return brentq(lambda s: lens_overlap_fraction(s, radius) - fraction, 1e-9, 2 * radius - 1e-12)


@dataclass(frozen=True)
class CoverageConfig:
    n_agents: int = 3
    dim: int = 2
    disk_radius: float = 5.0
    overlap: float = 0.175
    disk_centers: tuple | None = None
    route_fraction: float = 0.7
    cycles: float = 4.0
    lam: float = 100.0
    neighbor_dropout: float = 0.5
    steps: int = 7000
    eta: float = 1.0
    mu: float = 1.0
    normalize: str = NORMALIZE_PER_AGENT
    momentum: float = 0.9
    violation_distance: float = 3.0
    thresholds: tuple = DEFAULT_THRESHOLDS
    sensing_radius: float | None = None
    perturb: str = "neighbor"

    def __post_init__(self):
        if self.dim != 2:
            raise ConfigurationError("coverage routes are planar; dim must be 2")
        if self.n_agents < 1 or self.steps < 1:
            raise ConfigurationError("n_agents and steps must be >= 1")
        if not 0.0 < self.route_fraction < 1.0:
            raise ConfigurationError("route_fraction must lie in (0, 1) so routes stay inside disks")
        if self.disk_centers is not None and len(self.disk_centers) != self.n_agents:
            raise ConfigurationError("need one disk centre per agent")

    @property
    def centers(self) -> np.ndarray:
        if self.disk_centers is not None:
            return np.asarray(self.disk_centers, dtype=np.float64)
        spacing = spacing_for_overlap(self.overlap, self.disk_radius)
        return np.stack([np.arange(self.n_agents) * spacing, np.zeros(self.n_agents)], axis=1)

    @property
    def route_radius(self) -> float:
        return self.route_fraction * self.disk_radius

    @property
    def angular_speed(self) -> float:
        return 2 * math.pi * self.cycles / self.steps

    @property
    def period(self) -> float:
        return 2 * math.pi / self.angular_speed

    @property
    def radius(self) -> float:
        return self.sensing_radius if self.sensing_radius is not None else 2 * self.disk_radius

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(eta=self.eta, mu=self.mu, normalize=self.normalize)


def route_targets(t: float, cfg: CoverageConfig) -> np.ndarray:
    """All agents' route targets at step ``t``, shape ``(N, 2)``.

    Phases are staggered evenly around the circle.
    """
    phase = 2 * math.pi * np.arange(cfg.n_agents) / cfg.n_agents + cfg.angular_speed * t
    ring = np.stack([np.cos(phase), np.sin(phase)], axis=1)
    return cfg.centers + cfg.route_radius * ring


def route_target(i: int, t: float, cfg: CoverageConfig) -> np.ndarray:
    return route_targets(t, cfg)[i]


def count_violations(positions: np.ndarray, cfg: CoverageConfig, distance: float | None = None) -> int:
    """Unordered agent pairs closer than the violation distance."""
    distance = cfg.violation_distance if distance is None else distance
    dist = pairwise_distances(np.asarray(positions))
    return int(np.count_nonzero(np.triu(dist <= distance, k=1)))


def init_agents(cfg: CoverageConfig, rng: rngmod.RngStream) -> np.ndarray:
    """Each agent uniform in its own disk."""
    n = cfg.n_agents
    radius = cfg.disk_radius * np.sqrt(rng.random(n))
    angle = 2 * math.pi * rng.random(n)
    return cfg.centers + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)


@dataclass
class CoverageWorld:
    """Mutable coverage episode; ``coverage_round`` advances it by one step."""

    cfg: CoverageConfig
    method: Method
    seed: int
    step: int = 0
    violations: dict = field(default_factory=dict)
    controller: AgentController = None
    streams: _Streams = None

    def __post_init__(self):
        self.streams = _Streams.for_seed(self.seed, self.cfg.n_agents)
        start = init_agents(self.cfg, self.streams.world)
        self.controller = AgentController(
            self.method, start, self.cfg.schedule, self.streams, self.cfg.lam,
            self.cfg.radius, self.cfg.perturb, self.cfg.momentum,
        )
        self.violations = {d: 0 for d in self._thresholds()}

    def _thresholds(self):
        return tuple(sorted({float(self.cfg.violation_distance), *map(float, self.cfg.thresholds)}))

    @property
    def positions(self) -> np.ndarray:
        return self.controller.positions


def coverage_round(world: CoverageWorld) -> tuple[float, int]:
    """Advance one FED-EF-ZO-SGD (or baseline) round against the route targets.

    Returns the controller's (estimate norm, bytes sent) for the round.
    """
    cfg = world.cfg
    t = world.step
    targets = route_targets(t, cfg)
    velocity = route_targets(t + 1, cfg) - targets
    dist = pairwise_distances(world.positions)
    mask = neighbor_mask(dist, cfg.radius, cfg.neighbor_dropout, world.streams.dropout)
    result = world.controller.step(targets, velocity, mask)
    world.step += 1
    after = pairwise_distances(world.positions)
    upper = np.triu(np.ones_like(after, dtype=bool), k=1)
    for d in world.violations:
        world.violations[d] += int(np.count_nonzero(upper & (after <= d)))
    return result


def simulate_coverage(cfg: CoverageConfig, method: Method, seed: int, record_trajectory: bool = False) -> MetricsSeries:
    """One seeded coverage episode.

    ``cumulative_collisions`` holds violations at ``cfg.violation_distance``;
    ``extra["violations@D"]`` holds the running count at every threshold.
    """
    world = CoverageWorld(cfg, method, seed)
    out = MetricsSeries.empty(cfg.steps)
    for d in world.violations:
        out.extra[f"violations@{d:g}"] = np.zeros(cfg.steps, dtype=np.int64)
    traj = np.full((cfg.steps + 1, 2, cfg.n_agents, 2), np.nan) if record_trajectory else None
    if traj is not None:
        traj[0] = world.positions, route_targets(0, cfg)
    sent_total = 0
    for t in range(cfg.steps):
        try:
            norm, sent = coverage_round(world)
        except (DivergenceError, NumericalError):
            out.mark_diverged(t)
            break
        sent_total += sent
        targets = route_targets(t + 1, cfg)
        out.tracking_error[t] = mean_distance(world.positions, targets)
        out.cumulative_collisions[t] = world.violations[float(cfg.violation_distance)]
        out.grad_norm[t] = norm
        out.bytes_transmitted[t] = sent_total
        for d, count in world.violations.items():
            out.extra[f"violations@{d:g}"][t] = count
        if traj is not None:
            traj[t + 1] = world.positions, targets
    out.trajectory = traj
    return out
