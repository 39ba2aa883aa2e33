"""Two-point Gaussian-smoothing gradient estimators.

``two_point_estimate`` is the generic single-direction estimator.  The
multi-agent tracking loss gets a structured version that perturbs one
agent's block per loss term and leaves non-neighbour blocks at zero; it is
provided both per agent (:func:`structured_agent_estimate`) and for all
agents at once (:func:`structured_estimates`, used by the simulators).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, NumericalError
from .rng import RngStream

DEFAULT_MU = 0.05

PERTURB_SELF = "self"
PERTURB_NEIGHBOR = "neighbor"


@dataclass(frozen=True)
class SmoothingParams:
    mu: float = DEFAULT_MU
    dim: int | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigurationError(f"smoothing radius mu must be positive, got {self.mu}")


@dataclass
class LossEval:
    """A (possibly noisy, time-varying) loss ``fn(x, t)`` plus known constants.

    ``L``, ``sigma``, ``M`` are the smoothness and noise constants when the
    loss is synthetic and they are known; the estimators never read them.
    """

    fn: Callable[[np.ndarray, int], float]
    L: float | None = None
    sigma: float | None = None
    M: float | None = None

    def __call__(self, x: np.ndarray, t: int = 0) -> float:
        return self.fn(x, t)


def _evaluate(loss, x, t):
    value = loss(x, t) if isinstance(loss, LossEval) else loss(x, t)
    value = float(value)
    if not np.isfinite(value):
        raise NumericalError(f"loss returned {value} at step {t}", x=np.array(x), t=t)
    return value


def two_point_estimate(
    loss: Callable[[np.ndarray, int], float],
    x: np.ndarray,
    sp: SmoothingParams,
    u: np.ndarray,
    t: int = 0,
) -> np.ndarray:
    """``(loss(x + mu u) - loss(x)) / mu * u`` using exactly two evaluations."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != x.shape:
        raise InputError(f"direction shape {u.shape} does not match x shape {x.shape}")
    plus = _evaluate(loss, x + sp.mu * u, t)
    base = _evaluate(loss, x, t)
    return (plus - base) / sp.mu * u


@dataclass
class WorldView:
    """Everything an agent may use at one step of the tracking game.

    Arrays are ``(N, d)``; ``neighbors[i, j]`` is True when ``j`` is in agent
    ``i``'s (dropout-thinned) neighbour set.  ``perturb`` picks which
    position carries the ``mu u`` shift in the repulsion terms: ``"self"``
    shifts agent ``i`` as written in the lookahead loss, ``"neighbor"``
    shifts neighbour ``j`` so the block-``j`` quotient estimates the
    derivative of agent ``i``'s loss with respect to ``x^j``.
    """

    agents: np.ndarray
    targets: np.ndarray
    target_velocity: np.ndarray
    agent_velocity: np.ndarray
    neighbors: np.ndarray
    lam: float
    radius: float
    perturb: str = PERTURB_NEIGHBOR

    def __post_init__(self):
        n, d = np.shape(self.agents)
        for name in ("targets", "target_velocity", "agent_velocity"):
            if np.shape(getattr(self, name)) != (n, d):
                raise InputError(f"{name} must have shape {(n, d)}")
        if np.shape(self.neighbors) != (n, n):
            raise InputError(f"neighbors must have shape {(n, n)}")
        if np.any(np.diag(self.neighbors)):
            raise InputError("an agent cannot be its own neighbour")
        if self.perturb not in (PERTURB_SELF, PERTURB_NEIGHBOR):
            raise ConfigurationError(f"perturb must be 'self' or 'neighbor', got {self.perturb!r}")

    @property
    def n_agents(self) -> int:
        return self.agents.shape[0]

    @property
    def dim(self) -> int:
        return self.agents.shape[1]

    def estimates(self, sp: SmoothingParams, rngs: Sequence[RngStream]) -> np.ndarray:
        return structured_estimates(self, sp, rngs)

    def gradients(self) -> np.ndarray:
        return first_order_gradients(self)


def _draw_directions(rngs: Sequence[RngStream], n: int, d: int) -> np.ndarray:
    # agent i draws all N blocks every step, in block order, so the amount
    # consumed never depends on the neighbour set
    if len(rngs) != n:
        raise ConfigurationError(f"need one rng per agent: {n} agents, {len(rngs)} streams")
    return np.stack([rng.standard_normal((n, d)) for rng in rngs])


def structured_agent_estimate(
    i: int,
    world: WorldView,
    sp: SmoothingParams,
    rng: RngStream,
) -> np.ndarray:
    """Agent ``i``'s sparse estimate, flattened to length ``N*d``.

    Block ``i`` is the source-term quotient with the source advanced by half
    its velocity; block ``j`` for each neighbour is the negated repulsion
    quotient with the neighbour advanced by half its velocity; every other
    block is zero.
    """
    n, d = world.n_agents, world.dim
    u = rng.standard_normal((n, d))
    mu, lam, r2 = sp.mu, world.lam, world.radius**2
    x, z = world.agents, world.targets
    g = np.zeros((n, d))

    s = 0.5 * np.sum((x[i] - z[i]) ** 2)
    s_plus = 0.5 * np.sum((x[i] + mu * u[i] - (z[i] + 0.5 * world.target_velocity[i])) ** 2)
    g[i] = (s_plus - s) / mu * u[i]

    for j in np.flatnonzero(world.neighbors[i]):
        ahead = x[j] + 0.5 * world.agent_velocity[j]
        if world.perturb == PERTURB_SELF:
            diff_plus = x[i] + mu * u[j] - ahead
        else:
            diff_plus = x[i] - (ahead + mu * u[j])
        r_t = lam * (np.sum((x[i] - x[j]) ** 2) - r2)
        r_plus = lam * (np.sum(diff_plus**2) - r2)
        g[j] = -(r_plus - r_t) / mu * u[j]

    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite estimate for agent {i}", x=x.copy(), agent=i)
    return g.reshape(-1)


def structured_estimates(world: WorldView, sp: SmoothingParams, rngs: Sequence[RngStream]) -> np.ndarray:
    """All agents' structured estimates, shape ``(N, N*d)``; row ``i`` is agent ``i``."""
    n, d = world.n_agents, world.dim
    u = _draw_directions(rngs, n, d)
    mu, lam, r2 = sp.mu, world.lam, world.radius**2
    x, z = world.agents, world.targets
    idx = np.arange(n)

    g = np.zeros((n, n, d))

    u_self = u[idx, idx]
    s = 0.5 * np.sum((x - z) ** 2, axis=-1)
    s_plus = 0.5 * np.sum((x + mu * u_self - (z + 0.5 * world.target_velocity)) ** 2, axis=-1)
    g[idx, idx] = ((s_plus - s) / mu)[:, None] * u_self

    mask = np.asarray(world.neighbors, dtype=bool)
    if lam != 0.0 and mask.any():
        ahead = x + 0.5 * world.agent_velocity
        diff = x[:, None, :] - x[None, :, :]
        if world.perturb == PERTURB_SELF:
            diff_plus = x[:, None, :] + mu * u - ahead[None, :, :]
        else:
            diff_plus = x[:, None, :] - (ahead[None, :, :] + mu * u)
        r_t = lam * (np.sum(diff**2, axis=-1) - r2)
        r_plus = lam * (np.sum(diff_plus**2, axis=-1) - r2)
        coef = np.where(mask, -(r_plus - r_t) / mu, 0.0)
        g += coef[:, :, None] * u * mask[:, :, None]

    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(g.reshape(n, -1)), axis=1))[0])
        raise NumericalError(f"non-finite estimate for agent {bad}", x=x.copy(), agent=bad)
    return g.reshape(n, n * d)


def first_order_gradients(world: WorldView) -> np.ndarray:
    """Exact gradients of each agent's local tracking loss, shape ``(N, N*d)``.

    Row ``i`` is the gradient of ``0.5||x^i - z^i||^2 - lam sum_j (||x^i - x^j||^2 - r^2)``
    over the concatenated positions (no lookahead, no smoothing).
    """
    n, d = world.n_agents, world.dim
    x, z, lam = world.agents, world.targets, world.lam
    mask = np.asarray(world.neighbors, dtype=float)
    g = np.zeros((n, n, d))
    diff = x[:, None, :] - x[None, :, :]
    idx = np.arange(n)
    g[idx, idx] = (x - z) - 2.0 * lam * np.einsum("ij,ijk->ik", mask, diff)
    g += 2.0 * lam * mask[:, :, None] * diff
    return g.reshape(n, n * d)


def smoothed_quadratic_oracle(A: np.ndarray, b: np.ndarray, x: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    """Gaussian smoothing of ``f(x) = x'Ax/2 + b'x`` in closed form.

    The smoothed value adds ``mu^2 trace(A)/2``; the gradient is unchanged.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not np.allclose(A, A.T):
        raise InputError("A must be symmetric")
    value = 0.5 * x @ A @ x + b @ x + 0.5 * mu**2 * np.trace(A)
    return float(value), A @ x + b
