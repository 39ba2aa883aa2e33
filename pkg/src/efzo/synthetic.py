"""A synthetic time-varying quadratic stream with every constant known.

    loss_t(x) = 1/2 sum_k a_k x_k^2 + eps_t sum_k sin(x_k)

with ``a_k`` spread over [0.5, 0.9] and ``eps_t = eps0 / t`` shrinking
towards zero, so the Hessian stays within ``[0.5 - eps0, 0.9 + eps0]`` and
``L = 1`` for ``eps0 <= 0.1``.  The drift ``|loss_t - loss_{t+1}|`` is
uniformly at most ``d |eps_t - eps_{t+1}|``, which telescopes to
``omega_bar <= d eps0``.  Observations add ``<zeta, x>`` with
``zeta ~ N(0, s^2 I)`` shared by both evaluations of a step; the
stochastic gradient is then ``grad + zeta`` so ``sigma^2 = s^2 d`` and
``M = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import rng as rngmod
from .compressors import CompressorSpec, analytic_delta, transmitted_bytes
from .errors import ConfigurationError, DivergenceError
from .metrics import MetricsSeries
from .optimizers import (
    EfState,
    StepSchedule,
    TheoremParams,
    ef_zo_sgd_step,
    theorem1_bound,
    theorem1_schedule,
)


@dataclass(frozen=True)
class QuadraticStream:
    dim: int = 10
    eps0: float = 0.1
    sigma: float = 1.0
    start: float = 2.0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if not 0.0 <= self.eps0 <= 0.1:
            raise ConfigurationError("eps0 must lie in [0, 0.1] to keep L = 1")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")

    @property
    def curvature(self) -> np.ndarray:
        return np.linspace(0.5, 0.9, self.dim)

    @property
    def noise_scale(self) -> float:
        return self.sigma / np.sqrt(self.dim)

    @property
    def L(self) -> float:
        return 1.0

    @property
    def M(self) -> float:
        return 1.0

    def eps(self, t: int) -> float:
        # steps are counted from 0 in the optimiser; the stream from 1
        return self.eps0 / (t + 1)

    def value(self, x: np.ndarray, t: int) -> float:
        return float(0.5 * np.dot(self.curvature * x, x) + self.eps(t) * np.sum(np.sin(x)))

    def gradient(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.curvature * x + self.eps(t) * np.cos(x)

    def x0(self) -> np.ndarray:
        return np.full(self.dim, self.start)

    def omega_bar(self, T: int) -> float:
        return self.dim * (self.eps(0) - self.eps(T))

    def minimum(self, t: int) -> float:
        """``min_x loss_t(x)``; the loss is separable so this is ``d`` scalar problems."""
        e = self.eps(t)
        total = 0.0
        for a in self.curvature:
            res = minimize_scalar(lambda y: 0.5 * a * y * y + e * np.sin(y), bounds=(-1.0, 1.0), method="bounded",
                                  options={"xatol": 1e-12})
            total += res.fun
        return float(total)

    def Delta(self, T: int) -> float:
        return self.value(self.x0(), 0) - self.minimum(T)

    def theorem_params(self, T: int, comp: CompressorSpec) -> TheoremParams:
        delta = analytic_delta(comp, self.dim)
        if delta is None:
            raise ConfigurationError(f"{comp} has no known contraction constant")
        return TheoremParams(Delta=self.Delta(T), sigma=self.sigma, M=self.M, L=self.L, d=self.dim, T=T,
                             delta=delta, omega_bar=self.omega_bar(T))

    def noisy_loss(self, noise_rng: rngmod.RngStream):
        """Observation oracle; call ``draw()`` once per step before evaluating."""
        stream = self
        state = {"zeta": np.zeros(self.dim)}

        def loss(x, t):
            return stream.value(x, t) + float(np.dot(state["zeta"], x))

        def draw():
            state["zeta"] = stream.noise_scale * noise_rng.standard_normal(stream.dim)

        loss.draw = draw
        return loss


def simulate_stream(
    stream: QuadraticStream,
    T: int,
    comp: CompressorSpec,
    seed: int,
    sched: StepSchedule | None = None,
    error_feedback: bool = True,
) -> MetricsSeries:
    """EF-ZO-SGD on the stream; defaults to the theorem schedules.

    ``tracking_error`` holds the loss value ``loss_t(x_t)`` and ``grad_norm``
    the exact gradient norm at ``x_t``, both before the step.
    """
    if sched is None:
        # the schedules do not involve delta, so any compressor can use them
        sched = theorem1_schedule(stream.theorem_params(T, CompressorSpec.identity()))
    est = rngmod.stream(seed, rngmod.ESTIMATOR, 0)
    crng = rngmod.stream(seed, rngmod.COMPRESSOR, 0)
    loss = stream.noisy_loss(rngmod.stream(seed, rngmod.NOISE))
    state = EfState.start(stream.x0())
    out = MetricsSeries.empty(T)
    sent = 0
    for t in range(T):
        out.tracking_error[t] = stream.value(state.x, t)
        out.grad_norm[t] = float(np.linalg.norm(stream.gradient(state.x, t)))
        loss.draw()
        try:
            nxt = ef_zo_sgd_step(state, loss, sched, comp, est, crng)
        except DivergenceError:
            out.mark_diverged(t)
            break
        sent += transmitted_bytes(comp, (state.x - nxt.x) / sched.eta)
        state = nxt if error_feedback else EfState(nxt.x, np.zeros_like(nxt.e), nxt.t)
        out.bytes_transmitted[t] = sent
    return out


def run_stream(stream: QuadraticStream, T: int, comp: CompressorSpec, seed: int) -> np.ndarray:
    """``||grad loss_t(x_t)||^2`` per step under the theorem schedules."""
    series = simulate_stream(stream, T, comp, seed)
    if series.diverged:
        raise DivergenceError("stream run diverged", series.diverged_step)
    return series.grad_norm**2


@dataclass
class TheoremCheck:
    T: int
    seeds: int
    mean_sq_grad: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.mean_sq_grad <= self.bound


def check_theorem1(stream: QuadraticStream, T: int, comp: CompressorSpec, seeds: int = 50, base_seed: int = 0) -> TheoremCheck:
    """Seed-averaged ``(1/T) sum ||grad loss_t(x_t)||^2`` against the single-agent bound."""
    values = []
    for s in range(seeds):
        try:
            values.append(run_stream(stream, T, comp, base_seed + s).mean())
        except DivergenceError:
            values.append(np.inf)
    return TheoremCheck(T=T, seeds=seeds, mean_sq_grad=float(np.mean(values)),
                        bound=theorem1_bound(stream.theorem_params(T, comp)))
