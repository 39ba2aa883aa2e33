import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efzo import rng as rngmod
from efzo.errors import InputError, NumericalError
from efzo.zo import (
    PERTURB_NEIGHBOR,
    PERTURB_SELF,
    SmoothingParams,
    WorldView,
    first_order_gradients,
    smoothed_quadratic_oracle,
    structured_agent_estimate,
    structured_estimates,
    two_point_estimate,
)


def quad(A, b=None):
    A = np.asarray(A, dtype=float)
    b = np.zeros(len(A)) if b is None else np.asarray(b, dtype=float)
    return lambda x, t=0: 0.5 * x @ A @ x + b @ x


def test_linear_loss_exact():
    g = two_point_estimate(lambda x, t: np.dot([1.0, 0.0], x), np.zeros(2), SmoothingParams(0.3), np.array([2.0, 1.0]))
    np.testing.assert_allclose(g, [4.0, 2.0])


def test_half_norm_substitution():
    g = two_point_estimate(quad(np.eye(2)), np.array([1.0, 0.0]), SmoothingParams(1.0), np.array([0.0, 1.0]))
    np.testing.assert_allclose(g, [0.0, 0.5])


def test_zero_direction():
    g = two_point_estimate(quad(np.eye(3)), np.ones(3), SmoothingParams(0.1), np.zeros(3))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_exactly_two_evaluations():
    calls = []

    def loss(x, t):
        calls.append(t)
        return float(np.sum(x))

    two_point_estimate(loss, np.zeros(2), SmoothingParams(0.1), np.ones(2), t=7)
    assert calls == [7, 7]


def test_nonfinite_loss_raises():
    with pytest.raises(NumericalError):
        two_point_estimate(lambda x, t: float("nan"), np.zeros(2), SmoothingParams(0.1), np.ones(2))
    with pytest.raises(InputError):
        two_point_estimate(quad(np.eye(2)), np.zeros(2), SmoothingParams(0.1), np.ones(3))


def test_smoothed_oracle_examples():
    v, g = smoothed_quadratic_oracle(np.eye(2), np.zeros(2), np.zeros(2), 1.0)
    assert v == 1.0 and np.all(g == 0)
    v, g = smoothed_quadratic_oracle(np.diag([1.0, 3.0]), np.zeros(2), np.ones(2), 0.5)
    assert v == pytest.approx(2.5)
    np.testing.assert_allclose(g, [1.0, 3.0])
    A, b, x = np.diag([2.0, 1.0]), np.array([1.0, -1.0]), np.array([0.5, 2.0])
    v0, g0 = smoothed_quadratic_oracle(A, b, x, 0.0)
    assert v0 == pytest.approx(quad(A, b)(x))
    np.testing.assert_allclose(g0, A @ x + b)


def test_smoothed_oracle_against_monte_carlo():
    A, x, mu = np.diag([1.0, 3.0]), np.ones(2), 0.5
    u = rngmod.stream(0, "mc").standard_normal((1_000_000, 2))
    y = x + mu * u
    values = 0.5 * np.einsum("ni,ij,nj->n", y, A, y)
    se = values.std() / 1000.0
    assert abs(values.mean() - 2.5) <= 4 * se


def _quadratic_case(d=5, seed=0):
    g = rngmod.stream(seed, "quad")
    Q = g.standard_normal((d, d))
    A = Q @ Q.T / d + np.eye(d)
    b = g.standard_normal(d)
    x = g.standard_normal(d)
    return A, b, x, float(np.linalg.eigvalsh(A).max())


def _estimates(A, b, x, mu, n, seed):
    # vectorised two-point estimates, same formula as two_point_estimate
    f = quad(A, b)
    u = rngmod.stream(seed, "dirs").standard_normal((n, len(x)))
    fx = f(x)
    y = x + mu * u
    fy = 0.5 * np.einsum("ni,ij,nj->n", y, A, y) + y @ b
    return ((fy - fx) / mu)[:, None] * u, f


def test_vectorised_oracle_matches_reference():
    A, b, x, _ = _quadratic_case()
    est, f = _estimates(A, b, x, 0.3, 3, seed=4)
    u = rngmod.stream(4, "dirs").standard_normal((3, len(x)))
    for k in range(3):
        np.testing.assert_allclose(est[k], two_point_estimate(f, x, SmoothingParams(0.3), u[k]), rtol=1e-10)


def test_estimator_unbiased_for_smoothed_gradient():
    A, b, x, _ = _quadratic_case()
    mu, n = 0.2, 100_000
    est, _ = _estimates(A, b, x, mu, n, seed=1)
    _, target = smoothed_quadratic_oracle(A, b, x, mu)
    se = est.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(est.mean(axis=0) - target) <= 4 * se)


@pytest.mark.parametrize("mu", [0.01, 0.5, 2.0])
def test_lemma3_quadratic(mu):
    A, b, x, L = _quadratic_case(d=6)
    f_mu, _ = smoothed_quadratic_oracle(A, b, x, mu)
    assert abs(f_mu - quad(A, b)(x)) <= mu**2 * L * 6 / 2


@pytest.mark.parametrize("mu", [0.05, 1.0])
def test_lemma5_second_moment(mu):
    d = 5
    A, b, x, L = _quadratic_case(d=d, seed=2)
    est, _ = _estimates(A, b, x, mu, 100_000, seed=3)
    grad = A @ x + b
    bound = 0.5 * mu**2 * L**2 * (d + 6) ** 3 + 2 * (d + 4) * np.dot(grad, grad)
    assert np.mean(np.sum(est**2, axis=1)) <= 1.05 * bound


def test_lemma4_on_cubic_norm():
    # f(x) = ||x||^3 has a locally Lipschitz gradient; compare a Monte-Carlo
    # smoothed gradient with the exact one against the lemma's bound, taking L
    # as the Hessian bound over the sampled region
    d, mu = 3, 0.05
    g = rngmod.stream(5, "cubic")
    for _ in range(3):
        x = g.standard_normal(d)
        u = g.standard_normal((200_000, d))
        fx = np.linalg.norm(x) ** 3
        fy = np.linalg.norm(x + mu * u, axis=1) ** 3
        smooth_grad = (((fy - fx) / mu)[:, None] * u).mean(axis=0)
        exact = 3 * np.linalg.norm(x) * x
        L = 6 * (np.linalg.norm(x) + mu * 6)
        assert np.linalg.norm(smooth_grad - exact) <= 0.5 * mu * L * (d + 3) ** 1.5


def _world(n=3, d=2, seed=0, lam=1.0, radius=10.0, perturb=PERTURB_NEIGHBOR, dense=True):
    g = rngmod.stream(seed, "world")
    x = g.uniform(-4, 4, (n, d))
    mask = g.random((n, n)) < (0.7 if dense else 0.3)
    np.fill_diagonal(mask, False)
    return WorldView(x, g.uniform(-4, 4, (n, d)), g.normal(0, 0.1, (n, d)), g.normal(0, 1, (n, d)),
                     mask, lam, radius, perturb)


@pytest.mark.parametrize("perturb", [PERTURB_SELF, PERTURB_NEIGHBOR])
def test_vectorised_matches_per_agent_loop(perturb):
    w = _world(n=4, perturb=perturb)
    sp = SmoothingParams(0.3)
    batch = structured_estimates(w, sp, rngmod.agent_streams(1, "est", 4))
    loops = np.stack([structured_agent_estimate(i, w, sp, rngmod.stream(1, "est", i)) for i in range(4)])
    np.testing.assert_allclose(batch, loops, rtol=1e-12, atol=1e-12)


def _scalar_terms(x, z, zeta, xi, lam, r, mu, u, perturb):
    # agent 0's loss terms for N=2, d=1, written out one scalar at a time
    s = 0.5 * (x[0] - z[0]) ** 2
    s_plus = 0.5 * (x[0] + mu * u[0] - (z[0] + 0.5 * zeta[0])) ** 2
    r_t = lam * ((x[0] - x[1]) ** 2 - r**2)
    if perturb == PERTURB_SELF:
        r_plus = lam * ((x[0] + mu * u[1] - (x[1] + 0.5 * xi[1])) ** 2 - r**2)
    else:
        r_plus = lam * ((x[0] - (x[1] + 0.5 * xi[1] + mu * u[1])) ** 2 - r**2)
    return [(s_plus - s) / mu * u[0], -(r_plus - r_t) / mu * u[1]]


@pytest.mark.parametrize("perturb", [PERTURB_SELF, PERTURB_NEIGHBOR])
def test_two_agent_scalar_oracle(perturb):
    x = np.array([[0.0], [6.0]])
    z = np.array([[3.0], [0.0]])
    w = WorldView(x, z, np.zeros((2, 1)), np.zeros((2, 1)), np.array([[False, True], [False, False]]),
                  1.0, 10.0, perturb)
    sp = SmoothingParams(0.01)
    est = structured_agent_estimate(0, w, sp, rngmod.stream(3, "u"))
    u = rngmod.stream(3, "u").standard_normal((2, 1))[:, 0]
    expected = _scalar_terms(x[:, 0], z[:, 0], [0.0, 0.0], [0.0, 0.0], 1.0, 10.0, 0.01, u, perturb)
    np.testing.assert_allclose(est, expected, rtol=1e-9)


def test_neighbor_perturbation_repels_in_expectation():
    # agent 1 sits just right of agent 0; the block-1 estimate of agent 0's
    # loss must on average point towards agent 0 (descent moves agent 1 away)
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    w = WorldView(x, x.copy(), np.zeros((2, 2)), np.zeros((2, 2)), np.array([[False, True], [False, False]]),
                  1.0, 10.0, PERTURB_NEIGHBOR)
    sp = SmoothingParams(0.1)
    blocks = np.stack([structured_agent_estimate(0, w, sp, rngmod.stream(s, "u")).reshape(2, 2)[1]
                       for s in range(4000)])
    assert blocks.mean(axis=0)[0] < 0


def test_empty_neighbourhood_and_zero_lambda():
    w = _world(n=3)
    empty = WorldView(w.agents, w.targets, w.target_velocity, w.agent_velocity, np.zeros((3, 3), bool), 1.0, 10.0)
    est = structured_estimates(empty, SmoothingParams(0.2), rngmod.agent_streams(0, "e", 3)).reshape(3, 3, 2)
    for i in range(3):
        others = [j for j in range(3) if j != i]
        assert np.all(est[i, others] == 0)
    nolam = WorldView(w.agents, w.targets, w.target_velocity, w.agent_velocity, w.neighbors, 0.0, 10.0)
    est = structured_estimates(nolam, SmoothingParams(0.2), rngmod.agent_streams(0, "e", 3)).reshape(3, 3, 2)
    for i in range(3):
        others = [j for j in range(3) if j != i]
        assert np.all(est[i, others] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31), st.sampled_from([PERTURB_SELF, PERTURB_NEIGHBOR]))
def test_support_within_self_and_neighbours(n, seed, perturb):
    w = _world(n=n, seed=seed, perturb=perturb, dense=seed % 2 == 0)
    est = structured_estimates(w, SmoothingParams(0.5), rngmod.agent_streams(seed, "e", n)).reshape(n, n, 2)
    for i in range(n):
        allowed = set(np.flatnonzero(w.neighbors[i])) | {i}
        nonzero = {j for j in range(n) if np.any(est[i, j] != 0)}
        assert nonzero <= allowed


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_sensing_is_local(seed):
    w = _world(n=4, seed=seed)
    far = [j for j in range(1, 4) if not w.neighbors[0, j]]
    moved = w.agents.copy()
    for j in far:
        moved[j] += 1000.0
    w2 = WorldView(moved, w.targets, w.target_velocity, w.agent_velocity, w.neighbors, w.lam, w.radius)
    a = structured_agent_estimate(0, w, SmoothingParams(0.5), rngmod.stream(seed, "e"))
    b = structured_agent_estimate(0, w2, SmoothingParams(0.5), rngmod.stream(seed, "e"))
    np.testing.assert_array_equal(a, b)


def test_first_order_gradient_example():
    x = np.array([[0.0, 0.0], [6.0, 8.0]])
    z = np.array([[3.0, 4.0], [0.0, 0.0]])
    w = WorldView(x, z, np.zeros((2, 2)), np.zeros((2, 2)), np.array([[False, True], [False, False]]), 1.0, 10.0)
    g = first_order_gradients(w).reshape(2, 2, 2)
    np.testing.assert_allclose(g[0, 0], [9.0, 12.0])


def test_first_order_gradient_finite_difference():
    w = _world(n=3, seed=7, lam=0.7)
    grads = first_order_gradients(w).reshape(3, 3, 2)
    x, z = w.agents, w.targets

    def loss(i, pos):
        s = 0.5 * np.sum((pos[i] - z[i]) ** 2)
        return s - sum(w.lam * (np.sum((pos[i] - pos[j]) ** 2) - w.radius**2) for j in np.flatnonzero(w.neighbors[i]))

    h = 1e-6
    for i in range(3):
        for j in range(3):
            for k in range(2):
                e = np.zeros_like(x)
                e[j, k] = h
                fd = (loss(i, x + e) - loss(i, x - e)) / (2 * h)
                assert grads[i, j, k] == pytest.approx(fd, abs=1e-5)


def test_worldview_validation():
    x = np.zeros((2, 2))
    with pytest.raises(InputError):
        WorldView(x, x, x, x, np.eye(2, dtype=bool), 1.0, 1.0)
    with pytest.raises(InputError):
        WorldView(x, np.zeros((3, 2)), x, x, np.zeros((2, 2), bool), 1.0, 1.0)
