import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from efzo import rng as rngmod
from efzo.compressors import (
    CompressorSpec,
    Kind,
    analytic_delta,
    compress,
    compress_batch,
    estimate_contraction,
    parse_compressor,
    qsgd_scale,
    transmitted_bytes,
)
from efzo.errors import ConfigurationError, InputError

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
vectors = st.integers(1, 12).flatmap(lambda d: arrays(np.float64, d, elements=finite))

SELECTION = [CompressorSpec.topk(k=1), CompressorSpec.topk(fraction=0.5), CompressorSpec.randk(fraction=0.5),
             CompressorSpec.randk(k=1), CompressorSpec.dropout_b(0.3), CompressorSpec.dropout_b(0.7)]
ALL = SELECTION + [CompressorSpec.identity(), CompressorSpec.dropout_u(0.5), CompressorSpec.qsgd(1),
                   CompressorSpec.qsgd(3)]


def gen(seed=0):
    return rngmod.stream(seed, "test")


def test_topk_keeps_largest():
    out = compress(CompressorSpec.topk(k=2), np.array([3.0, -5.0, 1.0]))
    np.testing.assert_array_equal(out, [3.0, -5.0, 0.0])


def test_topk_ties_go_to_lower_index():
    out = compress(CompressorSpec.topk(k=2), np.array([1.0, -2.0, 2.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, -2.0, 2.0, 0.0])


def test_randk_full_is_identity():
    np.testing.assert_array_equal(compress(CompressorSpec.randk(k=2), np.array([1.0, 2.0]), gen()), [1.0, 2.0])


@pytest.mark.parametrize("bits", [1, 2, 3, 8])
def test_qsgd_zero_stays_zero(bits):
    np.testing.assert_array_equal(compress(CompressorSpec.qsgd(bits), np.zeros(3), gen()), np.zeros(3))


def _qsgd_scalar(x, bits, u):
    # component-wise transcription of the quantiser, used as an oracle
    d = len(x)
    norm = math.sqrt(sum(v * v for v in x))
    w = 1 + min(math.sqrt(d) / 2**bits, d / 2 ** (2 * bits))
    out = []
    for v, ui in zip(x, u):
        sign = (v > 0) - (v < 0)
        out.append(sign * norm / (2**bits * w) * math.floor(2**bits * abs(v) / norm + ui))
    return out


@pytest.mark.parametrize("u", [0.0, 0.999])
def test_qsgd_one_bit_unit_vector(u):
    assert qsgd_scale(1, 2) == pytest.approx(1.5)
    assert _qsgd_scalar([1.0, 0.0], 1, [u, u]) == pytest.approx([2 / 3, 0.0])


def test_qsgd_matches_scalar_oracle():
    x = np.array([0.3, -1.2, 2.5, 0.0, -0.7])
    for bits in (1, 2, 4):
        g = gen(bits)
        u = rngmod.stream(bits, "test").random(5)
        out = compress(CompressorSpec.qsgd(bits), x, g)
        np.testing.assert_allclose(out, _qsgd_scalar(x.tolist(), bits, u.tolist()), rtol=1e-12, atol=1e-15)


def test_qsgd_output_on_lattice():
    x = gen(1).standard_normal(7)
    for bits in (1, 3):
        out = compress(CompressorSpec.qsgd(bits), x, gen(2))
        unit = np.linalg.norm(x) / (2**bits * qsgd_scale(bits, 7))
        levels = out / unit
        np.testing.assert_allclose(levels, np.round(levels), atol=1e-9)
        assert np.all((out == 0) | (np.sign(out) == np.sign(x)))


@settings(max_examples=60, deadline=None)
@given(vectors, st.integers(0, 2**32))
def test_selection_operators_split_energy_exactly(x, seed):
    for spec in SELECTION:
        c = compress(spec, x, gen(seed)) if spec.kind is not Kind.TOPK else compress(spec, x)
        kept = c != 0
        # each entry is either passed through or zeroed
        assert np.all((c == x) | (c == 0))
        assert math.isclose(np.sum(c * c) + np.sum((x - c) ** 2), np.sum(x * x), rel_tol=1e-12, abs_tol=1e-12)
        assert kept.sum() <= x.size


@settings(max_examples=40, deadline=None)
@given(vectors, st.integers(0, 2**32))
def test_qsgd_lattice_property(x, seed):
    for bits in (1, 2):
        out = compress(CompressorSpec.qsgd(bits), x, gen(seed))
        norm = np.linalg.norm(x)
        if norm == 0:
            assert np.all(out == 0)
            continue
        levels = out * (2**bits * qsgd_scale(bits, x.size)) / norm
        np.testing.assert_allclose(levels, np.round(levels), atol=1e-6)
        assert np.all((out == 0) | (np.sign(out) == np.sign(x)))


@settings(max_examples=30, deadline=None)
@given(vectors, st.integers(0, 2**32))
def test_compress_reproducible(x, seed):
    for spec in ALL:
        a = compress(spec, x, gen(seed))
        b = compress(spec, x, gen(seed))
        assert a.tobytes() == b.tobytes()


def test_batch_and_single_agree():
    x = gen(5).standard_normal((4, 6))
    for spec in ALL:
        rows = np.stack([compress(spec, x[i], rngmod.stream(9, "row", i)) for i in range(4)])
        batch = compress_batch(spec, x, [rngmod.stream(9, "row", i) for i in range(4)])
        assert rows.tobytes() == batch.tobytes()


def test_stream_consumption_independent_of_values():
    # two different inputs leave the stream at the same position
    for spec in ALL:
        if spec.kind is Kind.TOPK:
            continue
        a, b = gen(3), gen(3)
        compress(spec, np.zeros(5), a)
        compress(spec, np.arange(5.0), b)
        assert a.random() == b.random()


def test_dropout_unbiased_mean():
    x = np.array([1.0, -2.0, 0.5])
    n = 20000
    out = compress_batch(CompressorSpec.dropout_u(0.5), np.broadcast_to(x, (n, 3)), [gen(11)] * n)
    se = out.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - x) <= 3 * se)


@pytest.mark.parametrize("spec", [s for s in SELECTION] + [CompressorSpec.identity()])
def test_empirical_contraction_within_analytic(spec):
    d, n = 6, 4000
    g = gen(21)
    for _ in range(5):
        x = g.standard_normal(d)
        batch = np.broadcast_to(x, (n, d))
        rngs = None if spec.kind in (Kind.TOPK, Kind.IDENTITY) else [g] * n
        err = np.sum((compress_batch(spec, batch, rngs) - batch) ** 2, axis=1)
        bound = (1 - analytic_delta(spec, d)) * np.dot(x, x)
        slack = 4 * err.std(ddof=1) / math.sqrt(n) + 1e-12
        assert err.mean() <= bound + slack


def test_analytic_delta_values():
    assert analytic_delta(CompressorSpec.topk(k=1), 2) == 0.5
    assert analytic_delta(CompressorSpec.randk(k=3), 4) == 0.75
    assert analytic_delta(CompressorSpec.dropout_b(0.5), 17) == 0.5
    assert analytic_delta(CompressorSpec.identity(), 3) == 1.0
    assert analytic_delta(CompressorSpec.qsgd(1), 3) is None
    assert analytic_delta(CompressorSpec.dropout_u(0.5), 3) is None


def test_contraction_estimates():
    ident = estimate_contraction(CompressorSpec.identity(), 4, 50, gen())
    assert ident.delta_hat == 1.0 and ident.contractive
    topk = estimate_contraction(CompressorSpec.topk(k=1), 4, 50, gen())
    assert topk.delta_hat == pytest.approx(0.25, abs=0.05)
    topk2 = estimate_contraction(CompressorSpec.topk(k=1), 2, 50, gen())
    assert topk2.delta_hat == pytest.approx(0.5, abs=0.05)
    drop = estimate_contraction(CompressorSpec.dropout_u(0.5), 4, 2000, gen())
    assert not drop.contractive and drop.delta_hat <= 0.1


def test_parse_round_trip():
    for text in ["none", "topk:0.5", "topk:3", "randk:0.25", "dropout-b:0.5", "dropout-u:0.5", "qsgd:1"]:
        spec = parse_compressor(text)
        assert parse_compressor(spec.to_string()) == spec
        assert CompressorSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("text", ["topk", "foo:1", "topk:0", "topk:1.5", "dropout-b:2", "qsgd:0", "qsgd:x",
                                  "dropout-u:0"])
def test_parse_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_compressor(text)


def test_invalid_inputs():
    with pytest.raises(ConfigurationError):
        compress(CompressorSpec.topk(k=5), np.ones(3))
    with pytest.raises(InputError):
        compress(CompressorSpec.identity(), np.array([1.0, np.nan]))
    with pytest.raises(ConfigurationError):
        compress(CompressorSpec.randk(k=1), np.ones(3))
    with pytest.raises(ConfigurationError):
        CompressorSpec.from_dict({"kind": "zip"})


def test_transmitted_bytes():
    msg = np.array([[1.0, 0.0, 2.0, 0.0]])
    assert transmitted_bytes(CompressorSpec.topk(k=2), msg) == 16
    assert transmitted_bytes(CompressorSpec.identity(), msg) == 32
    assert transmitted_bytes(CompressorSpec.qsgd(1), msg) == 1 + 8
