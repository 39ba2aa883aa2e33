import numpy as np
import pytest

from efzo import rng as rngmod


def test_streams_reproducible():
    a = rngmod.stream(5, rngmod.ESTIMATOR, 2).random(8)
    b = rngmod.stream(5, rngmod.ESTIMATOR, 2).random(8)
    assert a.tobytes() == b.tobytes()


def test_streams_distinct_by_name_index_and_seed():
    draws = {
        key: rngmod.stream(*key).random(4).tobytes()
        for key in [(0, "estimator", 0), (0, "estimator", 1), (0, "compressor", 0), (1, "estimator", 0),
                    (0, "world-init")]
    }
    assert len(set(draws.values())) == len(draws)


def test_consuming_one_stream_leaves_others_alone():
    ref = rngmod.stream(3, rngmod.WORLD_INIT).random(3)
    noisy = rngmod.stream(3, rngmod.COMPRESSOR)
    noisy.random(10_000)
    assert rngmod.stream(3, rngmod.WORLD_INIT).random(3).tobytes() == ref.tobytes()


def test_agent_streams():
    streams = rngmod.agent_streams(2, rngmod.ESTIMATOR, 3)
    assert len(streams) == 3
    assert streams[1].random() == rngmod.stream(2, rngmod.ESTIMATOR, 1).random()
    assert isinstance(streams[0].bit_generator, np.random.Philox)


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        rngmod.stream(-1, "x")
