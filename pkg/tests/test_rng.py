import numpy as np
import pytest

from dualpf.rng import split, stream


def test_same_key_same_draws():
    a = stream(7, 3, "filter").random(5)
    b = stream(7, 3, "filter").random(5)
    np.testing.assert_array_equal(a, b)


def test_different_keys_differ():
    base = stream(7, 3, "filter").random(5)
    assert not np.array_equal(base, stream(7, 4, "filter").random(5))
    assert not np.array_equal(base, stream(7, 3, "truth").random(5))
    assert not np.array_equal(base, stream(8, 3, "filter").random(5))


def test_large_seed_accepted():
    stream(2**64 - 1, 0, "truth").random()


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        stream(-1, 0, "truth")


def test_split_deterministic():
    a = [g.random() for g in split(np.random.default_rng(1), 3)]
    b = [g.random() for g in split(np.random.default_rng(1), 3)]
    assert a == b and len(set(a)) == 3
