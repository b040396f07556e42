"""Stream determinism and Box-Muller distribution checks."""

import numpy as np

from invfold.rng import RandomStream


def test_same_name_same_stream():
    a = RandomStream(5, "x").gaussian((100,))
    b = RandomStream(5, "x").gaussian((100,))
    assert np.array_equal(a, b)


def test_different_names_differ():
    a = RandomStream(5, "x").uniform((100,))
    b = RandomStream(5, "y").uniform((100,))
    assert not np.array_equal(a, b)


def test_child_streams_are_independent_of_consumption_order():
    root = RandomStream(1)
    first = root.child("a").uniform((10,))
    root.child("b").uniform((1000,))
    again = RandomStream(1).child("a").uniform((10,))
    assert np.array_equal(first, again)


def test_uniform_range():
    u = RandomStream(2, "u").uniform((10000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_gaussian_moments():
    z = RandomStream(3, "g").gaussian((200000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    # kurtosis separates a true normal from uniform-ish deviates
    assert abs(np.mean(z**4) - 3.0) < 0.08


def test_keep_mask_matches_uniform_threshold():
    mask = RandomStream(4, "m").keep_mask((5000,), 0.1)
    uni = RandomStream(4, "m").uniform((5000,))
    assert np.array_equal(mask, uni >= 0.1)


def test_permutation_is_a_permutation():
    p = RandomStream(6, "p").permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_integers_in_range():
    v = RandomStream(7, "i").integers(2, 9, (1000,))
    assert v.min() >= 2 and v.max() <= 8
