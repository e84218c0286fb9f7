"""Deterministic random streams."""

import numpy as np

from refalign.rng import Rng


def test_same_identity_same_sequence():
    a = Rng(42, 7).normal((100,))
    b = Rng(42, 7).normal((100,))
    assert np.array_equal(a, b)


def test_different_streams_differ():
    a = Rng(42, 0).normal((100,))
    b = Rng(42, 1).normal((100,))
    assert not np.array_equal(a, b)


def test_child_streams_are_stable_and_distinct():
    root = Rng(9)
    c1 = root.child(3)
    c2 = root.child(4)
    assert c1.stream == Rng(9).child(3).stream
    assert c1.stream != c2.stream
    assert np.array_equal(c1.normal((8,)), Rng(9).child(3).normal((8,)))


def test_nested_children_do_not_collide():
    seen = set()
    root = Rng(0)
    for i in range(50):
        for j in range(20):
            seen.add(root.child(i).child(j).stream)
    assert len(seen) == 1000


def test_draws_are_float32():
    assert Rng(1).normal((4,)).dtype == np.float32
    assert Rng(1).uniform(0, 1, (4,)).dtype == np.float32


def test_integers_range():
    draws = Rng(3).integers(0, 5, (1000,))
    assert draws.min() >= 0 and draws.max() < 5
    assert len(np.unique(draws)) == 5
