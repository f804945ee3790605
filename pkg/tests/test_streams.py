import doctest

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import dnaprivacy.streams as streams_module
from dnaprivacy.streams import child, stream

labels = st.lists(st.one_of(st.integers(0, 2**40), st.text(max_size=8)), max_size=4)


@given(seed=st.integers(0, 2**63), path=labels)
def test_same_labels_same_draws(seed, path):
    assert stream(seed, *path).integers(1 << 62) == stream(seed, *path).integers(1 << 62)


@given(seed=st.integers(0, 2**32), path=labels, extra=st.one_of(st.integers(0, 99), st.text(max_size=4)))
def test_child_equals_direct_stream(seed, path, extra):
    assert child(stream(seed, *path), extra).integers(1 << 62) == stream(seed, *path, extra).integers(1 << 62)


def test_child_does_not_advance_parent():
    a, b = stream(1, "x"), stream(1, "x")
    child(a, "y").random(10)
    assert a.random() == b.random()


def test_distinct_labels_distinct_streams():
    draws = {int(stream(5, "trial", i).integers(1 << 62)) for i in range(1000)}
    assert len(draws) == 1000
    assert stream(5, "a").random() != stream(5, "b").random()
    assert stream(5, 1).random() != stream(5, "1").random()


@pytest.mark.parametrize("bad", [-1, True])
def test_bad_labels(bad):
    with pytest.raises((TypeError, ValueError)):
        stream(0, bad)


def test_docstring_examples():
    assert doctest.testmod(streams_module).failed == 0
