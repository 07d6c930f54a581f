import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcamnet.errors import ContractError, DimensionError
from pcamnet.morphology import (DEFAULT_ELEMENT, StructureElement, binarize, erode, position_prior,
                                prior_with_iterations)

import oracles


def test_default_element_is_in_plane_square():
    assert DEFAULT_ELEMENT.radius == (1, 1, 0)
    assert len(DEFAULT_ELEMENT.offsets) == 9
    assert len(StructureElement.cube().offsets) == 27


def test_erode_examples():
    m = np.zeros((5, 5, 1), np.uint8)
    m[1:4, 1:4] = 1
    out = erode(m)
    assert out.sum() == 1 and out[2, 2, 0] == 1
    assert erode(np.ones((4, 4, 2), np.uint8)).sum() == 2 * 4   # outside counts as 0
    assert erode(np.zeros((3, 3, 3), np.uint8)).sum() == 0


def test_erode_rejects_non_binary():
    with pytest.raises(ContractError):
        erode(np.full((3, 3, 1), 2))
    with pytest.raises(DimensionError):
        erode(np.ones((3, 3)))


def test_binarize_threshold_and_range():
    assert binarize(np.array([[[0.49, 0.5, 1.0]]])).tolist() == [[[0, 1, 1]]]
    with pytest.raises(ContractError):
        binarize(np.array([[[1.2]]]))


ELEMENTS = [StructureElement.square(), StructureElement.cube(), StructureElement.box(1, 0, 1),
            StructureElement(((0, 0, 0), (1, 0, 0), (0, -1, 0), (0, 0, 1)))]


@pytest.mark.parametrize("k", range(len(ELEMENTS)))
def test_erode_vs_set_inclusion(k):
    rng = np.random.default_rng(k)
    for _ in range(30):
        shape = tuple(rng.integers(1, 6, size=3))
        m = (rng.uniform(size=shape) < rng.uniform(0.4, 0.95)).astype(np.uint8)
        np.testing.assert_array_equal(erode(m, ELEMENTS[k]), oracles.erode(m, ELEMENTS[k].offsets))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_erode_monotone_and_anti_extensive(seed):
    rng = np.random.default_rng(seed)
    a = (rng.uniform(size=(5, 5, 3)) < 0.7).astype(np.uint8)
    b = a & (rng.uniform(size=a.shape) < 0.8)
    ea, eb = erode(a), erode(b)
    assert np.all(ea <= a)
    assert np.all(eb <= ea)


def test_prior_partition_exhaustive():
    # every binary 3x3x1 volume under the 3D element: classes and boundary partition the grid
    for bits in range(2 ** 9):
        fg = np.array([(bits >> i) & 1 for i in range(9)], np.float64).reshape(3, 3, 1)
        pm = position_prior(fg, StructureElement.square())
        total = pm.background.astype(int) + pm.foreground + pm.boundary
        assert np.all(total == 1)
        assert np.all(pm.foreground <= (fg >= 0.5))
        assert np.all(pm.background <= (fg < 0.5))


def test_prior_multiclass_argmax():
    p = np.zeros((3, 5, 5, 1))
    p[0] = 0.6
    p[1, :, 3:] = 0.9
    p[2, 4, :] = 0.95
    pm = position_prior(p / p.sum(0, keepdims=True))
    assert len(pm.classes) == 3
    total = sum(m.astype(int) for m in pm.classes) + pm.boundary
    assert np.all(total == 1)


def test_prior_iterations():
    fg = np.zeros((9, 9, 1))
    fg[1:8, 1:8] = 1.0
    one = position_prior(fg).foreground.sum()
    two = position_prior(fg, iterations=2).foreground.sum()
    assert (one, two) == (25, 9)
    assert prior_with_iterations(fg, DEFAULT_ELEMENT, 0, 0.5).foreground.sum() == 49
    with pytest.raises(ContractError):
        position_prior(fg, iterations=0)


def test_prior_flat_and_counts():
    fg = np.zeros((4, 4, 2))
    fg[:2] = 1.0
    pm = position_prior(fg)
    flat = pm.flat()
    assert flat.shape == (2, 32) and flat.dtype == np.float64
    assert pm.counts().tolist() == [int(pm.background.sum()), int(pm.foreground.sum())]
