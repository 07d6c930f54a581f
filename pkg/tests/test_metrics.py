import json

import numpy as np
import pytest

from pcamnet.errors import DimensionError
from pcamnet.metrics import (METRIC_KEYS, MetricsReport, assd, betti0_error, canonical_json,
                             count_components, dsc, evaluate_volume, fmt, precision, surface, voe)

import oracles


def _cube(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return m


def test_overlap_examples():
    a = _cube((4, 4, 1), (0, 0, 0), (2, 4, 1))
    b = _cube((4, 4, 1), (1, 0, 0), (3, 4, 1))
    assert dsc(a, b) == pytest.approx(0.5)
    assert voe(a, b) == pytest.approx(1 - 4 / 12)
    assert dsc(a, a) == 1.0 and voe(a, a) == 0.0
    empty = np.zeros((2, 2, 2), bool)
    assert dsc(empty, empty) == 1.0 and voe(empty, empty) == 0.0
    with pytest.raises(DimensionError):
        dsc(a, empty)


def test_precision():
    a = _cube((4, 4, 1), (0, 0, 0), (2, 4, 1))
    b = _cube((4, 4, 1), (1, 0, 0), (3, 4, 1))
    assert precision(a, b) == pytest.approx(0.5)
    assert precision(np.zeros_like(a), b) is None


def test_surface_of_solid_cube():
    m = _cube((5, 5, 5), (1, 1, 1), (4, 4, 4))
    s = surface(m)
    assert s.sum() == 26 and not s[2, 2, 2]
    assert surface(np.ones((3, 3, 3))).sum() == 26  # the volume border counts as surface


def test_assd_examples():
    a = _cube((6, 6, 1), (1, 1, 0), (3, 3, 1))
    assert assd(a, a) == 0.0
    b = np.roll(a, 1, axis=0)
    # each 2x2 square shifted by one voxel: half the surface points move 0, half 1 voxel
    assert assd(a, b, (1.0, 1.0, 1.0)) == pytest.approx(oracles.assd(a, b, (1.0, 1.0, 1.0)), abs=1e-12)
    assert assd(a, np.zeros_like(a)) is None


def test_assd_vs_all_pairs():
    rng = np.random.default_rng(0)
    for _ in range(40):
        shape = tuple(rng.integers(2, 6, size=3))
        a = rng.uniform(size=shape) < 0.4
        b = rng.uniform(size=shape) < 0.4
        a.reshape(-1)[0] = b.reshape(-1)[-1] = True
        sp = tuple(rng.uniform(0.2, 1.5, size=3))
        assert assd(a, b, sp) == pytest.approx(oracles.assd(a, b, sp), abs=1e-9)


def test_betti_examples():
    sl = np.zeros((5, 5), bool)
    sl[0, 0] = sl[1, 1] = True  # diagonal touch joins under 8-connectivity
    assert count_components(sl, 8) == 1 and count_components(sl, 4) == 2
    gt = np.zeros((5, 5, 2), bool)
    gt[:, 2, :] = True
    pred = gt.copy()
    pred[2, 2, 0] = False  # one break in the first slice
    assert betti0_error(pred, gt) == 0.5


def test_betti_vs_union_find():
    rng = np.random.default_rng(1)
    for _ in range(40):
        shape = tuple(rng.integers(2, 8, size=2)) + (int(rng.integers(1, 4)),)
        a = rng.uniform(size=shape) < 0.35
        b = rng.uniform(size=shape) < 0.35
        assert betti0_error(a, b) == pytest.approx(oracles.betti0_error(a, b), abs=1e-12)


def test_report_aggregate_and_exclusion():
    rep = MetricsReport()
    rep.add({"id": 0, "dsc": 0.5, "assd": None})
    rep.add({"id": 1, "dsc": 1.0, "assd": 2.0})
    agg = rep.aggregate()
    assert agg["dsc"] == {"mean": 0.75, "std": 0.25, "n": 2, "excluded": 0}
    assert agg["assd"]["n"] == 1 and agg["assd"]["excluded"] == 1
    assert agg["voe"]["mean"] is None
    doc = json.loads(rep.to_json())
    assert list(doc) == ["aggregate", "per_volume"]
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(("id",) + METRIC_KEYS)
    assert lines[1].startswith("0,0.5,,")


def test_formatting_is_canonical():
    assert fmt(1 / 3) == "0.333333" and fmt(None) == ""
    assert canonical_json({"b": 1 / 3, "a": float("nan")}) == '{\n "a": null,\n "b": 0.333333\n}\n'


def test_evaluate_volume_keys():
    m = _cube((4, 4, 2), (1, 1, 0), (3, 3, 2))
    row = evaluate_volume(m, m)
    assert row == {"dsc": 1.0, "voe": 0.0, "assd": 0.0, "betti0_error": 0.0}
