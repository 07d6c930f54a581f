import json

import numpy as np
import pytest

from pcamnet.errors import ConfigError, DataError
from pcamnet.metrics import count_components
from pcamnet.synthdata import (SynthSpec, augment, generate, make_sample, read_dataset, read_sample,
                               write_dataset)


def test_spec_validation_and_round_trip():
    spec = SynthSpec(extents=(16, 16, 8), seed=3)
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    for bad in (dict(extents=(2, 16, 8)), dict(break_probability=1.5), dict(noise_sigma=-1.0),
                dict(thickness=0)):
        with pytest.raises(ConfigError):
            SynthSpec(**bad)
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"colour": 1})


def test_deterministic_and_index_dependent():
    spec = SynthSpec(extents=(24, 24, 8))
    a, b = make_sample(spec, 3), make_sample(spec, 3)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)
    assert not np.array_equal(a.label, make_sample(spec, 4).label)


def test_clean_image_encodes_label():
    spec = SynthSpec(noise_sigma=0.0, break_probability=0.0)
    for s in generate(spec, 4):
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert np.array_equal(s.image > 0.65, s.label.astype(bool))


def test_foreground_fraction_is_thin():
    fracs = np.array([make_sample(SynthSpec(seed=k), 0).label.mean() for k in range(100)])
    assert np.all((fracs > 0.005) & (fracs < 0.10))


def test_clean_histogram_is_trimodal():
    img = make_sample(SynthSpec(noise_sigma=0.0, break_probability=0.0), 0).image
    assert sorted(np.unique(img).tolist()) == [0.2, 0.5, 0.8]


def test_partial_break_contrast():
    spec = dict(noise_sigma=0.0, break_probability=1.0)
    blank = make_sample(SynthSpec(**spec, break_contrast=0.0), 2).image
    weak = make_sample(SynthSpec(**spec, break_contrast=0.5), 2).image
    gap = blank != weak
    assert gap.any()
    assert np.allclose(blank[gap], 0.2) and np.all((weak[gap] > 0.2) & (weak[gap] < 0.65))


def test_label_is_one_component_per_occupied_slice():
    s = make_sample(SynthSpec(break_probability=1.0), 0)
    assert s.broken
    for k in range(s.label.shape[2]):
        if s.label[:, :, k].any():
            assert count_components(s.label[:, :, k]) == 1


def test_break_cuts_the_image_not_the_label():
    clean = make_sample(SynthSpec(noise_sigma=0.0, break_probability=0.0), 1)
    broken = make_sample(SynthSpec(noise_sigma=0.0, break_probability=1.0), 1)
    assert np.array_equal(clean.label, broken.label)
    bright = broken.image > 0.65
    assert bright.sum() < clean.label.sum()
    assert any(count_components(bright[:, :, k]) > 1 for k in range(bright.shape[2]))


def test_break_probability_rate():
    flags = [s.broken for s in generate(SynthSpec(extents=(16, 16, 8), break_probability=0.5), 200)]
    assert 0.4 < np.mean(flags) < 0.6


def test_augment_keeps_pairs_aligned():
    s = make_sample(SynthSpec(noise_sigma=0.0), 0)
    for seed in range(8):
        a = augment(s, seed, noise_sigma=0.0)
        assert a.image.shape == s.image.shape
        assert np.array_equal(a.image > 0.65, a.label.astype(bool))
        assert a.label.sum() == s.label.sum()
    assert np.array_equal(augment(s, 5).image, augment(s, 5).image)


def test_disk_round_trip(tmp_path):
    spec = SynthSpec(extents=(16, 16, 8), seed=2)
    samples = generate(spec, 3)
    write_dataset(samples, tmp_path / "d", spec)
    back, meta = read_dataset(tmp_path / "d")
    assert len(back) == 3 and meta[0]["extents"] == [16, 16, 8]
    for s, t in zip(samples, back):
        assert np.array_equal(s.image, t.image) and np.array_equal(s.label, t.label)
        assert s.broken == t.broken
    raw = (tmp_path / "d" / "sample_0000" / "image.raw").read_bytes()
    write_dataset(samples, tmp_path / "e", spec)
    assert (tmp_path / "e" / "sample_0000" / "image.raw").read_bytes() == raw
    assert json.loads((tmp_path / "d" / "sample_0001" / "meta.json").read_text())["index"] == 1


def test_read_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / "missing")
    d = tmp_path / "sample_0000"
    d.mkdir()
    (d / "meta.json").write_text('{"extents": [2, 2, 2]}')
    (d / "image.raw").write_bytes(b"\0" * 8)
    (d / "label.raw").write_bytes(b"\0" * 8)
    with pytest.raises(DataError):
        read_sample(d)
