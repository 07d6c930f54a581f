"""Synthetic thin-sheet volumes standing in for cartilage MR data.

Each sample holds one curved sheet a few voxels thick. In every slice it
shows up as a bright band at ~0.8, surrounded by a halo of intermediate
intensity (~0.5) on a background of ~0.2. With probability
``break_probability`` a short gap is cut into the *image*. The label stays
connected there, so a model has to bridge the gap to keep the sheet
continuous.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .metrics import DEFAULT_SPACING

FG_LEVEL, HALO_LEVEL, BG_LEVEL = 0.8, 0.5, 0.2


@dataclass
class SynthSpec:
    extents: tuple = (48, 48, 16)
    thickness: int = 4
    curvature: float = 4.0
    break_probability: float = 0.5
    break_contrast: float = 0.4  # share of the sheet/background contrast kept inside a gap
    halo_width: int = 1
    noise_sigma: float = 0.16
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if len(self.extents) != 3 or min(self.extents) < 4:
            raise ConfigError("extents must be three values >= 4")
        if self.thickness < 1 or self.thickness > self.extents[1] // 3:
            raise ConfigError("thickness must be >= 1 and fit the volume")
        if not 0.0 <= self.break_probability <= 1.0:
            raise ConfigError("break_probability must be in [0, 1]")
        if not 0.0 <= self.break_contrast < 1.0:
            raise ConfigError("break_contrast must be in [0, 1)")
        if self.halo_width < 0 or self.noise_sigma < 0 or self.curvature < 0:
            raise ConfigError("halo_width, noise_sigma and curvature must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown dataset spec keys: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Sample:
    image: np.ndarray  # float64 in [0, 1], (H, W, S)
    label: np.ndarray  # uint8 class indices
    broken: bool = False

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise DataError("image/label extents differ")


def _sheet(spec: SynthSpec, rng):
    H, W, S = spec.extents
    y0 = rng.uniform(0.35, 0.65) * W
    amp = rng.uniform(0.5, 1.0) * spec.curvature
    wavelength = rng.uniform(0.9, 1.6) * H
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.3, 0.3)
    x0 = int(rng.integers(int(0.1 * H), int(0.25 * H) + 1))
    x1 = int(rng.integers(int(0.75 * H), int(0.9 * H) + 1))
    s0 = int(rng.integers(1, max(2, S // 8) + 1))
    s1 = S - int(rng.integers(1, max(2, S // 8) + 1))
    label = np.zeros(spec.extents, dtype=np.uint8)
    xs = np.arange(x0, x1)
    for s in range(s0, s1):
        centre = y0 + amp * np.sin(2 * np.pi * xs / wavelength + phase) + tilt * (s - S / 2)
        lo = np.clip(np.round(centre - spec.thickness / 2).astype(int), 1, W - 1 - spec.thickness)
        for x, y in zip(xs, lo):
            label[x, y:y + spec.thickness, s] = 1
    return label, (x0, x1)


def make_sample(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    label, (x0, x1) = _sheet(spec, rng)
    in_plane = np.zeros((3, 3, 3), dtype=bool)
    in_plane[:, :, 1] = True
    halo = ndimage.binary_dilation(label.astype(bool), in_plane, iterations=spec.halo_width) \
        if spec.halo_width else label.astype(bool)
    image = np.full(spec.extents, BG_LEVEL)
    image[halo] = HALO_LEVEL
    image[label.astype(bool)] = FG_LEVEL
    broken = bool(rng.uniform() < spec.break_probability)
    if broken:
        gap = int(rng.integers(2, 5))
        start = int(rng.integers(x0 + 4, max(x0 + 5, x1 - 4 - gap)))
        cut = image[start:start + gap]
        region = halo[start:start + gap]
        cut[region] = BG_LEVEL + spec.break_contrast * (cut[region] - BG_LEVEL)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return Sample(np.clip(image, 0.0, 1.0), label, broken)


def generate(spec: SynthSpec, count: int) -> list[Sample]:
    return [make_sample(spec, i) for i in range(count)]


def augment(sample: Sample, seed: int, noise_sigma: float = 0.02) -> Sample:
    """Random axis flips, in-plane quarter turns and additive image noise."""
    rng = np.random.default_rng(seed)
    img, lab = sample.image, sample.label
    for ax in range(3):
        if rng.uniform() < 0.5:
            img, lab = np.flip(img, ax), np.flip(lab, ax)
    k = int(rng.integers(0, 4))
    if img.shape[0] != img.shape[1]:
        k = 2 * (k % 2)
    if k:
        img, lab = np.rot90(img, k, axes=(0, 1)), np.rot90(lab, k, axes=(0, 1))
    img = np.ascontiguousarray(img)
    if noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, noise_sigma, size=img.shape), 0.0, 1.0)
    return Sample(img, np.ascontiguousarray(lab), sample.broken)


# ------------------------------------------------------------------- on disk

def write_dataset(samples, out_dir, spec: SynthSpec | None = None, spacing=DEFAULT_SPACING):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            d = out / f"sample_{i:04d}"
            d.mkdir(exist_ok=True)
            (d / "image.raw").write_bytes(s.image.astype("<f8").tobytes())
            (d / "label.raw").write_bytes(s.label.astype(np.uint8).tobytes())
            meta = {"extents": list(s.image.shape), "spacing": list(spacing),
                    "seed": None if spec is None else spec.seed, "index": i, "broken": s.broken}
            (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc


def read_sample(d) -> tuple[Sample, dict]:
    d = Path(d)
    try:
        meta = json.loads((d / "meta.json").read_text())
        ext = tuple(meta["extents"])
        img = np.frombuffer((d / "image.raw").read_bytes(), dtype="<f8").astype(np.float64)
        lab = np.frombuffer((d / "label.raw").read_bytes(), dtype=np.uint8).copy()
        sample = Sample(img.reshape(ext), lab.reshape(ext), bool(meta.get("broken", False)))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"malformed sample in {d}: {exc}") from exc
    return sample, meta


def read_dataset(data_dir) -> tuple[list[Sample], list[dict]]:
    root = Path(data_dir)
    dirs = sorted(p for p in root.glob("sample_*") if p.is_dir()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"no samples found in {root}")
    pairs = [read_sample(d) for d in dirs]
    return [p[0] for p in pairs], [p[1] for p in pairs]
