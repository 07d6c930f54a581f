"""Binary morphology for the position prior.

A side-output probability map is binarized, then foreground and
background are each eroded so that the ambiguous band around the predicted
boundary belongs to neither. Everything here works on plain ``numpy``
arrays and carries no gradient.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, maxpool3d


@dataclass(frozen=True)
class StructureElement:
    """Set of integer ``(dx, dy, dz)`` offsets; must contain the origin."""

    offsets: frozenset

    def __post_init__(self):
        offs = frozenset(tuple(int(v) for v in o) for o in self.offsets)
        if (0, 0, 0) not in offs:
            raise ContractError("structure element must contain the origin")
        if any(len(o) != 3 for o in offs):
            raise ContractError("offsets must be (dx, dy, dz) triples")
        object.__setattr__(self, "offsets", offs)

    @classmethod
    def box(cls, rx: int = 1, ry: int = 1, rz: int = 0) -> "StructureElement":
        return cls(frozenset(itertools.product(range(-rx, rx + 1), range(-ry, ry + 1),
                                               range(-rz, rz + 1))))

    @classmethod
    def square(cls) -> "StructureElement":
        """Default: 3x3 in-plane square, one slice thick."""
        return cls.box(1, 1, 0)

    @classmethod
    def cube(cls) -> "StructureElement":
        return cls.box(1, 1, 1)

    @property
    def radius(self) -> tuple[int, int, int]:
        return tuple(max(abs(o[i]) for o in self.offsets) for i in range(3))

    def is_box(self) -> bool:
        r = self.radius
        return len(self.offsets) == (2 * r[0] + 1) * (2 * r[1] + 1) * (2 * r[2] + 1)


DEFAULT_ELEMENT = StructureElement.square()


@dataclass
class PriorMasks:
    """Partition of a volume into per-class eroded masks plus the boundary band.

    ``classes[0]`` is background and ``classes[1]`` foreground in the two-class
    case. All arrays are ``uint8`` of shape ``(H, W, S)``.
    """

    classes: list
    boundary: np.ndarray

    @property
    def background(self) -> np.ndarray:
        return self.classes[0]

    @property
    def foreground(self) -> np.ndarray:
        return self.classes[1]

    def flat(self) -> np.ndarray:
        """``(N, H*W*S)`` float matrix, the form class centers consume."""
        return np.stack([m.reshape(-1) for m in self.classes]).astype(np.float64)

    def counts(self) -> np.ndarray:
        return np.array([int(m.sum()) for m in self.classes])


def _check_binary(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 3:
        raise DimensionError(f"expected an (H, W, S) volume, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ContractError("mask is not binary")
    return m.astype(np.uint8)


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ContractError("probabilities must lie in [0, 1]")
    return (p >= threshold).astype(np.uint8)


def erode(m, element: StructureElement = DEFAULT_ELEMENT) -> np.ndarray:
    """Keep voxels whose translated element lies entirely inside ``m``.

    Voxels outside the volume count as 0. For box elements this is
    ``1 - maxpool(1 - m)`` with the complement padded by ones.
    """
    m = _check_binary(m)
    r = element.radius
    if element.is_box():
        comp = np.pad(1.0 - m, [(ri, ri) for ri in r], constant_values=1.0)
        dil = maxpool3d(Tensor(comp[None]), tuple(2 * ri + 1 for ri in r), 1).data[0]
        return (1.0 - dil).astype(np.uint8)
    padded = np.pad(m, [(ri, ri) for ri in r], constant_values=0)
    H, W, S = m.shape
    out = np.ones_like(m)
    for dx, dy, dz in element.offsets:
        out &= padded[r[0] + dx:r[0] + dx + H, r[1] + dy:r[1] + dy + W, r[2] + dz:r[2] + dz + S]
    return out


def _class_maps(sideout: np.ndarray, threshold: float) -> list[np.ndarray]:
    sideout = np.asarray(sideout, dtype=np.float64)
    if sideout.ndim == 3:
        fg = binarize(sideout, threshold)
        return [1 - fg, fg]
    if sideout.ndim == 4:
        if sideout.shape[0] == 2:
            fg = binarize(sideout[1], threshold)
            return [1 - fg, fg]
        if np.any(sideout < 0) or np.any(sideout > 1):
            raise ContractError("probabilities must lie in [0, 1]")
        arg = sideout.argmax(axis=0)
        return [(arg == k).astype(np.uint8) for k in range(sideout.shape[0])]
    raise DimensionError(f"side-output must be (H,W,S) or (N,H,W,S), got {sideout.shape}")


def _prior(sideout, element, iterations, threshold) -> PriorMasks:
    maps = _class_maps(sideout, threshold)
    for _ in range(iterations):
        maps = [erode(m, element) for m in maps]
    claimed = np.zeros_like(maps[0])
    for m in maps:
        claimed |= m
    return PriorMasks(classes=maps, boundary=(1 - claimed).astype(np.uint8))


def position_prior(sideout, element: StructureElement = DEFAULT_ELEMENT, iterations: int = 1,
                   threshold: float = 0.5) -> PriorMasks:
    """Eroded foreground/background masks and the boundary band between them.

    ``sideout`` is either the foreground probability ``(H, W, S)`` or class
    probabilities ``(N, H, W, S)``. Two classes are split at ``threshold``;
    more classes use the per-voxel argmax.
    """
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    return _prior(sideout, element, iterations, threshold)


# Used by the PCAM fallback, which allows zero erosion passes.
prior_with_iterations = _prior
