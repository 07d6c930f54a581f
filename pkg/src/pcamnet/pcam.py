"""Position-prior clustering-based attention.

Each class center is the masked mean of the feature vectors the position
prior assigns to that class. Every voxel is then scored against every
center with a dot product, the scores are softmaxed over classes, and the
affinity-weighted sum of centers is added back onto the voxel's features.
Boundary voxels contribute to no center but are attended like any other.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateClassError, DimensionError, NumericError
from .morphology import DEFAULT_ELEMENT, StructureElement, prior_with_iterations
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class ClassCenters:
    centers: Tensor  # (N, C)
    counts: np.ndarray  # (N,) voxel counts behind each center


@dataclass
class AffinityMap:
    values: Tensor  # (N, HWS); columns sum to one


def _as_mask_matrix(masks) -> np.ndarray:
    M = np.asarray(masks, dtype=np.float64)
    if M.ndim != 2:
        M = M.reshape(M.shape[0], -1)
    if not np.all((M == 0) | (M == 1)):
        raise ContractError("class masks must be binary")
    return M


def class_centers(F: Tensor, masks) -> ClassCenters:
    """Masked mean of the columns of ``F`` (``C x HWS``) for each class mask."""
    if F.ndim != 2:
        raise DimensionError(f"features must be (C, HWS), got {F.shape}")
    M = _as_mask_matrix(masks)
    if M.shape[0] < 2:
        raise ContractError("need at least two classes")
    if M.shape[1] != F.shape[1]:
        raise DimensionError(f"masks cover {M.shape[1]} voxels, features {F.shape[1]}")
    counts = M.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateClassError(empty.tolist())
    weights = M / counts[:, None]
    centers = T.matmul(Tensor(weights), T.permute(F, (1, 0)))
    return ClassCenters(centers, counts.astype(np.int64))


def affinity(F: Tensor, centers: ClassCenters) -> AffinityMap:
    """Softmax over classes of center-feature dot products, per voxel."""
    C = centers.centers
    if C.shape[1] != F.shape[0]:
        raise DimensionError(f"centers have {C.shape[1]} channels, features {F.shape[0]}")
    logits = T.matmul(C, F)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite center/feature dot products")
    return AffinityMap(T.softmax(logits, axis=0))


def attend(F: Tensor, centers: ClassCenters, A: AffinityMap) -> Tensor:
    """``F(j) + sum_i A[i, j] * center_i`` for every voxel ``j``."""
    N, C = centers.centers.shape
    if F.shape[0] != C or A.values.shape != (N, F.shape[1]):
        raise DimensionError(
            f"inconsistent shapes: F {F.shape}, centers {(N, C)}, affinity {A.values.shape}")
    return T.add(F, T.matmul(T.permute(centers.centers, (1, 0)), A.values))


def pcam_apply(F: Tensor, masks) -> Tensor:
    """Centers, affinity and attention for a ``C x H x W x S`` map with given masks."""
    shape = F.shape
    flat = T.reshape(F, (shape[0], -1))
    centers = class_centers(flat, masks)
    A = affinity(flat, centers)
    return T.reshape(attend(flat, centers, A), shape)


def build_priors(sideout, element: StructureElement = DEFAULT_ELEMENT, iterations: int = 1,
                 threshold: float = 0.5):
    """Position prior with the empty-class fallback.

    Returns ``(masks, status)``: ``status`` is ``"eroded"``, ``"uneroded"``
    (erosion emptied a class, so raw binarized masks are used) or
    ``"skipped"`` (a class is absent even before erosion; ``masks`` is None).
    """
    for its, status in ((iterations, "eroded"), (0, "uneroded")):
        prior = prior_with_iterations(sideout, element, its, threshold)
        if np.all(prior.counts() > 0):
            return prior, status
    log.debug("PCAM skipped: a class is empty in the side-output")
    return None, "skipped"


def pcam_forward(F: Tensor, sideout, element: StructureElement = DEFAULT_ELEMENT,
                 num_classes: int = 2, iterations: int = 1, threshold: float = 0.5,
                 return_status: bool = False):
    """Full module: position prior from ``sideout`` then attention on ``F``.

    ``sideout`` carries no gradient. With a degenerate side-output the
    input is returned unchanged.
    """
    if F.ndim != 4:
        raise DimensionError(f"features must be (C, H, W, S), got {F.shape}")
    so = sideout.data if isinstance(sideout, Tensor) else np.asarray(sideout, dtype=np.float64)
    if so.shape[-3:] != F.shape[1:]:
        raise DimensionError(f"side-output extents {so.shape[-3:]} != feature extents {F.shape[1:]}")
    if so.ndim == 4 and so.shape[0] != num_classes:
        raise DimensionError(f"side-output has {so.shape[0]} classes, expected {num_classes}")
    if so.ndim == 3 and num_classes != 2:
        raise DimensionError("a single probability volume implies two classes")
    prior, status = build_priors(so, element, iterations, threshold)
    out = F if prior is None else pcam_apply(F, prior.flat())
    return (out, status) if return_status else out


def pcam_flops(C: int, H: int, W: int, S: int, N: int) -> int:
    """Floating-point operations of the affinity stage, ``(2C-1) * N * HWS``.

    Counts the C multiplies and C-1 adds of each voxel/center dot product;
    the softmax and the attention sum are not included.
    """
    for v in (C, H, W, S, N):
        if int(v) != v or v < 1:
            raise ContractError("pcam_flops takes positive integers")
    return (2 * C - 1) * N * H * W * S


class OpCounter:
    """Tallies scalar multiplies and adds performed through it."""

    def __init__(self):
        self.muls = 0
        self.adds = 0

    def mul(self, a, b):
        out = np.multiply(a, b)
        self.muls += np.size(out)
        return out

    def add(self, a, b):
        out = np.add(a, b)
        self.adds += np.size(out)
        return out

    @property
    def total(self) -> int:
        return self.muls + self.adds


def counted_affinity_logits(F: np.ndarray, centers: np.ndarray, counter: OpCounter) -> np.ndarray:
    """Center/feature dot products accumulated channel by channel through ``counter``."""
    C, V = F.shape
    N = centers.shape[0]
    logits = np.empty((N, V))
    for i in range(N):
        acc = counter.mul(centers[i, 0], F[0])
        for c in range(1, C):
            acc = counter.add(acc, counter.mul(centers[i, c], F[c]))
        logits[i] = acc
    return logits
