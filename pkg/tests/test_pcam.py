import numpy as np
import pytest

from pcamnet import tensor as T
from pcamnet.errors import ContractError, DegenerateClassError, DimensionError
from pcamnet.pcam import (OpCounter, affinity, attend, build_priors, class_centers,
                          counted_affinity_logits, pcam_apply, pcam_flops, pcam_forward)
from pcamnet.tensor import Tensor

import oracles


def _masks(rng, n, v):
    labels = rng.integers(0, n + 1, size=v)  # label n = boundary
    labels[:n] = np.arange(n)
    return np.stack([labels == k for k in range(n)]).astype(float)


def test_centers_example():
    F = Tensor([[1.0, 3.0, 5.0, 7.0]])
    M = np.array([[1, 1, 0, 0], [0, 0, 0, 1]], float)
    cc = class_centers(F, M)
    np.testing.assert_array_equal(cc.centers.data, [[2.0], [7.0]])
    assert cc.counts.tolist() == [2, 1]


def test_centers_errors():
    F = Tensor(np.ones((2, 4)))
    with pytest.raises(DegenerateClassError) as exc:
        class_centers(F, np.array([[1, 1, 0, 0], [0, 0, 0, 0]], float))
    assert tuple(exc.value.empty) == (1,)
    with pytest.raises(ContractError):
        class_centers(F, np.array([[0.5, 1, 0, 0], [0, 0, 1, 1]]))
    with pytest.raises(DimensionError):
        class_centers(F, np.ones((2, 3)))


def test_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        C, V, N = int(rng.integers(1, 5)), int(rng.integers(3, 12)), int(rng.integers(2, 4))
        F = rng.standard_normal((C, V))
        M = _masks(rng, N, V)
        cc = class_centers(Tensor(F), M)
        np.testing.assert_allclose(cc.centers.data, oracles.class_centers(F, M), atol=1e-9)
        A = affinity(Tensor(F), cc)
        np.testing.assert_allclose(A.values.data, oracles.affinity(F, cc.centers.data), atol=1e-9)
        out = attend(Tensor(F), cc, A)
        np.testing.assert_allclose(out.data, oracles.attend(F, cc.centers.data, A.values.data), atol=1e-9)


def test_affinity_columns_sum_to_one():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((8, 200)) * 10
    cc = class_centers(Tensor(F), _masks(rng, 3, 200))
    np.testing.assert_allclose(affinity(Tensor(F), cc).values.data.sum(axis=0), 1.0, atol=1e-12)


def test_pcam_apply_shape_and_constant_features():
    F = Tensor(np.full((3, 4, 4, 2), 2.0))
    M = np.zeros((2, 32))
    M[0, :10] = 1
    M[1, 20:] = 1
    out = pcam_apply(F, M).data
    # identical centers and uniform affinity: every voxel gains one center (2.0)
    np.testing.assert_allclose(out, 4.0, atol=1e-12)


def test_boundary_voxels_do_not_move_centers():
    rng = np.random.default_rng(2)
    F = rng.standard_normal((3, 10))
    M = _masks(rng, 2, 10)
    boundary = M.sum(0) == 0
    G = F.copy()
    G[:, boundary] += 100.0
    a = class_centers(Tensor(F), M).centers.data
    b = class_centers(Tensor(G), M).centers.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pcam_forward_statuses():
    rng = np.random.default_rng(3)
    F = Tensor(rng.standard_normal((2, 10, 10, 1)))
    side = np.zeros((10, 10, 1))
    side[3:7, 3:7] = 0.9
    _, st = pcam_forward(F, side, return_status=True)
    assert st == "eroded"
    thin = np.zeros((10, 10, 1))
    thin[5, :] = 0.9  # a single row vanishes under erosion
    _, st = pcam_forward(F, thin, return_status=True)
    assert st == "uneroded"
    out, st = pcam_forward(F, np.ones((10, 10, 1)), return_status=True)
    assert st == "skipped" and out is F


def test_pcam_forward_validates_shapes():
    F = Tensor(np.ones((2, 4, 4, 2)))
    with pytest.raises(DimensionError):
        pcam_forward(F, np.ones((4, 4, 3)))
    with pytest.raises(DimensionError):
        pcam_forward(F, np.ones((3, 4, 4, 2)) / 3, num_classes=2)


def test_build_priors_all_ones():
    prior, status = build_priors(np.ones((2, 5, 5, 2)) * [[[[0.0]]], [[[1.0]]]])
    assert prior is None and status == "skipped"


def test_flops_examples():
    assert pcam_flops(64, 48, 48, 16, 2) == 9_363_456
    assert pcam_flops(1, 1, 1, 1, 2) == 2
    with pytest.raises(ContractError):
        pcam_flops(0, 1, 1, 1, 2)


@pytest.mark.parametrize("C,N,H,W,S", [(1, 2, 2, 2, 2), (3, 2, 4, 3, 2), (5, 4, 2, 2, 3), (16, 2, 8, 8, 4)])
def test_counter_matches_formula(C, N, H, W, S):
    rng = np.random.default_rng(C)
    F, cen = rng.standard_normal((C, H * W * S)), rng.standard_normal((N, C))
    counter = OpCounter()
    logits = counted_affinity_logits(F, cen, counter)
    assert counter.total == pcam_flops(C, H, W, S, N)
    assert counter.muls == C * N * H * W * S
    np.testing.assert_allclose(logits, cen @ F, atol=1e-12)


def test_gradient_flows_into_features_only():
    rng = np.random.default_rng(4)
    F = Tensor(rng.standard_normal((2, 3, 3, 1)), requires_grad=True)
    M = _masks(rng, 2, 9)
    with T.GradTape() as tape:
        loss = T.reduce_sum(pcam_apply(F, M))
    g = tape.backward(loss)
    assert g[F.id].shape == F.shape and np.all(np.isfinite(g[F.id].data))
