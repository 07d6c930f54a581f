"""Central finite-difference gradient checks for tape-recorded functions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import GradTape, Tensor


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation scaled by the larger gradient magnitude."""
    scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale_)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
          rtol: float = 1e-4, max_coords: int | None = None, rng=None, name: str = "") -> CheckResult:
    """Compare tape gradients of ``fn`` with central differences.

    With ``max_coords`` only that many randomly chosen entries per input are
    perturbed (the analytic side is still computed in full).
    """
    for x in inputs:
        x.requires_grad = True
    with GradTape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    worst = 0.0
    for x in inputs:
        g = grads.get(x.id)
        analytic = np.zeros(x.shape) if g is None else g.data
        coords = None
        if max_coords is not None and x.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(x.size, size=max_coords, replace=False)
        numeric = numeric_grad(fn, x, step, coords)
        if coords is not None:
            a, n = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
        else:
            a, n = analytic, numeric
        worst = max(worst, relative_error(a, n))
    return CheckResult(name, worst, worst <= rtol)


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def op_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """One randomized instance of every differentiable primitive (<= 64 elements each)."""
    cases = []
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w1 = rng.standard_normal((3, 2))
    cases.append(("matmul", lambda: T.reduce_sum(T.matmul(a, b) * w1), [a, b]))
    x = _rand(rng, 3, 5)
    w2 = rng.standard_normal((3, 5))
    cases.append(("softmax", lambda: T.reduce_sum(T.softmax(x, axis=0) * w2), [x]))
    p, q = _rand(rng, 2, 3), _rand(rng, 1, 3)
    cases.append(("add", lambda: T.reduce_sum(T.add(p, q) * T.add(p, q)), [p, q]))
    cases.append(("mul", lambda: T.reduce_sum(T.mul(p, q)), [p, q]))
    cases.append(("div", lambda: T.reduce_sum(T.div(p, T.add(T.mul(q, q), 1.0))), [p, q]))
    cases.append(("scale", lambda: T.reduce_sum(T.mul(T.scale(p, 2.5), p)), [p]))
    y = _rand(rng, 4, 4)
    w3 = rng.standard_normal((4, 4))
    cases.append(("leaky_relu", lambda: T.reduce_sum(T.leaky_relu(y, 0.1) * w3), [y]))
    cases.append(("exp_log", lambda: T.reduce_sum(T.log(T.add(T.exp(y), 1.0))), [y]))
    cases.append(("reduce_sum", lambda: T.reduce_sum(T.reduce_sum(y, axis=0) * w3[0]), [y]))
    cases.append(("reduce_mean", lambda: T.reduce_sum(T.mul(T.reduce_mean(y, axis=1), w3[1])), [y]))
    z = _rand(rng, 2, 3, 4)
    w4 = rng.standard_normal((4, 2, 3))
    cases.append(("reshape_permute", lambda: T.reduce_sum(
        T.permute(T.reshape(z, (3, 2, 4)), (2, 1, 0)) * w4), [z]))
    u, v = _rand(rng, 2, 3), _rand(rng, 2, 2)
    w5 = rng.standard_normal((2, 5))
    cases.append(("concat", lambda: T.reduce_sum(T.concat([u, v], axis=1) * w5), [u, v]))
    w6 = rng.standard_normal((2, 2, 3))
    cases.append(("stack_select", lambda: T.reduce_sum(
        T.stack([T.select(T.stack([u, u * u]), 1), u], axis=0) * w6), [u]))
    cx = _rand(rng, 2, 3, 3, 3)
    ck = _rand(rng, 2, 2, 3, 3, 1)
    cb = _rand(rng, 2)
    wc = rng.standard_normal((2, 3, 3, 3))
    cases.append(("conv3d", lambda: T.reduce_sum(T.conv3d(cx, ck, cb) * wc), [cx, ck, cb]))
    cs = _rand(rng, 1, 4, 4, 3)
    ks = _rand(rng, 1, 1, 3, 3, 3)
    ws = rng.standard_normal((1, 2, 2, 2))
    cases.append(("conv3d_stride2", lambda: T.reduce_sum(T.conv3d(cs, ks, stride=2, padding=1) * ws), [cs, ks]))
    nx = _rand(rng, 2, 3, 3, 2)
    ng, nb = _rand(rng, 2), _rand(rng, 2)
    wn = rng.standard_normal((2, 3, 3, 2))
    cases.append(("instance_norm", lambda: T.reduce_sum(T.instance_norm(nx, ng, nb) * wn), [nx, ng, nb]))
    mx = _rand(rng, 2, 4, 4, 2)
    wm = rng.standard_normal((2, 2, 2, 1))
    cases.append(("maxpool3d", lambda: T.reduce_sum(T.maxpool3d(mx, 2) * wm), [mx]))
    wo = rng.standard_normal((2, 2, 2, 2))
    cases.append(("maxpool3d_overlap", lambda: T.reduce_sum(T.maxpool3d(mx, (3, 3, 1), 1) * wo), [mx]))
    ux = _rand(rng, 2, 2, 3, 2)
    wu = rng.standard_normal((2, 4, 6, 4))
    cases.append(("upsample_trilinear", lambda: T.reduce_sum(T.upsample_trilinear(ux) * wu), [ux]))
    return cases


def pcam_case(rng):
    """Composed PCAM forward with fixed random masks."""
    from .pcam import pcam_apply
    C, H, W, S = 3, 3, 3, 2
    F = Tensor(rng.standard_normal((C, H, W, S)))
    labels = rng.integers(0, 3, size=(H, W, S))  # 2 = boundary, excluded
    labels.reshape(-1)[:2] = [0, 1]
    masks = np.stack([labels == 0, labels == 1]).astype(float).reshape(2, -1)
    wt = rng.standard_normal((C, H, W, S))
    return "pcam_forward", (lambda: T.reduce_sum(pcam_apply(F, masks) * wt)), [F]


def network_case(rng, seed: int):
    """Total deep-supervised loss of a tiny PCAM network, priors frozen."""
    from .losses import total_loss
    from .segnet import Network, NetworkConfig
    cfg = NetworkConfig(stages=2, base_channels=2, num_classes=2, pcam_location=2, seed=seed)
    net = Network(cfg)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 1, 8, 8, 4)))
    target = (rng.uniform(size=(1, 8, 8, 4)) < 0.3).astype(np.int64)
    H, W, S = 8, 8, 4
    labels = rng.integers(0, 3, size=(H, W, S))
    labels.reshape(-1)[:2] = [0, 1]
    priors = [np.stack([labels == 0, labels == 1]).astype(float).reshape(2, -1)]

    def fn():
        return total_loss(net.forward(x, priors=priors), target).total

    return f"network_loss[seed={seed}]", fn, list(net.parameters().values())


def run_suite(seeds: int = 20, step: float = 1e-5, rtol: float = 1e-4,
              network_coords: int = 6) -> list[CheckResult]:
    results = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, inputs in op_cases(rng) + [pcam_case(rng)]:
            r = check(fn, inputs, step, rtol, name=f"{name}[seed={seed}]")
            results.append(r)
        name, fn, params = network_case(rng, seed)
        results.append(check(fn, params, step, rtol, max_coords=network_coords, rng=rng, name=name))
    return results
