"""Registry of finite-difference checks for every differentiable operator
and for the composed encoder + training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .alignment import KernelConfig, decoupled_loss, mmd2
from .encoder import ArchConfig, classify, encode, init_encoder
from .trainer import loss_and_grads

OP_TOL = 1e-6
COMPOSED_TOL = 1e-5


def _probe(y_fn, backward_fn, shape_of_y, rng):
    """Scalarize an op as sum(y * r) for a fixed random r.

    Returns ``(fn, value_fn)``: with gradients, and forward only.
    """
    r = rng.standard_normal(shape_of_y)

    def fn(inputs):
        y, cache = y_fn(inputs)
        return float(np.sum(y * r)), backward_fn(r, cache, inputs)

    def value_fn(inputs):
        return float(np.sum(y_fn(inputs)[0] * r))

    return fn, value_fn


def _check_conv(nd: int, rng: np.random.Generator, **kw) -> float:
    spatial = tuple(rng.integers(2, 5, size=nd))
    c_in, c_out = rng.integers(1, 4, size=2)
    kernel = tuple(rng.choice([1, 3], size=nd))
    inputs = {
        "x": rng.standard_normal((2, c_in) + spatial),
        "w": rng.standard_normal((c_out, c_in) + kernel),
        "b": rng.standard_normal(c_out),
    }

    def backward(r, cache, _):
        dx, g = nn.conv_backward(r, cache)
        return {"x": dx, **g}

    fn, value_fn = _probe(lambda i: nn.conv_forward(i["x"], i["w"], i["b"]), backward, (2, c_out) + spatial, rng)
    return nn.grad_check(fn, inputs, value_fn=value_fn, **kw)


def check_conv1d(rng, **kw):
    return _check_conv(1, rng, **kw)


def check_conv2d(rng, **kw):
    return _check_conv(2, rng, **kw)


def check_conv3d(rng, **kw):
    return _check_conv(3, rng, **kw)


def check_relu(rng, **kw):
    x = rng.standard_normal((3, 4))
    fn, value_fn = _probe(lambda i: nn.relu(i["x"]), lambda r, mask, _: {"x": nn.relu_backward(r, mask)}, x.shape, rng)
    return nn.grad_check(fn, {"x": x}, value_fn=value_fn, **kw)


def check_residual_fuse(rng, **kw):
    inputs = {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((2, 3, 4))}
    fn, value_fn = _probe(lambda i: (nn.residual_fuse(i["a"], i["b"]), None), lambda r, c, _: {"a": r, "b": r}, (2, 3, 4), rng)
    return nn.grad_check(fn, inputs, value_fn=value_fn, **kw)


def check_channel_attention(rng, **kw):
    c, r = 4, 2
    inputs = {
        "x": rng.standard_normal((2, c, 5)),
        "w1": rng.standard_normal((c // r, c)),
        "w2": rng.standard_normal((c, c // r)),
    }

    def backward(g, cache, _):
        dx, grads = nn.channel_attention_backward(g, cache)
        return {"x": dx, **grads}

    fn, value_fn = _probe(lambda i: nn.channel_attention(i["x"], i["w1"], i["w2"]), backward, (2, c, 5), rng)
    return nn.grad_check(fn, inputs, value_fn=value_fn, **kw)


def check_spatial_attention(rng, **kw):
    shape = (2, 3, 2, 3, 3)
    inputs = {
        "x": rng.standard_normal(shape),
        "w": rng.standard_normal((1, 2, 3, 3)),
        "b": rng.standard_normal(1),
    }

    def backward(g, cache, _):
        dx, grads = nn.spatial_attention_backward(g, cache)
        return {"x": dx, **grads}

    fn, value_fn = _probe(lambda i: nn.spatial_attention(i["x"], i["w"], i["b"]), backward, shape, rng)
    return nn.grad_check(fn, inputs, value_fn=value_fn, **kw)


def check_linear(rng, **kw):
    inputs = {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((4, 5)), "b": rng.standard_normal(4)}

    def backward(g, cache, _):
        dx, grads = nn.linear_backward(g, cache)
        return {"x": dx, **grads}

    fn, value_fn = _probe(lambda i: nn.linear(i["x"], i["w"], i["b"]), backward, (3, 4), rng)
    return nn.grad_check(fn, inputs, value_fn=value_fn, **kw)


def check_softmax_cross_entropy(rng, **kw):
    labels = rng.integers(1, 4, size=4)

    def fn(inputs):
        loss, _, d = nn.softmax_cross_entropy(inputs["logits"], labels)
        return loss, {"logits": d}

    return nn.grad_check(fn, {"logits": rng.standard_normal((4, 3))}, **kw)


def check_mmd2(rng, **kw):
    s = rng.standard_normal((3, 4))
    t = rng.standard_normal((3, 4)) + 0.5
    cfg = KernelConfig(bandwidth=float(rng.uniform(0.5, 2.0)))

    def fn(inputs):
        v, ds, dt, _ = mmd2(inputs["s"], inputs["t"], cfg)
        return v, {"s": ds, "t": dt}

    return nn.grad_check(fn, {"s": s, "t": t}, **kw)


TINY_ARCH = ArchConfig(
    bands=5,
    n_classes=3,
    spe_channels=(3, 3, 3),
    spa_channels=(2, 2, 2),
    feature_dim=4,
    reduction=2,
)


def check_encoder_loss(rng, alpha: float = 10.0, max_coords: int = 6, **kw) -> float:
    """L_cls + alpha * L_MMD through the whole encoder on a 2+2 batch.

    Bandwidths are frozen at their values at the unperturbed point, matching
    the analytic gradient which treats them as constants.
    """
    params = init_encoder(int(rng.integers(2**31)), TINY_ARCH)
    source = rng.standard_normal((2, TINY_ARCH.bands, 3, 3))
    target = rng.standard_normal((2, TINY_ARCH.bands, 3, 3)) + 0.3
    labels = rng.integers(1, TINY_ARCH.n_classes + 1, size=2)

    f = encode(np.concatenate([source, target]), params)
    dl = decoupled_loss(f.spe[:2], f.spe[2:], f.spa[:2], f.spa[2:])
    kernels = (KernelConfig(dl.sigma_spe), KernelConfig(dl.sigma_spa))

    def fn(inputs):
        params.store.params.update(inputs)
        report, grads = loss_and_grads(params, source, labels, target, alpha, kernels)
        return report.l_total, grads

    def value_fn(inputs):
        # forward only, assembled from the public pieces rather than the trainer
        params.store.params.update(inputs)
        f = encode(np.concatenate([source, target]), params)
        logits, _ = classify(f.fused[:2], params)
        l_cls, _, _ = nn.softmax_cross_entropy(logits, labels)
        dl = decoupled_loss(f.spe[:2], f.spe[2:], f.spa[:2], f.spa[2:], *kernels)
        return l_cls + alpha * dl.l_mmd

    start = {k: v.copy() for k, v in params.store.params.items()}
    return nn.grad_check(fn, start, max_coords=max_coords, seed=int(rng.integers(2**31)), value_fn=value_fn, **kw)


@dataclass(frozen=True)
class Check:
    name: str
    run: Callable[..., float]
    tol: float


REGISTRY: tuple[Check, ...] = (
    Check("conv1d", check_conv1d, OP_TOL),
    Check("conv2d", check_conv2d, OP_TOL),
    Check("conv3d", check_conv3d, OP_TOL),
    Check("relu", check_relu, OP_TOL),
    Check("residual_fuse", check_residual_fuse, OP_TOL),
    Check("channel_attention", check_channel_attention, OP_TOL),
    Check("spatial_attention", check_spatial_attention, OP_TOL),
    Check("linear", check_linear, OP_TOL),
    Check("softmax_cross_entropy", check_softmax_cross_entropy, OP_TOL),
    Check("mmd2", check_mmd2, OP_TOL),
    Check("encoder+loss", check_encoder_loss, COMPOSED_TOL),
)


def run_all(seeds: int = 20, tol_override: float | None = None) -> list[dict]:
    """Worst error per check over ``seeds`` seeds, with a pass flag."""
    results = []
    for check in REGISTRY:
        worst = max(check.run(np.random.default_rng(seed)) for seed in range(seeds))
        tol = check.tol if tol_override is None else tol_override
        results.append({"op": check.name, "max_rel_error": worst, "tol": tol, "pass": bool(worst <= tol)})
    return results
