"""Differentiable operators with hand-written backward passes.

Every op works on a leading batch axis ``n``. Forward functions return
``(output, cache)``; the matching ``*_backward`` takes the upstream gradient
and the cache and returns the input gradient plus a dict of parameter
gradients. Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]

    def __post_init__(self):
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ShapeError(f"kernel sizes must be odd, got {self.kernel}")

    @property
    def padding(self) -> tuple[int, ...]:
        return tuple((k - 1) // 2 for k in self.kernel)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    @property
    def fan_in(self) -> int:
        return self.in_channels * int(np.prod(self.kernel))


@dataclass
class ParamStore:
    """Named weights with gradient accumulators and momentum buffers."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocity[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.grads[name] += g

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.velocity[name] = self.velocity[name].copy()
        return out


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # relu gain: var = 2 / fan_in
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- convolution


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> int:
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"expected input with {nd + 2} dims, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ShapeError(f"kernel sizes must be odd, got {w.shape[2:]}")
    return nd


def _windows(x: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    nd = len(kernel)
    pads = [(0, 0), (0, 0)] + [((k - 1) // 2, (k - 1) // 2) for k in kernel]
    xp = np.pad(x, pads)
    return sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))


_BLOCK_BYTES = 2**20  # im2col buffer per GEMM; sized to stay cache-resident


def _block(rows: int) -> int:
    return max(128, _BLOCK_BYTES // (8 * rows))


def _flat_layout(x: np.ndarray, kernel: tuple[int, ...]):
    """Zero-padded input laid out as (C, margin + n*prod(padded) + margin).

    Every kernel tap then reads a constant offset from the output position.
    """
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    pad = [(k - 1) // 2 for k in kernel]
    padded = tuple(s + 2 * p for s, p in zip(spatial, pad))
    strides = np.cumprod((1,) + padded[:0:-1])[::-1]
    offsets = [int(np.dot(np.array(tap) - pad, strides)) for tap in np.ndindex(*kernel)]
    margin = max(abs(o) for o in offsets)
    m = n * int(np.prod(padded))
    flat = np.zeros((c, m + 2 * margin))
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pad, spatial))
    flat[:, margin : margin + m].reshape((c, n) + padded)[crop] = x.swapaxes(0, 1)
    return flat, offsets, margin, m, padded, crop


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded correlation, im2col in cache-sized column blocks.

    The product is evaluated over the whole padded grid and the border is
    cropped afterwards.
    """
    c_in, c_out = x.shape[1], w.shape[0]
    flat, offsets, margin, m, padded, crop = _flat_layout(x, w.shape[2:])
    w2 = np.ascontiguousarray(np.moveaxis(w, 1, -1).reshape(c_out, -1))  # columns (tap, c_in)
    y = np.empty((c_out, m))
    block = _block(len(offsets) * c_in)
    cols = np.empty((len(offsets) * c_in, block))
    for s in range(0, m, block):
        e = min(m, s + block)
        for t, off in enumerate(offsets):
            cols[t * c_in : (t + 1) * c_in, : e - s] = flat[:, margin + s + off : margin + e + off]
        np.matmul(w2, cols[:, : e - s], out=y[:, s:e])
    y = y.reshape((c_out, x.shape[0]) + padded)[crop]
    return np.ascontiguousarray(y.swapaxes(0, 1))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1, same-padded cross-correlation over any number of axes."""
    nd = _check_conv(x, w, b)
    y = _conv(x, w) + b.reshape((1, -1) + (1,) * nd)
    return y, (x, w)


def _weight_grad(x: np.ndarray, dy: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    """dw[o, c, tap] = sum over samples and positions of dy[o] * x_shifted[c]."""
    c_in, c_out = x.shape[1], dy.shape[1]
    flat, offsets, margin, m, padded, crop = _flat_layout(x, kernel)
    dflat = np.zeros((c_out, x.shape[0]) + padded)
    dflat[crop] = dy.swapaxes(0, 1)
    dflat = dflat.reshape(c_out, m)
    dw2 = np.zeros((c_out, len(offsets) * c_in))
    block = _block(len(offsets) * c_in)
    cols = np.empty((len(offsets) * c_in, block))
    for s in range(0, m, block):
        e = min(m, s + block)
        for t, off in enumerate(offsets):
            cols[t * c_in : (t + 1) * c_in, : e - s] = flat[:, margin + s + off : margin + e + off]
        dw2 += dflat[:, s:e] @ cols[:, : e - s].T
    return np.moveaxis(dw2.reshape((c_out,) + tuple(kernel) + (c_in,)), -1, 1)


def conv_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, w = cache
    nd = w.ndim - 2
    spatial = tuple(range(2, 2 + nd))
    db = dy.sum(axis=(0, *spatial))
    dw = _weight_grad(x, dy, w.shape[2:])
    # same padding + odd kernel: input gradient is a correlation with the
    # spatially flipped, channel-transposed kernel
    w_t = np.flip(w, axis=spatial).swapaxes(0, 1)
    dx = _conv(dy, np.ascontiguousarray(w_t))
    return dx, {"w": dw, "b": db}


def conv1d(x, w, b):
    """x: (n, C_in, L), w: (C_out, C_in, k)."""
    if w.ndim != 3:
        raise ShapeError("conv1d expects a 3-d weight tensor")
    return conv_forward(x, w, b)


def conv2d(x, w, b):
    if w.ndim != 4:
        raise ShapeError("conv2d expects a 4-d weight tensor")
    return conv_forward(x, w, b)


def conv3d(x, w, b):
    """x: (n, C_in, B, p, p), w: (C_out, C_in, kb, kh, kw)."""
    if w.ndim != 5:
        raise ShapeError("conv3d expects a 5-d weight tensor")
    return conv_forward(x, w, b)


# ---------------------------------------------------------------- elementwise


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(mask, dy, 0.0)


def residual_fuse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"residual_fuse shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- attention


def channel_attention(x: np.ndarray, w1: np.ndarray, w2: np.ndarray):
    """Squeeze-excitation gate over axis 1.

    g = sigmoid(w2 @ relu(w1 @ mean_spatial(x))), y[c, ...] = g[c] * x[c, ...].
    w1 is (C/r, C), w2 is (C, C/r).
    """
    if x.ndim < 2:
        raise ShapeError("channel_attention expects (n, C, ...)")
    c = x.shape[1]
    if w1.ndim != 2 or w1.shape[1] != c or w2.shape != (c, w1.shape[0]):
        raise ShapeError(f"attention weights {w1.shape}/{w2.shape} do not fit {c} channels")
    spatial = tuple(range(2, x.ndim))
    z = x.mean(axis=spatial) if spatial else x.copy()
    h = z @ w1.T
    a = np.maximum(h, 0.0)
    g = sigmoid(a @ w2.T)
    gb = g.reshape(g.shape + (1,) * len(spatial))
    return gb * x, (x, z, h, a, g, w1, w2)


def channel_attention_backward(dy: np.ndarray, cache):
    x, z, h, a, g, w1, w2 = cache
    spatial = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:])) if spatial else 1
    gb = g.reshape(g.shape + (1,) * len(spatial))
    dg = (dy * x).sum(axis=spatial) if spatial else dy * x
    du = dg * g * (1.0 - g)
    dw2 = du.T @ a
    da = du @ w2
    dh = np.where(h > 0, da, 0.0)
    dw1 = dh.T @ z
    dz = dh @ w1
    dx = gb * dy + dz.reshape(dz.shape + (1,) * len(spatial)) / count
    return dx, {"w1": dw1, "w2": dw2}


def spatial_attention(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Mean/max-pool-then-conv gate shared across channels and bands.

    x is (n, C, B, p, p); w is (1, 2, kh, kw). The 2-channel map
    [mean_c x; max_c x] is convolved per band, averaged over bands and
    squashed, giving one (p, p) gate per sample.
    """
    if x.ndim != 5:
        raise ShapeError(f"spatial_attention expects (n, C, B, p, p), got {x.shape}")
    if w.ndim != 4 or w.shape[:2] != (1, 2):
        raise ShapeError(f"spatial gate kernel must be (1, 2, kh, kw), got {w.shape}")
    n, c, nb, ph, pw = x.shape
    arg = x.argmax(axis=1)
    q = np.stack([x.mean(axis=1), np.take_along_axis(x, arg[:, None], axis=1)[:, 0]], axis=1)
    q2 = q.transpose(0, 2, 1, 3, 4).reshape(n * nb, 2, ph, pw)
    v, conv_cache = conv2d(q2, w, b)
    v = v.reshape(n, nb, ph, pw).mean(axis=1)
    m = sigmoid(v)
    return m[:, None, None] * x, (x, arg, m, conv_cache)


def spatial_attention_backward(dy: np.ndarray, cache):
    x, arg, m, conv_cache = cache
    n, c, nb, ph, pw = x.shape
    dm = (dy * x).sum(axis=(1, 2))
    dv = dm * m * (1.0 - m)
    dconv = np.broadcast_to((dv / nb)[:, None, None], (n, nb, 1, ph, pw)).reshape(n * nb, 1, ph, pw)
    dq2, g = conv_backward(np.ascontiguousarray(dconv), conv_cache)
    dq = dq2.reshape(n, nb, 2, ph, pw).transpose(0, 2, 1, 3, 4)
    dx = m[:, None, None] * dy + dq[:, 0][:, None] / c
    np.put_along_axis(
        dx, arg[:, None], np.take_along_axis(dx, arg[:, None], axis=1) + dq[:, 1][:, None], axis=1
    )
    return dx, g


# ---------------------------------------------------------------- head and loss


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (n, d), w: (out, d)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear shapes do not match: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    return dy @ w, {"w": dy.T @ x, "b": dy.sum(axis=0)}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy for 1-based labels in [1, C].

    Returns (loss, probabilities, dlogits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.min() < 1 or labels.max() > c:
        raise ValueError(f"labels must lie in [1, {c}]")
    idx = labels.astype(np.int64) - 1
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), idx] - log_norm
    loss = float(-log_p.mean())
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), idx] -= 1.0
    return loss, probs, dlogits / n


# ---------------------------------------------------------------- verification


def grad_check(
    fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    inputs: dict[str, np.ndarray],
    eps: float = 1e-5,
    skip_kinks: bool = True,
    kink_tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    value_fn: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input dict to ``(scalar, grads)``. Error per coordinate is
    |analytic - numeric| / max(1, |numeric|). With ``skip_kinks`` a coordinate
    whose one-sided differences disagree (a relu or max switch inside the
    stencil) is left out. ``max_coords`` checks a seeded random subset of
    each input's coordinates instead of all of them. ``value_fn``, if given,
    is a forward-only scalar used for the perturbed evaluations.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    f0, analytic = fn(inputs)
    value = value_fn or (lambda i: fn(i)[0])
    worst = 0.0
    for name, arr in inputs.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value(inputs)
            flat[i] = orig - eps
            fm = value(inputs)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            if skip_kinks:
                right = (fp - f0) / eps
                left = (f0 - fm) / eps
                if abs(right - left) > kink_tol * max(1.0, abs(num)):
                    continue
            err = abs(ga[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
