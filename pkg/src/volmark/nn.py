"""Volumetric building blocks on channels-last tensors.

Spatial tensors are laid out ``(H, W, D, C)`` or, batched, ``(B, H, W, D, C)``.
Convolutions, layer norm, linear maps and upsampling are single tape entries
with hand-written vector-Jacobian products; looping over 27 kernel taps with a
matmul per tap is far cheaper in numpy than composing the op set per voxel.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, gelu, make_op, reshape

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or 3 ints, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvParams:
    """Kernel ``(kh, kw, kd, Cin, Cout)`` for dense convs, ``(kh, kw, kd, C)`` for depthwise."""

    weight: Tensor
    bias: Tensor | None = None
    stride: Triple = (1, 1, 1)
    padding: Triple | None = None  # None: "same" padding (k // 2)

    @property
    def kernel(self) -> Triple:
        return tuple(self.weight.shape[:3])

    @property
    def pad(self) -> Triple:
        if self.padding is None:
            return tuple(k // 2 for k in self.kernel)
        return _triple(self.padding)


@dataclass(frozen=True)
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("layer norm epsilon must be positive")


@dataclass(frozen=True)
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def hidden_ratio(self) -> float:
        return self.w1.shape[1] / self.w1.shape[0]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 5:
        return x, False
    if x.ndim == 4:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected (H, W, D, C) or (B, H, W, D, C), got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _windows(kernel: Triple, stride: Triple, out: Triple):
    for a, b, c in itertools.product(*(range(k) for k in kernel)):
        yield (a, b, c), (slice(None),
                          slice(a, a + stride[0] * (out[0] - 1) + 1, stride[0]),
                          slice(b, b + stride[1] * (out[1] - 1) + 1, stride[1]),
                          slice(c, c + stride[2] * (out[2] - 1) + 1, stride[2]))


def _conv_geometry(op: str, spatial: Sequence[int], kernel: Triple, stride: Triple, pad: Triple) -> Triple:
    if any(s < 1 for s in stride):
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    padded = [n + 2 * p for n, p in zip(spatial, pad)]
    if any(k > n for k, n in zip(kernel, padded)):
        raise ShapeError(f"{op}: kernel {kernel} larger than padded input {tuple(padded)}")
    return tuple((n - k) // s + 1 for n, k, s in zip(padded, kernel, stride))


def _pad_spatial(a: np.ndarray, pad: Triple) -> np.ndarray:
    if not any(pad):
        return a
    return np.pad(a, ((0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2, (0, 0)))


def _crop_spatial(a: np.ndarray, pad: Triple, spatial: Sequence[int]) -> np.ndarray:
    return a[:, pad[0]:pad[0] + spatial[0], pad[1]:pad[1] + spatial[1], pad[2]:pad[2] + spatial[2]]


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Map the last axis through ``w`` (``Cin x Cout``) plus optional bias."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op("linear", out.reshape(lead + (wd.shape[1],)), inputs, vjp)


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero padding; output extent ``(n + 2*pad - k) // stride + 1``."""
    x5, squeeze = _batched(x)
    w = p.weight
    if w.ndim != 5:
        raise ShapeError(f"conv3d: weight must be (kh, kw, kd, Cin, Cout), got {w.shape}")
    kernel, stride, pad = p.kernel, _triple(p.stride), p.pad
    bsz, *spatial, cin = x5.shape
    if cin != w.shape[3]:
        raise ShapeError(f"conv3d: input has {cin} channels, kernel expects {w.shape[3]}")
    out_sp = _conv_geometry("conv3d", spatial, kernel, stride, pad)
    cout = w.shape[4]
    if kernel == (1, 1, 1) and stride == (1, 1, 1) and pad == (0, 0, 0):
        return _unbatch(linear(x5, reshape(w, (cin, cout)), p.bias), squeeze)

    xp = _pad_spatial(x5.data, pad)
    wd = w.data
    rows = bsz * out_sp[0] * out_sp[1] * out_sp[2]
    out = np.zeros((rows, cout), dtype=x5.dtype)
    for (a, b, c), win in _windows(kernel, stride, out_sp):
        out += xp[win].reshape(rows, cin) @ wd[a, b, c]
    if p.bias is not None:
        out += p.bias.data
    inputs = (x5, w) if p.bias is None else (x5, w, p.bias)

    def vjp(g):
        g2 = g.reshape(rows, cout)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp) if x5.requires_grad else None
        for (a, b, c), win in _windows(kernel, stride, out_sp):
            if w.requires_grad:
                gw[a, b, c] = xp[win].reshape(rows, cin).T @ g2
            if gxp is not None:
                gxp[win] += (g2 @ wd[a, b, c].T).reshape(gxp[win].shape)
        gx = _crop_spatial(gxp, pad, spatial) if gxp is not None else None
        if p.bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    y = make_op("conv3d", out.reshape((bsz,) + out_sp + (cout,)), inputs, vjp)
    return _unbatch(y, squeeze)


def dwconv3d(x: Tensor, p: ConvParams) -> Tensor:
    """Depthwise convolution: one spatial kernel per channel, channels preserved."""
    x5, squeeze = _batched(x)
    w = p.weight
    if w.ndim != 4:
        raise ShapeError(f"dwconv3d: weight must be (kh, kw, kd, C), got {w.shape}")
    kernel, stride, pad = p.kernel, _triple(p.stride), p.pad
    bsz, *spatial, ch = x5.shape
    if ch != w.shape[3]:
        raise ShapeError(f"dwconv3d: input has {ch} channels, kernel has {w.shape[3]}")
    out_sp = _conv_geometry("dwconv3d", spatial, kernel, stride, pad)
    xp = _pad_spatial(x5.data, pad)
    wd = w.data
    out = np.zeros((bsz,) + out_sp + (ch,), dtype=x5.dtype)
    for (a, b, c), win in _windows(kernel, stride, out_sp):
        out += xp[win] * wd[a, b, c]
    if p.bias is not None:
        out += p.bias.data
    inputs = (x5, w) if p.bias is None else (x5, w, p.bias)

    def vjp(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp) if x5.requires_grad else None
        for (a, b, c), win in _windows(kernel, stride, out_sp):
            if w.requires_grad:
                gw[a, b, c] = (xp[win] * g).sum(axis=(0, 1, 2, 3))
            if gxp is not None:
                gxp[win] += g * wd[a, b, c]
        gx = _crop_spatial(gxp, pad, spatial) if gxp is not None else None
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2, 3))

    return _unbatch(make_op("dwconv3d", out, inputs, vjp), squeeze)


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    """Normalize each position over the channel (last) axis, then scale and shift."""
    c = x.shape[-1]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ShapeError(f"layer_norm: params {p.gamma.shape}/{p.beta.shape} for {c} channels")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + p.eps)
    xhat = centered * inv
    gamma = p.gamma.data
    out = xhat * gamma + p.beta.data
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = g * gamma
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_op("layer_norm", out, (x, p.gamma, p.beta), vjp)


def mlp_block(x: Tensor, p: MlpParams) -> Tensor:
    """Pointwise ``C -> ratio*C -> C`` with GELU in between."""
    return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def _along(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, a, axes=(1, axis)), 0, axis)


def trilinear_upsample(x: Tensor, factor=2) -> Tensor:
    """Upsample the three spatial axes by integer ``factor`` (align-corners)."""
    x5, squeeze = _batched(x)
    f = _triple(factor)
    if any(v < 2 for v in f):
        raise ValueError(f"trilinear_upsample: factor must be >= 2, got {f}")
    mats = [interp_matrix(n, n * k, x5.dtype) for n, k in zip(x5.shape[1:4], f)]
    out = x5.data
    for axis, m in zip((1, 2, 3), mats):
        out = _along(out, m, axis)

    def vjp(g):
        for axis, m in zip((1, 2, 3), mats):
            g = _along(g, m.T, axis)
        return (g,)

    return _unbatch(make_op("trilinear_upsample", out, (x5,), vjp), squeeze)
