"""Dense (n, c, h, w) spatial primitives with explicit forward and backward passes.

Every function takes and returns plain numpy arrays laid out as
(batch, channel, row, col). The dtype of the input is preserved, so the same
code runs in float32 for training and float64 for gradient verification.

Convolutions are lowered to a single GEMM via an im2col view. Large batches are
split into fixed-size chunks that are processed in order, so the reduction
order (and hence every bit of the result) never depends on the batch size
chosen by the caller.

When PyTorch is importable the three convolution kernels (forward, weight
gradient, input gradient) are delegated to its CPU implementation, which is
several times faster on small channel counts. Select explicitly with
``set_backend("numpy" | "torch")`` or the ``SPIKESEG_CONV_BACKEND`` variable.
Everything else, including transposed convolution, is built on those three.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import os

import numpy as np

from .errors import ConfigurationError, DimensionError

# Cap on im2col elements materialised at once (64 MiB of float32).
_COL_BUDGET = 1 << 24

BACKENDS = ("numpy", "torch")
_backend: str | None = None


def _torch():
    try:
        import torch
    except ImportError:  # pragma: no cover - depends on environment
        return None
    return torch


def set_backend(name: str) -> None:
    """Choose the convolution backend: ``numpy``, ``torch`` or ``auto``."""
    global _backend
    if name == "auto":
        _backend = "torch" if _torch() is not None else "numpy"
        return
    if name not in BACKENDS:
        raise ConfigurationError(f"unknown conv backend {name!r}; expected one of {BACKENDS} or 'auto'")
    if name == "torch" and _torch() is None:
        raise ConfigurationError("torch backend requested but torch is not installed")
    _backend = name


def get_backend() -> str:
    if _backend is None:
        set_backend(os.environ.get("SPIKESEG_CONV_BACKEND", "auto"))
    return _backend


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel < 1:
            raise ConfigurationError(f"kernel must be >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ConfigurationError(
                f"invalid stride/dilation/padding: {self.stride}/{self.dilation}/{self.padding}"
            )

    @property
    def span(self) -> int:
        """Extent of the dilated kernel footprint."""
        return self.dilation * (self.kernel - 1) + 1

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.span) // self.stride + 1
        if out < 1:
            raise ConfigurationError(f"{self} produces empty output for input size {size}")
        return out

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that keeps the spatial size of a stride-1 convolution."""
    return dilation * (kernel - 1) // 2


def check_tensor4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"{what} has an empty axis: {x.shape}")


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> None:
    check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if w.shape != spec.weight_shape:
        raise DimensionError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")


def _chunks(n: int, per_item: int):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _channels_first(x: np.ndarray, p: int) -> np.ndarray:
    """(n, c, h, w) -> padded (c, n, h + 2p, w + 2p)."""
    xc = x.transpose(1, 0, 2, 3)
    if p:
        return np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
    return xc


def _taps(spec: ConvSpec, oh: int, ow: int):
    k, s, r = spec.kernel, spec.stride, spec.dilation
    for i in range(k):
        for j in range(k):
            yield i, j, slice(i * r, i * r + s * (oh - 1) + 1, s), slice(j * r, j * r + s * (ow - 1) + 1, s)


def _columns(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """im2col on a channels-first padded input: (c*k*k, n*oh*ow)."""
    c, n = xp.shape[:2]
    k = spec.kernel
    if k == 1 and spec.stride == 1:
        return np.ascontiguousarray(xp).reshape(c, n * oh * ow)
    cols = np.empty((c, k, k, n, oh, ow), dtype=xp.dtype)
    for i, j, si, sj in _taps(spec, oh, ow):
        cols[:, i, j] = xp[:, :, si, sj]
    return cols.reshape(c * k * k, n * oh * ow)


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, spec: ConvSpec, bias: np.ndarray | None = None
) -> np.ndarray:
    """Dilated cross-correlation of ``x`` with ``w`` (shape ``spec.weight_shape``)."""
    _check_conv(x, w, spec)
    n, _, h, wd = x.shape
    oh, ow = spec.output_size(h), spec.output_size(wd)
    if get_backend() == "torch":
        out = _torch_conv(x, w, spec)
        if bias is not None:
            out += bias.reshape(1, -1, 1, 1).astype(out.dtype, copy=False)
        return out
    w2 = w.reshape(spec.out_channels, -1)
    xp = _channels_first(x, spec.padding)
    out = np.empty((spec.out_channels, n, oh, ow), dtype=np.result_type(x, w))
    for sl in _chunks(n, oh * ow * w2.shape[1]):
        cols = _columns(xp[:, sl], spec, oh, ow)
        out[:, sl] = (w2 @ cols).reshape(spec.out_channels, -1, oh, ow)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1).astype(out.dtype, copy=False)
    return out


def conv2d_grad_weight(x: np.ndarray, grad_out: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, _, h, wd = x.shape
    oh, ow = spec.output_size(h), spec.output_size(wd)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, spec.out_channels, oh, ow)}")
    if get_backend() == "torch":
        return _torch_grad_weight(x, grad_out, spec)
    xp = _channels_first(x, spec.padding)
    gc = grad_out.transpose(1, 0, 2, 3)
    gw = np.zeros((spec.out_channels, spec.in_channels * spec.kernel**2), dtype=np.result_type(x, grad_out))
    for sl in _chunks(n, oh * ow * gw.shape[1]):
        cols = _columns(xp[:, sl], spec, oh, ow)
        gw += np.ascontiguousarray(gc[:, sl]).reshape(spec.out_channels, -1) @ cols.T
    return gw.reshape(spec.weight_shape)


def conv2d_grad_input(
    w: np.ndarray, grad_out: np.ndarray, spec: ConvSpec, input_hw: tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` with respect to its input (col2im)."""
    h, wd = input_hw
    oh, ow = spec.output_size(h), spec.output_size(wd)
    n = grad_out.shape[0]
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, spec.out_channels, oh, ow)}")
    if get_backend() == "torch":
        return _torch_grad_input(w, grad_out, spec, (h, wd))
    k, p, c = spec.kernel, spec.padding, spec.in_channels
    w2 = w.reshape(spec.out_channels, -1)
    gc = grad_out.transpose(1, 0, 2, 3)
    gx = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=np.result_type(w, grad_out))
    for sl in _chunks(n, oh * ow * w2.shape[1]):
        gcols = w2.T @ np.ascontiguousarray(gc[:, sl]).reshape(spec.out_channels, -1)
        gcols = gcols.reshape(c, k, k, -1, oh, ow)
        target = gx[:, sl]
        for i, j, si, sj in _taps(spec, oh, ow):
            target[:, :, si, sj] += gcols[:, i, j]
    if p:
        gx = gx[:, :, p:-p, p:-p]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))


def _common(*arrays):
    dt = np.result_type(*arrays)
    torch = _torch()
    return torch, dt, [torch.from_numpy(np.ascontiguousarray(a, dtype=dt)) for a in arrays]


def _conv_kw(spec: ConvSpec) -> dict:
    return dict(stride=spec.stride, padding=spec.padding, dilation=spec.dilation)


def _torch_conv(x, w, spec):
    torch, _, (tx, tw) = _common(x, w)
    with torch.no_grad():
        return torch.nn.functional.conv2d(tx, tw, **_conv_kw(spec)).numpy()


def _torch_grad_weight(x, g, spec):
    torch, _, (tx, tg) = _common(x, g)
    with torch.no_grad():
        return torch.nn.grad.conv2d_weight(tx, spec.weight_shape, tg, **_conv_kw(spec)).numpy()


def _torch_grad_input(w, g, spec, input_hw):
    torch, _, (tw, tg) = _common(w, g)
    shape = (g.shape[0], spec.in_channels, *input_hw)
    with torch.no_grad():
        return torch.nn.grad.conv2d_input(shape, tw, tg, **_conv_kw(spec)).numpy()


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weights)`` for :func:`conv2d_forward`."""
    _check_conv(x, w, spec)
    gx = conv2d_grad_input(w, grad_out, spec, x.shape[2:])
    gw = conv2d_grad_weight(x, grad_out, spec)
    return gx, gw


# -- transposed convolution ----------------------------------------------------
#
# A transposed convolution with spec (k, C_in -> C_out, s, p) is the input-adjoint
# of an ordinary convolution C_out -> C_in. Its weights therefore have shape
# (C_in, C_out, k, k), matching that underlying convolution's layout.


def _adjoint_spec(spec: ConvSpec) -> ConvSpec:
    return ConvSpec(
        kernel=spec.kernel,
        in_channels=spec.out_channels,
        out_channels=spec.in_channels,
        stride=spec.stride,
        padding=spec.padding,
        dilation=spec.dilation,
    )


def transpose_output_size(spec: ConvSpec, size: int) -> int:
    return (size - 1) * spec.stride - 2 * spec.padding + spec.dilation * (spec.kernel - 1) + 1


def upsample_spec(in_channels: int, out_channels: int) -> ConvSpec:
    """Exact 2x transposed convolution: k=4, s=2, p=1."""
    return ConvSpec(kernel=4, in_channels=in_channels, out_channels=out_channels, stride=2, padding=1)


def _check_transpose(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    expected = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    if w.shape != expected:
        raise DimensionError(f"transpose weight shape {w.shape} != {expected}")
    h, wd = x.shape[2:]
    oh, ow = transpose_output_size(spec, h), transpose_output_size(spec, wd)
    if (oh, ow) != (2 * h, 2 * wd):
        raise ConfigurationError(f"{spec} does not double spatial size ({h}x{wd} -> {oh}x{ow})")
    return oh, ow


def transpose_conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    oh, ow = _check_transpose(x, w, spec)
    return conv2d_grad_input(w, x, _adjoint_spec(spec), (oh, ow))


def transpose_conv_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray]:
    oh, ow = _check_transpose(x, w, spec)
    if grad_out.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match transpose output")
    adj = _adjoint_spec(spec)
    gx = conv2d_forward(grad_out, w, adj)
    gw = conv2d_grad_weight(grad_out, x, adj)
    return gx, gw


# -- pooling and interpolation ---------------------------------------------------


def avg_pool2(x: np.ndarray) -> np.ndarray:
    check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad_out: np.ndarray) -> np.ndarray:
    g = grad_out * grad_out.dtype.type(0.25)
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        frac = pos - lo
        a[np.arange(n_out), lo] = 1.0 - frac
        a[np.arange(n_out), lo + 1] += frac
    a = a.astype(dtype_name)
    a.setflags(write=False)
    return a


def _check_upsample(x: np.ndarray, out_h: int, out_w: int) -> None:
    check_tensor4(x)
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ConfigurationError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_upsample(x, out_h, out_w)
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ah = _interp_matrix(h, out_h, x.dtype.name)
    aw = _interp_matrix(w, out_w, x.dtype.name)
    return ah @ x @ aw.T


def bilinear_upsample_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = grad_out.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    ah = _interp_matrix(in_h, out_h, grad_out.dtype.name)
    aw = _interp_matrix(in_w, out_w, grad_out.dtype.name)
    return ah.T @ grad_out @ aw
