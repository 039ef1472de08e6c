"""Dense NCHW arrays and the primitive ops every layer is built from.

Tensors are plain float64 ``numpy.ndarray`` objects of rank 4, laid out as
(batch, channel, row, col). All functions here are pure: they never modify
their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD_MODES = ("circular", "zero")


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def as_tensor4(x, dtype=np.float64) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {a.shape}")
    return a


@dataclass(frozen=True)
class ConvSpec:
    kernel: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    pad_mode: str = "circular"

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 4 or min(k.shape) < 1:
            raise ShapeError(f"kernel must be (out_c, in_c, kh, kw), got {k.shape}")
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if b.shape[0] != k.shape[0]:
            raise ShapeError("bias length must equal out_c")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"unknown pad mode {self.pad_mode!r}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def out_c(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_c(self) -> int:
        return self.kernel.shape[1]


@dataclass(frozen=True)
class ShiftSpec:
    sx: int  # rows
    sy: int  # cols
    mode: str = "circular"

    def __post_init__(self):
        if self.mode not in ("circular", "common"):
            raise ValueError(f"unknown shift mode {self.mode!r}")


def _same_pads(kh: int, kw: int) -> tuple[int, int, int, int]:
    # (top, bottom, left, right); odd kernels are centred, even ones lean right
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return top, kh - 1 - top, left, kw - 1 - left


def pad(x: np.ndarray, amounts, mode: str = "circular") -> np.ndarray:
    """Pad the two spatial axes.

    ``amounts`` is either one int for all four sides or (top, bottom, left, right).
    """
    x = as_tensor4(x)
    if isinstance(amounts, (int, np.integer)):
        amounts = (amounts,) * 4
    top, bottom, left, right = (int(a) for a in amounts)
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad amounts must be non-negative")
    h, w = x.shape[2:]
    widths = ((0, 0), (0, 0), (top, bottom), (left, right))
    if mode == "circular":
        if max(top, bottom) > h or max(left, right) > w:
            raise ValueError(f"circular pad {amounts} exceeds spatial size {(h, w)}")
        return np.pad(x, widths, mode="wrap")
    if mode == "zero":
        return np.pad(x, widths, mode="constant")
    raise ValueError(f"unknown pad mode {mode!r}")


def _correlate(xp: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of an already padded input.

    Columns are gathered in (in-channel, kernel-row, kernel-col) order and
    contracted in one batched matmul.
    """
    o, c, kh, kw = kernel.shape
    b, _, H, W = xp.shape
    h, w = H - kh + 1, W - kw + 1
    cols = np.empty((b, c, kh * kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + h, j:j + w]
    out = np.matmul(kernel.reshape(o, c * kh * kw), cols.reshape(b, c * kh * kw, h * w))
    return out.reshape(b, o, h, w)


def _columns_grad(xp, grad_out, kh, kw):
    b, c, H, W = xp.shape
    o, h, w = grad_out.shape[1:]
    cols = np.empty((b, c, kh * kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + h, j:j + w]
    g = grad_out.reshape(b, o, h * w)
    gk = np.matmul(g, cols.reshape(b, c * kh * kw, h * w).transpose(0, 2, 1)).sum(axis=0)
    return gk.reshape(o, c, kh, kw)


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Same-size 2-D cross-correlation followed by striding.

    Each output pixel is the same fixed-order contraction over (in-channel,
    kernel-row, kernel-col), so results are bit-reproducible across runs.
    """
    x = as_tensor4(x)
    b, c, h, w = x.shape
    if c != spec.in_c:
        raise ShapeError(f"input has {c} channels, kernel expects {spec.in_c}")
    s = spec.stride
    if spec.pad_mode == "zero" and (h % s or w % s):
        raise ShapeError(f"stride {s} does not divide spatial size {(h, w)}")
    _, _, kh, kw = spec.kernel.shape
    amounts = _same_pads(kh, kw)
    if spec.pad_mode == "circular" and (max(amounts[:2]) > h or max(amounts[2:]) > w):
        raise ShapeError(f"kernel {(kh, kw)} does not fit circular input {(h, w)}")
    out = _correlate(pad(x, amounts, spec.pad_mode), spec.kernel)
    out += spec.bias[None, :, None, None]
    if s > 1:
        out = np.ascontiguousarray(out[:, :, ::s, ::s])
    return out


def conv2d_backward(x: np.ndarray, spec: ConvSpec, grad_out: np.ndarray):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    x = as_tensor4(x)
    b, c, h, w = x.shape
    _, _, kh, kw = spec.kernel.shape
    if spec.stride > 1:
        g = np.zeros((b, spec.out_c, h, w))
        g[:, :, ::spec.stride, ::spec.stride] = grad_out
        grad_out = g
    top, bottom, left, right = _same_pads(kh, kw)
    xp = pad(x, (top, bottom, left, right), spec.pad_mode)
    gk = _columns_grad(xp, grad_out, kh, kw)
    # input gradient: correlate with the flipped, transposed kernel
    flipped = np.ascontiguousarray(spec.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gp = pad(grad_out, (bottom, top, right, left), spec.pad_mode)
    gx = _correlate(gp, flipped)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gk, gb


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-(batch, channel) spatial mean, shape (b, c)."""
    return as_tensor4(x).mean(axis=(2, 3))


def shift2d(x: np.ndarray, shift: ShiftSpec, fill: float = 0.0) -> np.ndarray:
    """Translate by ``sx`` rows and ``sy`` cols: ``out[r, c] = in[r - sx, c - sy]``."""
    x = as_tensor4(x)
    h, w = x.shape[2:]
    sx, sy = int(shift.sx), int(shift.sy)
    if shift.mode == "circular":
        return np.roll(x, (sx, sy), axis=(2, 3))
    if abs(sx) >= h or abs(sy) >= w:
        raise ValueError(f"common shift {(sx, sy)} out of range for size {(h, w)}")
    out = np.full_like(x, fill)
    src_r = slice(max(0, -sx), h - max(0, sx))
    dst_r = slice(max(0, sx), h - max(0, -sx))
    src_c = slice(max(0, -sy), w - max(0, sy))
    dst_c = slice(max(0, sy), w - max(0, -sy))
    out[:, :, dst_r, dst_c] = x[:, :, src_r, src_c]
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch can overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, kind: str, grad_out: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return grad_out * s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")
