"""Polyphase down/upsampling layers and the baseline samplers.

The CAPD layer splits a feature map into its four polyphase components,
scores them through a shared feature extractor, a cropped average pool and
a small circular 1-D attention convolution, and fuses them with a
temperature softmax. CAPU puts the result back on the grid of the winning
component. Component order is always (0,0), (0,1), (1,0), (1,1), which is
also the binary code of the component index.

Each forward op that takes part in training has a matching ``*_backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    activation,
    activation_backward,
    as_tensor4,
    conv2d,
    conv2d_backward,
    sigmoid,
)

COMPONENT_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))

LPF_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass(frozen=True)
class CapsConfig:
    beta: float = 0.25
    temperature: float = 1e-3
    k: int = 2
    use_aw: bool = True
    use_ca: bool = True
    use_lpf: bool = True
    select_mode: str = "soft"

    def __post_init__(self):
        if not 0.0 <= self.beta < 0.5:
            raise ValueError(f"beta must lie in [0, 0.5), got {self.beta}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 1 <= self.k <= 4:
            raise ValueError(f"attention kernel size must be in 1..4, got {self.k}")
        if self.select_mode not in ("soft", "hard"):
            raise ValueError(f"select_mode must be 'soft' or 'hard', got {self.select_mode!r}")


@dataclass
class PolyComponents:
    comps: tuple  # four (b, c, h/2, w/2) arrays in COMPONENT_ORDER

    def __getitem__(self, ij):
        if isinstance(ij, tuple):
            ij = 2 * ij[0] + ij[1]
        return self.comps[ij]

    def stacked(self) -> np.ndarray:
        """All four components as one (4, b, c, h/2, w/2) array."""
        return np.stack(self.comps)

    def reassemble(self) -> np.ndarray:
        return polyphase_merge(self.stacked())


@dataclass
class CapdParams:
    """Shared feature extractor (3x3, 3x3, 1x1 -> 1 channel) and the attention kernel."""

    convs: list  # three ConvSpec
    h_kernel: np.ndarray

    @classmethod
    def init(cls, in_c: int, rng: np.random.Generator, widths=(128, 64), k: int = 2):
        convs = []
        shapes = [(widths[0], in_c, 3, 3), (widths[1], widths[0], 3, 3), (1, widths[1], 1, 1)]
        for shape in shapes:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            convs.append(ConvSpec(rng.uniform(-bound, bound, size=shape), np.zeros(shape[0])))
        bound = np.sqrt(6.0 / k)
        return cls(convs, rng.uniform(-bound, bound, size=k))


@dataclass
class DownResult:
    d: np.ndarray
    gamma: np.ndarray  # (b,) int in 0..3
    weights: np.ndarray  # (b, 4)
    cache: dict = field(default_factory=dict, repr=False)


def _check_even(f: np.ndarray):
    h, w = f.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"spatial size must be even, got {(h, w)}")


def polyphase_split(f: np.ndarray) -> PolyComponents:
    f = as_tensor4(f)
    _check_even(f)
    return PolyComponents(tuple(f[:, :, i::2, j::2].copy() for i, j in COMPONENT_ORDER))


def polyphase_merge(stack: np.ndarray) -> np.ndarray:
    """Inverse of :func:`polyphase_split` (and its adjoint) for a (4, b, c, h2, w2) stack."""
    _, b, c, h2, w2 = stack.shape
    out = np.empty((b, c, 2 * h2, 2 * w2), dtype=stack.dtype)
    for idx, (i, j) in enumerate(COMPONENT_ORDER):
        out[:, :, i::2, j::2] = stack[idx]
    return out


def _feature_chain(x: np.ndarray, params: CapdParams):
    a1 = conv2d(x, params.convs[0])
    h1 = activation(a1, "relu")
    a2 = conv2d(h1, params.convs[1])
    h2 = activation(a2, "relu")
    p = conv2d(h2, params.convs[2])
    return p, (x, a1, h1, a2, h2)


def extract_features(comps: PolyComponents, params: CapdParams) -> list:
    """Run the shared extractor on every component; returns four (b, 1, h/2, w/2) maps."""
    stack = comps.stacked()
    n, b = stack.shape[:2]
    p, _ = _feature_chain(stack.reshape((n * b,) + stack.shape[2:]), params)
    return list(p.reshape((n, b) + p.shape[1:]))


def window_bounds(h2: int, w2: int, beta: float) -> tuple[int, int]:
    hs = int(h2 * beta * 0.5)
    ws = int(w2 * beta * 0.5)
    if h2 - 2 * hs < 1 or w2 - 2 * ws < 1:
        raise RuntimeError(f"empty pooling window for size {(h2, w2)} and beta {beta}")
    return hs, ws


def adaptive_window(p, beta: float) -> np.ndarray:
    """Mean of each component feature map after cropping a ``beta`` border; shape (b, 4)."""
    p = np.stack(list(p))  # (4, b, c, h2, w2)
    h2, w2 = p.shape[3:]
    hs, ws = window_bounds(h2, w2, beta)
    win = p[:, :, :, hs:h2 - hs, ws:w2 - ws]
    return win.mean(axis=(2, 3, 4)).T.copy()


def adaptive_window_backward(grad_z: np.ndarray, shape, beta: float) -> np.ndarray:
    """Gradient of :func:`adaptive_window` as a (4, b, c, h2, w2) array."""
    _, b, c, h2, w2 = shape
    hs, ws = window_bounds(h2, w2, beta)
    count = c * (h2 - 2 * hs) * (w2 - 2 * ws)
    g = np.zeros(shape)
    g[:, :, :, hs:h2 - hs, ws:w2 - ws] = (grad_z.T / count)[:, :, None, None, None]
    return g


def component_attention(z: np.ndarray, h_kernel: np.ndarray) -> np.ndarray:
    """``rho_i = sigmoid(sum_t H[t] * z[(i + t) mod 4])``."""
    return sigmoid(_attention_pre(z, h_kernel))


def _attention_pre(z: np.ndarray, h_kernel: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    h_kernel = np.asarray(h_kernel, dtype=np.float64)
    if h_kernel.shape[0] > 4:
        raise ValueError("attention kernel longer than the component sequence")
    pre = np.zeros_like(z)
    for t, ht in enumerate(h_kernel):
        pre += ht * np.roll(z, -t, axis=1)
    return pre


def component_attention_backward(z, h_kernel, grad_rho):
    pre = _attention_pre(z, h_kernel)
    s = sigmoid(pre)
    gpre = grad_rho * s * (1.0 - s)
    gz = np.zeros_like(gpre)
    gh = np.empty(len(h_kernel))
    for t, ht in enumerate(h_kernel):
        gz += ht * np.roll(gpre, t, axis=1)
        gh[t] = np.sum(gpre * np.roll(z, -t, axis=1))
    return gz, gh


def t_softmax(rho: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
    e = np.exp((rho - rho.max(axis=1, keepdims=True)) / temperature)
    return e / e.sum(axis=1, keepdims=True)


def t_softmax_backward(w: np.ndarray, temperature: float, grad_w: np.ndarray) -> np.ndarray:
    return w * (grad_w - np.sum(w * grad_w, axis=1, keepdims=True)) / temperature


def lpf_apply(f: np.ndarray) -> np.ndarray:
    """Depthwise 3x3 binomial blur with circular padding."""
    f = as_tensor4(f)
    b, c, h, w = f.shape
    flat = f.reshape(b * c, 1, h, w)
    out = conv2d(flat, ConvSpec(LPF_KERNEL[None, None], np.zeros(1)))
    return out.reshape(f.shape)


def lpf_backward(f_shape, grad_out: np.ndarray) -> np.ndarray:
    b, c, h, w = f_shape
    spec = ConvSpec(LPF_KERNEL[None, None], np.zeros(1))
    gx, _, _ = conv2d_backward(np.zeros((b * c, 1, h, w)), spec,
                               grad_out.reshape(b * c, 1, h, w))
    return gx.reshape(f_shape)


def capd_forward(f: np.ndarray, params: CapdParams, cfg: CapsConfig) -> DownResult:
    f = as_tensor4(f)
    _check_even(f)
    src = lpf_apply(f) if cfg.use_lpf else f
    stack = polyphase_split(src).stacked()  # (4, b, c, h2, w2)
    n, b = stack.shape[:2]
    p, feat_cache = _feature_chain(stack.reshape((n * b,) + stack.shape[2:]), params)
    p = p.reshape((n, b) + p.shape[1:])
    beta = cfg.beta if cfg.use_aw else 0.0
    z = adaptive_window(p, beta)
    rho = component_attention(z, params.h_kernel) if cfg.use_ca else z
    w = t_softmax(rho, cfg.temperature)
    gamma = np.argmax(w, axis=1)
    if cfg.select_mode == "hard":
        d = stack[gamma, np.arange(b)].copy()
        w = np.zeros_like(w)
        w[np.arange(b), gamma] = 1.0
    else:
        d = np.einsum("nb,nbchw->bchw", w.T, stack)
    cache = dict(f_shape=f.shape, stack=stack, p_shape=p.shape, feat=feat_cache,
                 z=z, rho=rho, beta=beta)
    return DownResult(d, gamma, w, cache)


def capd_backward(res: DownResult, params: CapdParams, cfg: CapsConfig, grad_d: np.ndarray):
    """Returns (grad_f, [(grad_kernel, grad_bias) per conv], grad_h_kernel)."""
    if cfg.select_mode == "hard":
        raise RuntimeError("hard selection is inference-only; no gradient is defined")
    c = res.cache
    stack, w = c["stack"], res.weights
    n, b = stack.shape[:2]
    g_stack = w.T[:, :, None, None, None] * grad_d[None]
    g_w = np.einsum("bchw,nbchw->bn", grad_d, stack)
    g_rho = t_softmax_backward(w, cfg.temperature, g_w)
    if cfg.use_ca:
        g_z, g_h = component_attention_backward(c["z"], params.h_kernel, g_rho)
    else:
        g_z, g_h = g_rho, np.zeros_like(params.h_kernel)
    g_p = adaptive_window_backward(g_z, c["p_shape"], c["beta"])
    g_p = g_p.reshape((n * b,) + g_p.shape[2:])
    x, a1, h1, a2, h2 = c["feat"]
    g_h2, gk3, gb3 = conv2d_backward(h2, params.convs[2], g_p)
    g_a2 = activation_backward(a2, "relu", g_h2)
    g_h1, gk2, gb2 = conv2d_backward(h1, params.convs[1], g_a2)
    g_a1 = activation_backward(a1, "relu", g_h1)
    g_x, gk1, gb1 = conv2d_backward(x, params.convs[0], g_a1)
    g_stack = g_stack + g_x.reshape(stack.shape)
    g_src = polyphase_merge(g_stack)
    if cfg.use_lpf:
        g_src = lpf_backward(c["f_shape"], g_src)
    return g_src, [(gk1, gb1), (gk2, gb2), (gk3, gb3)], g_h


def phi_encode(gamma: int) -> tuple[int, int]:
    gamma = int(gamma)
    if gamma not in (0, 1, 2, 3):
        raise ValueError(f"component index must be in 0..3, got {gamma}")
    return gamma >> 1, gamma & 1


def zero_fill_up(d: np.ndarray, gamma) -> np.ndarray:
    """Place ``d`` on the (m, n) sub-grid of a 2x larger zero map, per batch element."""
    d = as_tensor4(d)
    b, c, h, w = d.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=int), (b,))
    out = np.zeros((b, c, 2 * h, 2 * w))
    for bi, g in enumerate(gamma):
        m, n = phi_encode(g)
        out[bi, :, m::2, n::2] = d[bi]
    return out


def zero_fill_up_backward(grad_out: np.ndarray, gamma) -> np.ndarray:
    b = grad_out.shape[0]
    gamma = np.broadcast_to(np.asarray(gamma, dtype=int), (b,))
    parts = []
    for bi, g in enumerate(gamma):
        m, n = phi_encode(g)
        parts.append(grad_out[bi, :, m::2, n::2])
    return np.stack(parts)


def capu_forward(d: np.ndarray, gamma, cfg: CapsConfig) -> np.ndarray:
    up = zero_fill_up(d, gamma)
    return lpf_apply(up) if cfg.use_lpf else up


def capu_backward(grad_out: np.ndarray, gamma, cfg: CapsConfig) -> np.ndarray:
    if cfg.use_lpf:
        grad_out = lpf_backward(grad_out.shape, grad_out)
    return zero_fill_up_backward(grad_out, gamma)


def maxpool_down(f: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2."""
    f = as_tensor4(f)
    _check_even(f)
    return polyphase_split(f).stacked().max(axis=0)


def maxpool_backward(f: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # ties go to the first maximal element in component order
    stack = polyphase_split(f).stacked()
    first = np.argmax(stack, axis=0)
    g = np.zeros_like(stack)
    for idx in range(4):
        g[idx] = np.where(first == idx, grad_out, 0.0)
    return polyphase_merge(g)


def _dense_max_parts(f: np.ndarray) -> np.ndarray:
    # 2x2 window anchored at each pixel, circular wrap
    return np.stack([np.roll(f, (-i, -j), axis=(2, 3)) for i, j in COMPONENT_ORDER])


def blurpool_down(f: np.ndarray) -> np.ndarray:
    """Dense (stride 1) max pool, binomial blur, then stride-2 subsampling."""
    f = as_tensor4(f)
    _check_even(f)
    dense = _dense_max_parts(f).max(axis=0)
    return lpf_apply(dense)[:, :, ::2, ::2].copy()


def blurpool_backward(f: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    parts = _dense_max_parts(f)
    first = np.argmax(parts, axis=0)
    g_blur = np.zeros(f.shape)
    g_blur[:, :, ::2, ::2] = grad_out
    g_dense = lpf_backward(f.shape, g_blur)
    g = np.zeros(f.shape)
    for idx, (i, j) in enumerate(COMPONENT_ORDER):
        g += np.roll(np.where(first == idx, g_dense, 0.0), (i, j), axis=(2, 3))
    return g


def aps_down(f: np.ndarray):
    """Keep the polyphase component with the largest L2 norm (lowest index on ties)."""
    f = as_tensor4(f)
    _check_even(f)
    stack = polyphase_split(f).stacked()
    norms = np.sqrt((stack ** 2).sum(axis=(2, 3, 4)))  # (4, b)
    gamma = np.argmax(norms, axis=0)
    return stack[gamma, np.arange(f.shape[0])].copy(), gamma


def aps_backward(f_shape, gamma, grad_out: np.ndarray) -> np.ndarray:
    # the selection itself is piecewise constant
    b, c, h, w = f_shape
    g = np.zeros(f_shape)
    for bi, gi in enumerate(gamma):
        m, n = phi_encode(gi)
        g[bi, :, m::2, n::2] = grad_out[bi]
    return g
