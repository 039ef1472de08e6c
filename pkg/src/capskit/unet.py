"""A small U-Net with swappable down/upsampling pairs.

Topology for depth ``D`` and base width ``B``::

    enc_0 (B) -> down -> enc_1 (2B) -> ... -> down -> bottleneck (B * 2**D)
    ... -> up -> concat skip -> dec_l (B * 2**l) -> ... -> 1x1 head (2 classes)

Every conv uses circular same-padding, so the skip crop is the identity.
Downsampling layers push their selected component index onto a stack that the
matching upsampling layer pops (innermost pair first).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .tensor import (
    ConvSpec,
    ShapeError,
    activation,
    activation_backward,
    as_tensor4,
    conv2d,
    conv2d_backward,
)

SAMPLER_KINDS = ("caps", "maxpool", "blurpool", "aps")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerKind:
    kind: str = "caps"
    caps: L.CapsConfig = field(default_factory=L.CapsConfig)

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler {self.kind!r}; choose from {SAMPLER_KINDS}")


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    classes: int = 2
    sampler: SamplerKind = field(default_factory=SamplerKind)
    # widths of the CAPD feature extractor; (128, 64) is the full-size layer
    capd_widths: tuple = (16, 8)

    def check_input(self, h: int, w: int):
        q = 2 ** self.depth
        if h % q or w % q:
            raise ShapeError(f"input size {(h, w)} is not divisible by 2**depth = {q}")


def _he_conv(rng, out_c, in_c, k):
    bound = np.sqrt(6.0 / (in_c * k * k))
    return ConvSpec(rng.uniform(-bound, bound, size=(out_c, in_c, k, k)), np.zeros(out_c))


class ConvBlock:
    """conv3x3 -> ReLU -> conv3x3 -> ReLU."""

    def __init__(self, rng, in_c, out_c):
        self.convs = [_he_conv(rng, out_c, in_c, 3), _he_conv(rng, out_c, out_c, 3)]

    def params(self):
        return [t for s in self.convs for t in (s.kernel, s.bias)]

    def forward(self, x):
        a1 = conv2d(x, self.convs[0])
        h1 = activation(a1, "relu")
        a2 = conv2d(h1, self.convs[1])
        self._cache = (x, a1, h1, a2)
        return activation(a2, "relu")

    def backward(self, g):
        x, a1, h1, a2 = self._cache
        g = activation_backward(a2, "relu", g)
        g, gk2, gb2 = conv2d_backward(h1, self.convs[1], g)
        g = activation_backward(a1, "relu", g)
        g, gk1, gb1 = conv2d_backward(x, self.convs[0], g)
        return g, [gk1, gb1, gk2, gb2]


class Head:
    def __init__(self, rng, in_c, classes):
        self.conv = _he_conv(rng, classes, in_c, 1)

    def params(self):
        return [self.conv.kernel, self.conv.bias]

    def forward(self, x):
        self._x = x
        return conv2d(x, self.conv)

    def backward(self, g):
        gx, gk, gb = conv2d_backward(self._x, self.conv, g)
        return gx, [gk, gb]


class Down:
    """One downsampling stage; owns CAPD parameters when the sampler is caps."""

    def __init__(self, rng, channels, sampler: SamplerKind, widths):
        self.sampler = sampler
        self.capd = None
        if sampler.kind == "caps":
            self.capd = L.CapdParams.init(channels, rng, widths=widths, k=sampler.caps.k)

    def params(self):
        if self.capd is None:
            return []
        return [t for s in self.capd.convs for t in (s.kernel, s.bias)] + [self.capd.h_kernel]

    def forward(self, x, caps_cfg=None):
        kind = self.sampler.kind
        self._x = x
        if kind == "caps":
            self._res = L.capd_forward(x, self.capd, caps_cfg or self.sampler.caps)
            self._cfg = caps_cfg or self.sampler.caps
            return self._res.d, self._res.gamma
        if kind == "maxpool":
            return L.maxpool_down(x), np.zeros(x.shape[0], dtype=int)
        if kind == "blurpool":
            return L.blurpool_down(x), np.zeros(x.shape[0], dtype=int)
        d, gamma = L.aps_down(x)
        self._gamma = gamma
        return d, gamma

    def backward(self, g):
        kind = self.sampler.kind
        if kind == "caps":
            gx, conv_grads, gh = L.capd_backward(self._res, self.capd, self._cfg, g)
            return gx, [t for pair in conv_grads for t in pair] + [gh]
        if kind == "maxpool":
            return L.maxpool_backward(self._x, g), []
        if kind == "blurpool":
            return L.blurpool_backward(self._x, g), []
        return L.aps_backward(self._x.shape, self._gamma, g), []


class Up:
    def __init__(self, sampler: SamplerKind):
        self.sampler = sampler

    def _lpf(self, caps_cfg):
        if self.sampler.kind == "caps":
            return (caps_cfg or self.sampler.caps).use_lpf
        return self.sampler.kind == "blurpool"

    def forward(self, d, gamma, caps_cfg=None):
        self._gamma = gamma
        self._use_lpf = self._lpf(caps_cfg)
        up = L.zero_fill_up(d, gamma)
        return L.lpf_apply(up) if self._use_lpf else up

    def backward(self, g):
        if self._use_lpf:
            g = L.lpf_backward(g.shape, g)
        return L.zero_fill_up_backward(g, self._gamma)


def skip_crop(skip, target_hw):
    # circular same-padding keeps sizes equal, so this never trims anything
    h, w = target_hw
    return skip[:, :, :h, :w]


class Network:
    def __init__(self, cfg: NetConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        B, D = cfg.base_channels, cfg.depth
        self.enc = []
        self.down = []
        c_in = cfg.in_channels
        for lvl in range(D):
            c = B * 2 ** lvl
            self.enc.append(ConvBlock(rng, c_in, c))
            self.down.append(Down(rng, c, cfg.sampler, cfg.capd_widths))
            c_in = c
        self.bottleneck = ConvBlock(rng, c_in, B * 2 ** D)
        c_in = B * 2 ** D
        self.up = []
        self.dec = []
        for lvl in reversed(range(D)):
            c = B * 2 ** lvl
            self.up.append(Up(cfg.sampler))
            self.dec.append(ConvBlock(rng, c_in + c, c))
            c_in = c
        self.head = Head(rng, c_in, cfg.classes)
        self.gamma_stack = []
        self.gamma_log = []

    def stages(self):
        """Parameterised stages in build order."""
        return [*self.enc, *self.down, self.bottleneck, *self.dec, self.head]

    def params(self):
        return [p for s in self.stages() for p in s.params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def set_params(self, values):
        for p, v in zip(self.params(), values, strict=True):
            p[...] = v

    def forward(self, x, caps_cfg: L.CapsConfig | None = None) -> np.ndarray:
        """Per-pixel class logits (b, classes, h, w).

        ``caps_cfg`` overrides the sampler's CapsConfig for this call only,
        e.g. to evaluate a trained model at a different temperature.
        """
        x = as_tensor4(x)
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        self.cfg.check_input(*x.shape[2:])
        self.gamma_stack = []
        self.gamma_log = []
        skips = []
        h = x
        for enc, down in zip(self.enc, self.down):
            h = enc.forward(h)
            skips.append(h)
            h, gamma = down.forward(h, caps_cfg)
            self.gamma_stack.append(gamma)
            self.gamma_log.append(gamma)
        h = self.bottleneck.forward(h)
        self._split = []
        for up, dec in zip(self.up, self.dec):
            gamma = self.gamma_stack.pop()
            h = up.forward(h, gamma, caps_cfg)
            skip = skip_crop(skips.pop(), h.shape[2:])
            self._split.append(h.shape[1])
            h = dec.forward(np.concatenate([h, skip], axis=1))
        assert not self.gamma_stack, "unbalanced down/up pairing"
        return self.head.forward(h)

    def backward(self, grad_logits):
        """Back-propagate from the last forward; returns grads aligned with :meth:`params`."""
        grads = {}
        g, grads[id(self.head)] = self.head.backward(grad_logits)
        skip_grads = []
        for up, dec, split in zip(reversed(self.up), reversed(self.dec), reversed(self._split)):
            g, grads[id(dec)] = dec.backward(g)
            skip_grads.append(g[:, split:])
            g = up.backward(g[:, :split])
        g, grads[id(self.bottleneck)] = self.bottleneck.backward(g)
        # skip_grads now runs from the outermost level inwards
        for lvl in reversed(range(self.cfg.depth)):
            g, grads[id(self.down[lvl])] = self.down[lvl].backward(g)
            g = g + skip_grads[lvl]
            g, grads[id(self.enc[lvl])] = self.enc[lvl].backward(g)
        return [t for s in self.stages() for t in grads[id(s)]]


def build_network(cfg: NetConfig, seed: int) -> Network:
    if cfg.depth < 1 or cfg.base_channels < 1:
        raise ConfigError("depth and base_channels must be >= 1")
    return Network(cfg, seed)


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over two classes; ties go to background."""
    logits = as_tensor4(logits)
    if logits.shape[1] != 2:
        raise ShapeError(f"expected 2 logit channels, got {logits.shape[1]}")
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"CAPSKIT\x00"
VERSION = 1


def config_to_dict(cfg: NetConfig) -> dict:
    d = asdict(cfg)
    d["capd_widths"] = list(cfg.capd_widths)
    return d


def config_from_dict(d: dict) -> NetConfig:
    d = dict(d)
    s = d.pop("sampler")
    sampler = SamplerKind(s["kind"], L.CapsConfig(**s["caps"]))
    d["capd_widths"] = tuple(d["capd_widths"])
    return NetConfig(sampler=sampler, **d)


def save_checkpoint(net: Network, path) -> None:
    """Write ``net`` to ``path``.

    Layout (little-endian): 8-byte magic, u32 version, i64 seed, u32 length of
    a UTF-8 JSON config echo, the JSON bytes, u32 parameter-tensor count, then
    per tensor: u32 rank, rank x u32 dims, float64 data in C order.
    """
    echo = json.dumps(config_to_dict(net.cfg), sort_keys=True).encode()
    params = net.params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Iq", VERSION, net.seed))
        fh.write(struct.pack("<I", len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a capskit checkpoint")
    version, seed = struct.unpack_from("<Iq", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    cfg = config_from_dict(json.loads(buf[pos:pos + n]))
    pos += n
    net = build_network(cfg, seed)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = net.params()
    if count != len(params):
        raise ValueError(f"{path}: expected {len(params)} tensors, found {count}")
    for p in params:
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        if tuple(shape) != p.shape:
            raise ValueError(f"{path}: tensor shape {shape} does not match {p.shape}")
        p[...] = np.frombuffer(buf, dtype="<f8", count=p.size, offset=pos).reshape(shape)
        pos += 8 * p.size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} unexpected trailing bytes")
    return net
