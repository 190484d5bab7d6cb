"""Octave convolution, scSE / skip-scSE recalibration and the encoder-decoder FCN.

All blocks work on 2D slices. Octave features travel as ``OctFeature`` pairs:
a full-resolution high-frequency map and a half-resolution low-frequency map.
"""

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_ALPHA = 0.25
DEFAULT_SE_REDUCTION = 2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.01


def split_channels(channels, alpha):
    """Return (high, low) channel counts for a total of ``channels``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    low = int(math.floor(alpha * channels + 0.5))
    return channels - low, low


class OctFeature(NamedTuple):
    high: Optional[torch.Tensor]
    low: Optional[torch.Tensor] = None

    @property
    def channels(self):
        return sum(t.shape[1] for t in self if t is not None)

    @property
    def alpha(self):
        low = 0 if self.low is None else self.low.shape[1]
        return low / self.channels

    def check(self):
        if self.high is not None and self.low is not None:
            h, w = self.high.shape[-2:]
            if self.low.shape[-2:] != (h // 2, w // 2) or h % 2 or w % 2:
                raise ValueError(
                    f"low branch {tuple(self.low.shape[-2:])} is not half of high branch {(h, w)}"
                )
        return self

    def map(self, fn):
        return OctFeature(*(None if t is None else fn(t) for t in self))


def as_oct(x):
    if isinstance(x, OctFeature):
        return x
    if isinstance(x, tuple):
        return OctFeature(*x)
    return OctFeature(x, None)


def merge_octave(x):
    """Collapse an OctFeature to a single map: high ∥ nearest-upsampled low."""
    x = as_oct(x)
    if x.low is None:
        return x.high
    up = F.interpolate(x.low, scale_factor=2, mode="nearest")
    if x.high is None:
        return up
    return torch.cat([x.high, up], dim=1)


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    alpha: float = DEFAULT_ALPHA
    se_reduction: int = DEFAULT_SE_REDUCTION

    def __post_init__(self):
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")
        if self.out_channels % self.se_reduction:
            raise ValueError(
                f"out_channels={self.out_channels} not divisible by se_reduction={self.se_reduction}"
            )


def _kaiming(conv):
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


class OctConv2d(nn.Module):
    """3x3 octave convolution with the four high/low paths.

    ``alpha_in`` and ``alpha_out`` give the low-frequency channel share of
    input and output. With both at 0 this is exactly ``nn.Conv2d``.
    Biases live on the high->high and low->low paths only.
    """

    def __init__(self, in_channels, out_channels, alpha_in=DEFAULT_ALPHA, alpha_out=DEFAULT_ALPHA,
                 kernel_size=3, groups=1, bias=True):
        super().__init__()
        self.in_h, self.in_l = split_channels(in_channels, alpha_in)
        self.out_h, self.out_l = split_channels(out_channels, alpha_out)
        pad = kernel_size // 2

        def conv(cin, cout, with_bias):
            if cin == 0 or cout == 0:
                return None
            return _kaiming(nn.Conv2d(cin, cout, kernel_size, padding=pad, groups=groups, bias=with_bias))

        self.h2h = conv(self.in_h, self.out_h, bias)
        self.h2l = conv(self.in_h, self.out_l, False)
        self.l2h = conv(self.in_l, self.out_h, False)
        self.l2l = conv(self.in_l, self.out_l, bias)

    def forward(self, x):
        x = as_oct(x)
        hi, lo = x.high, x.low
        if (hi is None) != (self.in_h == 0) or (lo is None) != (self.in_l == 0):
            raise ValueError("input branches do not match the configured channel split")
        if hi is not None and self.out_l and (hi.shape[-1] % 2 or hi.shape[-2] % 2):
            raise ValueError(f"odd spatial dims {tuple(hi.shape[-2:])} with a low-frequency branch")
        x.check()

        out_h = out_l = None
        if self.out_h:
            out_h = 0
            if self.h2h is not None:
                out_h = self.h2h(hi)
            if self.l2h is not None:
                out_h = out_h + F.interpolate(self.l2h(lo), scale_factor=2, mode="nearest")
        if self.out_l:
            out_l = 0
            if self.l2l is not None:
                out_l = self.l2l(lo)
            if self.h2l is not None:
                out_l = out_l + self.h2l(F.avg_pool2d(hi, 2))
        return OctFeature(out_h, out_l)


class ChannelExcitation(nn.Module):
    def __init__(self, channels, reduction=DEFAULT_SE_REDUCTION):
        super().__init__()
        self.fc0 = _kaiming(nn.Conv2d(channels, channels // reduction, 1))
        self.fc1 = nn.Conv2d(channels // reduction, channels, 1)
        nn.init.kaiming_normal_(self.fc1.weight, mode="fan_in")
        nn.init.zeros_(self.fc1.bias)

    def forward(self, x):
        z = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.fc1(F.relu(self.fc0(z))))


class SpatialExcitation(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)
        nn.init.kaiming_normal_(self.conv.weight, mode="fan_in")
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


class SCSE(nn.Module):
    """Concurrent spatial and channel squeeze & excitation.

    ``combine`` is "max" (elementwise max of the two gated copies) or "sum".
    ``gate_override`` pins every gate to a constant, used for probing.
    """

    def __init__(self, channels, reduction=DEFAULT_SE_REDUCTION, combine="max"):
        super().__init__()
        if combine not in ("max", "sum"):
            raise ValueError(f"unknown combine rule {combine!r}")
        if channels % reduction:
            raise ValueError(f"channels={channels} not divisible by reduction={reduction}")
        self.cse = ChannelExcitation(channels, reduction)
        self.sse = SpatialExcitation(channels)
        self.combine = combine
        self.gate_override = None

    def gates(self, x):
        if self.gate_override is not None:
            g = float(self.gate_override)
            return (x.new_full((x.shape[0], x.shape[1], 1, 1), g),
                    x.new_full((x.shape[0], 1, *x.shape[2:]), g))
        return self.cse(x), self.sse(x)

    def forward(self, x):
        channel_gate, spatial_gate = self.gates(x)
        a, b = x * channel_gate, x * spatial_gate
        return torch.maximum(a, b) if self.combine == "max" else a + b


class SkipSCSE(nn.Module):
    """Inner-imaging 1x1 grouped conv, scSE recalibration, identity skip added back."""

    def __init__(self, channels, reduction=DEFAULT_SE_REDUCTION, groups=2, combine="max"):
        super().__init__()
        if channels % groups:
            raise ValueError(f"channels={channels} not divisible by inner-imaging groups={groups}")
        self.inner = _kaiming(nn.Conv2d(channels, channels, 1, groups=groups))
        self.scse = SCSE(channels, reduction, combine)

    @property
    def gate_override(self):
        return self.scse.gate_override

    @gate_override.setter
    def gate_override(self, value):
        self.scse.gate_override = value

    def forward(self, x):
        # zero gates give a signed zero, so the skip survives bit-exactly
        return self.scse(self.inner(x)) + x


class EncoderBlock(nn.Module):
    """Two 3x3 OctConvs with ReLU, then 2x2 max-pool. Returns (skip, down)."""

    def __init__(self, cfg: BlockConfig, alpha_in=0.0, alpha_out=None):
        super().__init__()
        alpha_out = cfg.alpha if alpha_out is None else alpha_out
        self.cfg = cfg
        self.conv1 = OctConv2d(cfg.in_channels, cfg.out_channels, alpha_in, alpha_out)
        self.conv2 = OctConv2d(cfg.out_channels, cfg.out_channels, alpha_out, alpha_out)
        self.has_low = alpha_out > 0 and self.conv1.out_l > 0

    def forward(self, x):
        x = as_oct(x)
        h, w = (x.high if x.high is not None else x.low).shape[-2:]
        need = 4 if self.has_low else 2
        if h % need or w % need:
            raise ValueError(f"spatial dims {(h, w)} not divisible by {need}")
        y = self.conv1(x).map(F.relu)
        skip = self.conv2(y).map(F.relu)
        down = skip.map(lambda t: F.max_pool2d(t, 2))
        return skip, down


class DecoderBlock(nn.Module):
    """x ∥ skip -> 3x3 conv -> BN -> leaky ReLU -> skip-scSE -> 4x4 stride-2 deconv.

    ``cfg.in_channels`` counts the concatenated input.
    """

    def __init__(self, cfg: BlockConfig, combine="max"):
        super().__init__()
        self.cfg = cfg
        self.conv = _kaiming(nn.Conv2d(cfg.in_channels, cfg.out_channels, 3, padding=1))
        self.bn = nn.BatchNorm2d(cfg.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.skip_scse = SkipSCSE(cfg.out_channels, cfg.se_reduction, combine=combine)
        self.deconv = nn.ConvTranspose2d(cfg.out_channels, cfg.out_channels, 4, stride=2, padding=1)
        nn.init.kaiming_normal_(self.deconv.weight, mode="fan_in", nonlinearity="leaky_relu")
        nn.init.zeros_(self.deconv.bias)

    def forward(self, x, skip):
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"spatial mismatch: x {tuple(x.shape[-2:])} vs skip {tuple(skip.shape[-2:])}")
        y = torch.cat([x, skip], dim=1)
        if y.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} concatenated channels, got {y.shape[1]}")
        y = F.leaky_relu(self.bn(self.conv(y)), LEAKY_SLOPE)
        return self.deconv(self.skip_scse(y))


@dataclass
class FCNConfig:
    depth: int = 3
    base_channels: int = 16
    alpha: float = DEFAULT_ALPHA
    in_channels: int = 3
    out_channels: int = 4
    se_reduction: int = DEFAULT_SE_REDUCTION
    combine: str = "max"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


class FCN(nn.Module):
    """UNet-topology FCN: octave encoders, plain center, skip-scSE decoders.

    Encoder ``i`` runs at resolution R/2^i with ``base * 2^i`` channels. The first
    and last encoders are single-frequency on their outer side. Decoder ``j``
    pairs with the encoder output at R/2^j and upsamples to R/2^(j-1); the last
    1x1 conv sees the final decoder output concatenated with the full-res skip.
    """

    def __init__(self, cfg: FCNConfig):
        super().__init__()
        self.cfg = cfg
        d, b, a = cfg.depth, cfg.base_channels, cfg.alpha
        widths = [b * 2 ** i for i in range(d)]
        self.encoders = nn.ModuleList()
        cin, a_in = cfg.in_channels, 0.0
        for i, w in enumerate(widths):
            a_out = 0.0 if i == d - 1 else a
            self.encoders.append(EncoderBlock(BlockConfig(cin, w, a_out, cfg.se_reduction), a_in, a_out))
            cin, a_in = w, a_out
        self.center = OctConv2d(widths[-1], widths[-1], 0.0, 0.0)
        self.decoders = nn.ModuleList()
        x_ch = widths[-1]
        for j in range(d, 0, -1):
            skip_ch = widths[j - 1] if j == d else widths[j]
            out_ch = widths[j - 1]
            self.decoders.append(DecoderBlock(BlockConfig(x_ch + skip_ch, out_ch, 0.0, cfg.se_reduction), cfg.combine))
            x_ch = out_ch
        self.head = nn.Conv2d(x_ch + widths[0], cfg.out_channels, 1)
        nn.init.kaiming_normal_(self.head.weight, mode="fan_in")
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        step = 2 ** self.cfg.depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by 2^depth={step}")
        skips = []
        feat = OctFeature(x)
        for enc in self.encoders:
            skip, feat = enc(feat)
            skips.append(merge_octave(skip))
        bottom = merge_octave(feat)
        y = F.relu(merge_octave(self.center(bottom)))
        pairs = [bottom] + skips[:0:-1]
        for dec, skip in zip(self.decoders, pairs):
            y = dec(y, skip)
        return self.head(torch.cat([y, skips[0]], dim=1))

    def set_gate_override(self, value):
        for m in self.modules():
            if isinstance(m, SCSE):
                m.gate_override = value


def build_fcn(depth, base_channels, alpha=DEFAULT_ALPHA, out_channels=4, in_channels=3,
              se_reduction=DEFAULT_SE_REDUCTION, combine="max"):
    return FCN(FCNConfig(depth, base_channels, alpha, in_channels, out_channels, se_reduction, combine))


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


# checkpoints: zip archive holding descriptor.json plus raw little-endian float32 arrays

def save_checkpoint(model, path, extra=None):
    descriptor = {"architecture": type(model).__name__, "config": asdict(model.cfg),
                  "arrays": {}, "extra": extra or {}}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            descriptor["arrays"][name] = list(arr.shape)
            info = zipfile.ZipInfo(f"weights/{name}.f32", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, arr.tobytes(order="C"))
        info = zipfile.ZipInfo("descriptor.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(descriptor, indent=2, sort_keys=True))
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def read_checkpoint(path_or_bytes):
    """Return (descriptor, {name: float32 array})."""
    src = io.BytesIO(path_or_bytes) if isinstance(path_or_bytes, (bytes, bytearray)) else path_or_bytes
    with zipfile.ZipFile(src) as zf:
        descriptor = json.loads(zf.read("descriptor.json"))
        arrays = {}
        for name, shape in descriptor["arrays"].items():
            raw = zf.read(f"weights/{name}.f32")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return descriptor, arrays


ARCHITECTURES = {}


def register_architecture(cls, cfg_cls):
    ARCHITECTURES[cls.__name__] = (cls, cfg_cls)
    return cls


register_architecture(FCN, FCNConfig)


def load_checkpoint(path_or_bytes):
    """Rebuild a model from the descriptor alone and load its weights. Returns (model, extra)."""
    descriptor, arrays = read_checkpoint(path_or_bytes)
    cls, cfg_cls = ARCHITECTURES[descriptor["architecture"]]
    model = cls(cfg_cls(**descriptor["config"]))
    state = model.state_dict()
    loaded = {}
    for name, ref in state.items():
        if name not in arrays:
            raise KeyError(f"checkpoint lacks array {name!r}")
        loaded[name] = torch.from_numpy(arrays[name]).to(ref.dtype).reshape(ref.shape)
    model.load_state_dict(loaded)
    model.eval()
    return model, descriptor.get("extra", {})
