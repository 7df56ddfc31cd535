"""Weight-shared feature extractor and U-shaped scan/conv registration network.

The extractor is a shallow one-downsample UNet applied with identical weights
to source and target. The registration module concatenates the two feature
volumes (target first), runs a strided conv encoder with state-space scan
blocks at the deepest levels, and decodes with trilinear upsampling and skip
concatenation into a 3-channel displacement head. The head is zero-initialized
so an untrained model predicts the identity transform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .crossscan import VssBlockWeights, init_vss_block, vss_block
from .errors import ContractError, FormatError, ShapeError
from .spatial import conv3d, upsample_trilinear_2x


@dataclass(frozen=True)
class NetConfig:
    """Architecture knobs; defaults are sized for 32-cubed CPU training."""

    feat_channels: int = 8
    feat_channels_half: int = 16
    enc_channels: tuple[int, ...] = (16, 32, 64)
    state_size: int = 4
    vss_levels: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if len(self.enc_channels) < 2:
            raise ContractError("need at least two encoder levels")
        for lvl in self.vss_levels:
            if not 1 <= lvl < len(self.enc_channels):
                raise ContractError(f"vss level {lvl} outside 1..{len(self.enc_channels) - 1}")

    @property
    def levels(self) -> int:
        return len(self.enc_channels)


def _conv_init(rng: np.random.Generator, c_in: int, c_out: int, k: int = 3):
    std = np.sqrt(2.0 / (c_in * k ** 3))
    kernel = ad.parameter(rng.normal(0.0, std, (c_out, c_in, k, k, k)))
    bias = ad.parameter(np.zeros(c_out))
    return kernel, bias


class _ConvLayer:
    def __init__(self, rng, c_in, c_out, stride=1, act=True, zero_init=False):
        self.kernel, self.bias = _conv_init(rng, c_in, c_out)
        if zero_init:
            self.kernel.data[:] = 0.0
        self.stride = stride
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        c_out = self.kernel.data.shape[0]
        y = conv3d(x, self.kernel, stride=self.stride, padding=1)
        y = ad.add(y, ad.reshape(self.bias, (c_out, 1, 1, 1)))
        return ad.silu(y) if self.act else y

    def named(self, prefix):
        return {f"{prefix}.kernel": self.kernel, f"{prefix}.bias": self.bias}


class RegistrationModel:
    """Feature extraction plus displacement prediction, with named parameters."""

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        f, g = config.feat_channels, config.feat_channels_half
        self.feat_conv1 = _ConvLayer(rng, 1, f)
        self.feat_conv2 = _ConvLayer(rng, f, f)
        self.feat_down = _ConvLayer(rng, f, g, stride=2)
        self.feat_mid = _ConvLayer(rng, g, g)
        self.feat_fuse = _ConvLayer(rng, f + g, f, act=False)

        enc = config.enc_channels
        self.stem = _ConvLayer(rng, 2 * f, enc[0])
        self.downs = [_ConvLayer(rng, enc[i - 1], enc[i], stride=2)
                      for i in range(1, config.levels)]
        self.vss: dict[int, VssBlockWeights] = {
            lvl: init_vss_block(rng, enc[lvl], config.state_size)
            for lvl in config.vss_levels}
        self.decs = [_ConvLayer(rng, enc[i] + enc[i - 1], enc[i - 1])
                     for i in range(config.levels - 1, 0, -1)]
        self.head = _ConvLayer(rng, enc[0], 3, act=False, zero_init=True)
        self.head.bias.data[:] = 0.0
        self.params = self._collect()

    def _collect(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for name in ("feat_conv1", "feat_conv2", "feat_down", "feat_mid", "feat_fuse", "stem"):
            named.update(getattr(self, name).named(name))
        for i, layer in enumerate(self.downs):
            named.update(layer.named(f"down{i + 1}"))
        for lvl in sorted(self.vss):
            named.update(self.vss[lvl].named(f"vss{lvl}"))
        for i, layer in enumerate(self.decs):
            named.update(layer.named(f"dec{i + 1}"))
        named.update(self.head.named("head"))
        return named

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward passes -----------------------------------------------------

    def extract_features(self, vol) -> Tensor:
        """Shared-weight shallow UNet features at full resolution."""
        vol = as_tensor(vol)
        if vol.data.ndim == 3:
            vol = ad.reshape(vol, (1, *vol.data.shape))
        d, h, w = vol.data.shape[1:]
        if d % 2 or h % 2 or w % 2:
            raise ShapeError(f"feature extractor needs even extents, got {(d, h, w)}")
        full = self.feat_conv2(self.feat_conv1(vol))
        half = self.feat_mid(self.feat_down(full))
        up = upsample_trilinear_2x(half)
        return self.feat_fuse(ad.concat([full, up], axis=0))

    def register_features(self, f_src: Tensor, f_tgt: Tensor) -> Tensor:
        """Predict a [3,D,H,W] displacement field from two feature volumes."""
        if f_src.data.shape != f_tgt.data.shape:
            raise ShapeError(f"feature shapes differ: {f_src.data.shape} vs "
                             f"{f_tgt.data.shape}")
        extents = f_src.data.shape[1:]
        div = 2 ** (self.config.levels - 1)
        if any(n % div for n in extents):
            raise ShapeError(f"extents {extents} not divisible by {div}")
        x = self.stem(ad.concat([f_tgt, f_src], axis=0))
        skips = [x]
        for i, down in enumerate(self.downs):
            x = down(x)
            lvl = i + 1
            if lvl in self.vss:
                x = vss_block(x, self.vss[lvl])
            skips.append(x)
        for dec in self.decs:
            skip = skips[-2]
            skips.pop()
            x = dec(ad.concat([upsample_trilinear_2x(x), skip], axis=0))
        return self.head(x)

    def forward(self, i_src, i_tgt) -> Tensor:
        """Full model: shared feature extraction, then registration."""
        return self.register_features(self.extract_features(i_src),
                                      self.extract_features(i_tgt))


# ---------------------------------------------------------------------------
# Checkpoint format: magic, config block, named parameter records
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VMMCKPT1"


def save_checkpoint(path, model: RegistrationModel) -> None:
    """Versioned binary checkpoint with a bit-exact round-trip."""
    cfg = model.config
    ints = [cfg.feat_channels, cfg.feat_channels_half, cfg.levels, *cfg.enc_channels,
            cfg.state_size, len(cfg.vss_levels), *cfg.vss_levels]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(ints)))
        fh.write(struct.pack(f"<{len(ints)}I", *ints))
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> RegistrationModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {CKPT_MAGIC!r}", offset=0)
    off = 8
    (n_ints,), off = _unpack("<I", raw, off)
    ints, off = _unpack(f"<{n_ints}I", raw, off)
    ints = list(ints)
    feat, feat_half, levels = ints[0], ints[1], ints[2]
    enc = tuple(ints[3:3 + levels])
    state_size = ints[3 + levels]
    n_vss = ints[4 + levels]
    vss_levels = tuple(ints[5 + levels:5 + levels + n_vss])
    model = RegistrationModel(NetConfig(feat, feat_half, enc, state_size, vss_levels))

    (n_params,), off = _unpack("<I", raw, off)
    if n_params != len(model.params):
        raise FormatError(f"checkpoint has {n_params} parameters, model expects "
                          f"{len(model.params)}", offset=off)
    for _ in range(n_params):
        (name_len,), off = _unpack("<I", raw, off)
        name = raw[off:off + name_len].decode()
        off += name_len
        (rank,), off = _unpack("<I", raw, off)
        shape, off = _unpack(f"<{rank}I", raw, off)
        count = int(np.prod(shape)) if rank else 1
        end = off + 8 * count
        if end > len(raw):
            raise FormatError("truncated parameter payload", offset=off)
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off = end
        if name not in model.params:
            raise FormatError(f"unknown parameter {name!r}", offset=off)
        p = model.params[name]
        if p.data.shape != tuple(shape):
            raise FormatError(f"parameter {name!r} has shape {tuple(shape)}, expected "
                              f"{p.data.shape}", offset=off)
        p.data[...] = values.reshape(shape)
    return model


def _unpack(fmt, raw, off):
    s = struct.Struct(fmt)
    if off + s.size > len(raw):
        raise FormatError("truncated checkpoint", offset=off)
    return s.unpack_from(raw, off), off + s.size
