"""Convolutional denoiser and time-consistency classifier networks.

Both models share the same building blocks: convolutions with periodic
padding (matching the dataset geometry), GroupNorm + SiLU residual blocks
with a sinusoidal noise-level embedding added per block, and stride-2 /
nearest-neighbor resampling. The denoiser is a 3-level encoder-decoder with
skip connections; the classifier reuses the encoder followed by global
average pooling and a two-layer fully connected head.

Architecture descriptors are flat ``key=value`` strings stored inside
checkpoints so a network can be rebuilt from its file alone.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class NetworkError(ValueError):
    """Invalid network configuration or input."""


def _groups(ch: int) -> int:
    g = min(8, ch)
    while ch % g:
        g -= 1
    return g


class PeriodicConv2d(nn.Module):
    """3x3 (or 1x1) convolution with geometry-aware wrap padding."""

    def __init__(self, in_ch, out_ch, kernel: int = 3, stride: int = 1,
                 geometry: str = "periodic_both"):
        super().__init__()
        if geometry not in ("periodic_both", "periodic_width_only"):
            raise NetworkError(f"unknown geometry {geometry!r}")
        self.pad = kernel // 2
        self.geometry = geometry
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=0)

    def forward(self, x):
        p = self.pad
        if p:
            if self.geometry == "periodic_both":
                x = F.pad(x, (p, p, p, p), mode="circular")
            else:
                x = F.pad(x, (p, p, 0, 0), mode="circular")
                x = F.pad(x, (0, 0, p, p))
        return self.conv(x)


def sinusoidal_embedding(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features of a scalar per batch element, log-spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(math.log(1.0), math.log(1000.0), half,
                                     dtype=x.dtype, device=x.device))
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class NoiseEmbedding(nn.Module):
    def __init__(self, feat_dim: int = 64, emb_dim: int = 128):
        super().__init__()
        self.feat_dim = feat_dim
        self.net = nn.Sequential(
            nn.Linear(feat_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )

    def forward(self, c_noise):
        return self.net(sinusoidal_embedding(c_noise, self.feat_dim))


class ResidualBlock(nn.Module):
    """GN -> SiLU -> conv, with the noise embedding added between the convs."""

    def __init__(self, in_ch, out_ch, emb_dim, geometry):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = PeriodicConv2d(in_ch, out_ch, 3, geometry=geometry)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = PeriodicConv2d(out_ch, out_ch, 3, geometry=geometry)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, in_ch, out_ch, geometry):
        super().__init__()
        self.conv = PeriodicConv2d(in_ch, out_ch, 3, stride=2, geometry=geometry)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch, geometry):
        super().__init__()
        self.conv = PeriodicConv2d(in_ch, out_ch, 3, geometry=geometry)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """Shared convolutional trunk: conv-in plus per-level residual blocks."""

    def __init__(self, in_channels, widths, blocks_per_level, emb_dim, geometry):
        super().__init__()
        self.conv_in = PeriodicConv2d(in_channels, widths[0], 3, geometry=geometry)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, w in enumerate(widths):
            # conv_in / the previous Downsample already produce this width
            blocks = nn.ModuleList(
                ResidualBlock(w, w, emb_dim, geometry) for _ in range(blocks_per_level)
            )
            self.levels.append(blocks)
            if i + 1 < len(widths):
                self.downs.append(Downsample(w, widths[i + 1], geometry))

    def forward(self, x, emb):
        h = self.conv_in(x)
        feats = []
        for i, blocks in enumerate(self.levels):
            for blk in blocks:
                h = blk(h, emb)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats  # one feature map per level, finest first


class ScoreUNet(nn.Module):
    """Denoiser backbone f(c_in x, c_noise): encoder-decoder with skips.

    ``in_channels`` is 1 for the unconditional model and 1 + number of clean
    conditioning frames for the conditional one; the output is always the
    single candidate channel. Conditional and unconditional instances differ
    only in this count.
    """

    def __init__(self, in_channels: int = 1, widths=(32, 64, 64),
                 blocks_per_level: int = 2, emb_dim: int = 128,
                 geometry: str = "periodic_both"):
        super().__init__()
        if len(widths) < 2:
            raise NetworkError("need at least two levels")
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.blocks_per_level = blocks_per_level
        self.emb_dim = emb_dim
        self.geometry = geometry
        self.embed = NoiseEmbedding(64, emb_dim)
        self.encoder = Encoder(in_channels, self.widths, blocks_per_level, emb_dim, geometry)
        self.ups = nn.ModuleList()
        self.dec_levels = nn.ModuleList()
        for i in range(len(self.widths) - 2, -1, -1):
            self.ups.append(Upsample(self.widths[i + 1], self.widths[i], geometry))
            blocks = nn.ModuleList()
            for b in range(blocks_per_level):
                in_ch = 2 * self.widths[i] if b == 0 else self.widths[i]
                blocks.append(ResidualBlock(in_ch, self.widths[i], emb_dim, geometry))
            self.dec_levels.append(blocks)
        self.norm_out = nn.GroupNorm(_groups(self.widths[0]), self.widths[0])
        self.conv_out = PeriodicConv2d(self.widths[0], 1, 3, geometry=geometry)
        nn.init.zeros_(self.conv_out.conv.weight)
        nn.init.zeros_(self.conv_out.conv.bias)

    def forward(self, x, c_noise):
        down = 2 ** (len(self.widths) - 1)
        if x.shape[-1] % down or x.shape[-2] % down:
            raise NetworkError(f"spatial size {tuple(x.shape[-2:])} not divisible by {down}")
        if x.shape[1] != self.in_channels:
            raise NetworkError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        emb = self.embed(c_noise)
        feats = self.encoder(x, emb)
        h = feats[-1]
        for up, blocks, skip in zip(self.ups, self.dec_levels, feats[-2::-1]):
            h = torch.cat([up(h), skip], dim=1)
            for blk in blocks:
                h = blk(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))

    def descriptor(self) -> str:
        return (f"kind=unet;in={self.in_channels};widths={','.join(map(str, self.widths))};"
                f"blocks={self.blocks_per_level};emb={self.emb_dim};geometry={self.geometry}")


class DiscriminatorNet(nn.Module):
    """Noise-conditioned encoder + pooled two-layer head emitting one logit.

    The final layer starts at exactly zero so a fresh classifier outputs
    probability 1/2 everywhere; global average pooling makes the head legal
    for any input size (random crops included).
    """

    def __init__(self, in_channels: int = 3, widths=(32, 64),
                 blocks_per_level: int = 2, emb_dim: int = 128,
                 head_width: int = 1024, geometry: str = "periodic_both"):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.blocks_per_level = blocks_per_level
        self.emb_dim = emb_dim
        self.head_width = head_width
        self.geometry = geometry
        self.embed = NoiseEmbedding(64, emb_dim)
        self.encoder = Encoder(in_channels, self.widths, blocks_per_level, emb_dim, geometry)
        self.norm_out = nn.GroupNorm(_groups(self.widths[-1]), self.widths[-1])
        self.fc1 = nn.Linear(self.widths[-1], head_width)
        self.fc2 = nn.Linear(head_width, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x, c_noise):
        if x.shape[1] != self.in_channels:
            raise NetworkError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        emb = self.embed(c_noise)
        h = self.encoder(x, emb)[-1]
        h = F.silu(self.norm_out(h)).mean(dim=(2, 3))
        return self.fc2(F.silu(self.fc1(h)))[:, 0]

    def descriptor(self) -> str:
        return (f"kind=disc;in={self.in_channels};widths={','.join(map(str, self.widths))};"
                f"blocks={self.blocks_per_level};emb={self.emb_dim};"
                f"head={self.head_width};geometry={self.geometry}")


def build_network(descriptor: str) -> nn.Module:
    """Reconstruct a network from its checkpoint descriptor string."""
    fields = {}
    for part in descriptor.split(";"):
        key, sep, value = part.partition("=")
        if not sep:
            raise NetworkError(f"bad descriptor field {part!r}")
        fields[key] = value
    try:
        kind = fields.pop("kind")
        widths = tuple(int(w) for w in fields.pop("widths").split(","))
        common = dict(
            in_channels=int(fields.pop("in")),
            widths=widths,
            blocks_per_level=int(fields.pop("blocks")),
            emb_dim=int(fields.pop("emb")),
            geometry=fields.pop("geometry"),
        )
        if kind == "unet":
            net = ScoreUNet(**common)
        elif kind == "disc":
            net = DiscriminatorNet(head_width=int(fields.pop("head")), **common)
        else:
            raise NetworkError(f"unknown network kind {kind!r}")
    except KeyError as e:
        raise NetworkError(f"descriptor missing field {e}") from None
    if fields:
        raise NetworkError(f"unused descriptor fields {sorted(fields)}")
    return net


def parameter_vector(net: nn.Module) -> np.ndarray:
    """Flatten parameters to one float vector in state-dict order."""
    with torch.no_grad():
        return torch.cat([p.detach().reshape(-1) for p in net.parameters()]).cpu().numpy()


def load_parameter_vector(net: nn.Module, vec: np.ndarray) -> None:
    """Inverse of :func:`parameter_vector`."""
    vec = np.asarray(vec)
    expected = sum(p.numel() for p in net.parameters())
    if vec.size != expected:
        raise NetworkError(f"parameter vector has {vec.size} entries, expected {expected}")
    off = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            chunk = torch.as_tensor(vec[off : off + n], dtype=p.dtype).reshape(p.shape)
            p.copy_(chunk)
            off += n


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
