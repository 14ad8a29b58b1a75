"""Spatial stream: U-shaped encoder/decoder of 2-D selective-scan blocks.

Patch embedding turns the cube into a token grid; four encoder stages halve
resolution and double channels between them; the decoder mirrors that with
pixel-shuffle expansion and concat+linear skips. Features are carried
channel-last [B, h, w, C] internally; stage outputs cross module boundaries
channel-first [B, C, h, w].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import ssm
from . import tensor as T
from .tensor import Tensor

NUM_STAGES = 4


@dataclass
class SpatialStreamConfig:
    patch_size: int = 4
    base_channels: int = 32
    vss_per_stage: int = 2
    state_size: int = 8
    ffn_expansion: float = 2.0
    tie_scan_directions: bool = False
    discretization: str = "zoh_exact"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if self.vss_per_stage < 1:
            raise ValueError("vss_per_stage must be >= 1")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (patch expansion halves it)")
        if self.discretization not in ssm.DISCRETIZATION_MODES:
            raise ValueError(f"unknown discretization {self.discretization!r}")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * (1 << (stage - 1))

    def decoder_depths(self) -> list[int]:
        n = self.vss_per_stage
        return [n, n, n, max(1, n // 2)]


class PatchEmbed(nn.Module):
    """Non-overlapping P x P patches, linear from S*P*P to C. [B,S,H,W] -> [B,h,w,C]."""

    def __init__(self, in_bands, channels, patch_size, rng):
        self.patch_size = patch_size
        self.proj = nn.Linear(in_bands * patch_size * patch_size, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, s, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"input {h}x{w} not divisible by patch size {p}")
        hp, wp = h // p, w // p
        x = x.reshape(b, s, hp, p, wp, p)
        x = x.transpose((0, 2, 4, 1, 3, 5))
        x = x.reshape(b, hp, wp, s * p * p)
        return self.proj(x)


class DirectionProj(nn.Module):
    """Per-direction selective projections (delta/B/C); A_log lives on the block."""

    def __init__(self, dim, state_size, rng):
        bound = 1.0 / np.sqrt(dim)
        self.W_delta = nn._uniform(rng, (dim, dim), bound)
        self.b_delta = ssm.init_dt_bias(dim, rng)
        self.W_B = nn._uniform(rng, (dim, state_size), bound)
        self.W_C = nn._uniform(rng, (dim, state_size), bound)


def _order_seq(grid: Tensor, direction: int) -> Tensor:
    """Flatten [B,h,w,C] into [B,L,C] along one of the four scan orders."""
    b, h, w, c = grid.shape
    if direction == 0:  # row-major
        return grid.reshape(b, h * w, c)
    if direction == 1:  # row-major reversed
        return grid.reshape(b, h * w, c).flip(1)
    if direction == 2:  # column-major
        return grid.transpose((0, 2, 1, 3)).reshape(b, h * w, c)
    if direction == 3:  # column-major reversed
        return grid.transpose((0, 2, 1, 3)).reshape(b, h * w, c).flip(1)
    raise ValueError(f"direction must be 0..3, got {direction}")


def _unorder_seq(seq: Tensor, direction: int, h: int, w: int) -> Tensor:
    """Inverse of _order_seq: place scan outputs back on the grid."""
    b, L, c = seq.shape
    if direction == 0:
        return seq.reshape(b, h, w, c)
    if direction == 1:
        return seq.flip(1).reshape(b, h, w, c)
    if direction == 2:
        return seq.reshape(b, w, h, c).transpose((0, 2, 1, 3))
    if direction == 3:
        return seq.flip(1).reshape(b, w, h, c).transpose((0, 2, 1, 3))
    raise ValueError(f"direction must be 0..3, got {direction}")


class Ss2d(nn.Module):
    """Four directional selective scans over the flattened grid, averaged.

    The input projection splits into a scan path and a silu gate; A_log is
    shared across directions, each direction owns its delta/B/C projections
    unless tie_directions collapses them into one set.
    """

    def __init__(self, dim, state_size, rng, tie_directions=False, discretization="zoh_exact"):
        self.dim = dim
        self.discretization = discretization
        self.in_proj = nn.Linear(dim, 2 * dim, rng)
        self.A_log = ssm.init_a_log(dim, state_size)
        if tie_directions:
            self.directions = [DirectionProj(dim, state_size, rng)]
        else:
            self.directions = [DirectionProj(dim, state_size, rng) for _ in range(4)]
        self.out_proj = nn.Linear(dim, dim, rng)

    def forward(self, grid: Tensor) -> Tensor:
        b, h, w, c = grid.shape
        mixed = self.in_proj(grid)
        u = mixed[..., : self.dim]
        z = mixed[..., self.dim :]
        a = -T.texp(self.A_log)
        total = None
        for direction in range(4):
            dp = self.directions[direction % len(self.directions)]
            seq = _order_seq(u, direction)
            sp = ssm.SelectiveParams(
                delta=T.softplus(seq @ dp.W_delta + dp.b_delta),
                B_sel=seq @ dp.W_B,
                C_sel=seq @ dp.W_C,
                A=a,
            )
            y = ssm.selective_scan(seq, sp, mode=self.discretization)
            y = _unorder_seq(y, direction, h, w)
            total = y if total is None else total + y
        avg = total * 0.25
        return self.out_proj(avg * T.silu(z))


class VssBlock(nn.Module):
    def __init__(self, dim, state_size, rng, ffn_expansion=2.0, tie_directions=False,
                 discretization="zoh_exact"):
        self.norm1 = nn.LayerNorm(dim)
        self.ss2d = Ss2d(dim, state_size, rng, tie_directions, discretization)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Ffn(dim, ffn_expansion, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.ss2d(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PatchMerge(nn.Module):
    """2x2 neighborhood concat (tl, tr, bl, br) then linear 4C -> 2C."""

    def __init__(self, channels, rng):
        self.proj = nn.Linear(4 * channels, 2 * channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"cannot merge odd grid {h}x{w}")
        quads = [
            x[:, 0::2, 0::2, :],
            x[:, 0::2, 1::2, :],
            x[:, 1::2, 0::2, :],
            x[:, 1::2, 1::2, :],
        ]
        return self.proj(T.concat(quads, axis=3))


class PatchExpand(nn.Module):
    """Linear C -> 2C, then pixel-shuffle to 2x resolution at C/2 channels."""

    def __init__(self, channels, rng):
        if channels % 2:
            raise ValueError("patch expansion needs even channels")
        self.proj = nn.Linear(channels, 2 * channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        out = self.proj(x)  # [B,h,w,2C] = [B,h,w,(2,2,C/2)]
        half = c // 2
        out = out.reshape(b, h, w, 2, 2, half)
        out = out.transpose((0, 1, 3, 2, 4, 5))
        return out.reshape(b, 2 * h, 2 * w, half)


class FinalProjection(nn.Module):
    """Pixel-shuffle the patch grid back to full resolution, 2 class channels."""

    def __init__(self, channels, patch_size, num_classes, rng):
        self.patch_size = patch_size
        self.num_classes = num_classes
        self.proj = nn.Linear(channels, num_classes * patch_size * patch_size, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        p = self.patch_size
        out = self.proj(x).reshape(b, h, w, p, p, self.num_classes)
        out = out.transpose((0, 1, 3, 2, 4, 5))
        out = out.reshape(b, h * p, w * p, self.num_classes)
        return out.transpose((0, 3, 1, 2))  # [B, classes, H, W]


class SpatialStream(nn.Module):
    """Four-stage encoder + mirrored decoder over VSS blocks.

    `stage_hook(stage_id, feat)` is called on each encoder stage output
    (channel-first [B, C, h, w]) and may return a replacement; skips capture
    whatever the hook returns, so injected context reaches the decoder too.
    """

    def __init__(self, cfg: SpatialStreamConfig, in_bands, rng, num_classes=2):
        self.cfg = cfg
        c = cfg.base_channels
        n = cfg.vss_per_stage

        def block(dim):
            return VssBlock(dim, cfg.state_size, rng, cfg.ffn_expansion,
                            cfg.tie_scan_directions, cfg.discretization)

        self.patch_embed = PatchEmbed(in_bands, c, cfg.patch_size, rng)
        self.enc_stages = [[block(cfg.stage_channels(s)) for _ in range(n)]
                           for s in range(1, NUM_STAGES + 1)]
        self.merges = [PatchMerge(cfg.stage_channels(s), rng) for s in range(1, NUM_STAGES)]
        depths = cfg.decoder_depths()
        self.dec_stages = [[block(cfg.stage_channels(NUM_STAGES - i)) for _ in range(depths[i])]
                           for i in range(NUM_STAGES)]
        self.expands = [PatchExpand(cfg.stage_channels(s), rng) for s in (4, 3, 2)]
        self.skip_fuses = [nn.Linear(2 * cfg.stage_channels(s), cfg.stage_channels(s), rng)
                           for s in (3, 2, 1)]
        self.final = FinalProjection(c, cfg.patch_size, num_classes, rng)

    def min_input(self) -> int:
        return self.cfg.patch_size * (1 << (NUM_STAGES - 1))

    def encode(self, x: Tensor, stage_hook=None) -> list[Tensor]:
        """Stage outputs (channel-last), hook applied, in stage order 1..4."""
        m = self.min_input()
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"input {x.shape[2]}x{x.shape[3]} must be divisible by {m}")
        feats = []
        f = self.patch_embed(x)
        for s in range(NUM_STAGES):
            if s > 0:
                f = self.merges[s - 1](f)
            for blk in self.enc_stages[s]:
                f = blk(f)
            if stage_hook is not None:
                nchw = f.transpose((0, 3, 1, 2))
                replaced = stage_hook(s + 1, nchw)
                if replaced is not None:
                    f = replaced.transpose((0, 2, 3, 1))
            feats.append(f)
        return feats

    def decode(self, feats: list[Tensor]) -> Tensor:
        f = feats[3]
        for blk in self.dec_stages[0]:
            f = blk(f)
        for i, level in enumerate((3, 2, 1)):
            f = self.expands[i](f)
            f = self.skip_fuses[i](T.concat([f, feats[level - 1]], axis=3))
            for blk in self.dec_stages[i + 1]:
                f = blk(f)
        return self.final(f)

    def forward(self, x: Tensor, stage_hook=None) -> Tensor:
        return self.decode(self.encode(x, stage_hook))
