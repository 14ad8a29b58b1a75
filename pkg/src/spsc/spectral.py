"""Spectral stream: per-band lift, depthwise conv, band-axis scan, FFN.

The band axis is treated as a sequence: every pixel yields S tokens of width
`embed_dim`, and a state-space scan runs along the band order. Input cubes are
[B, S, H, W]; the stream's output is the token tensor [(B*H*W), S, embed_dim].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import ssm
from . import tensor as T
from .tensor import Tensor

SCAN_MODES = ("unidirectional", "circular", "bidirectional", "identity")


@dataclass
class SpectralStreamConfig:
    embed_dim: int = 16
    scan_mode: str = "circular"
    selective: bool = True
    dwconv_kernel: int = 3
    ffn_expansion: float = 2.0
    state_size: int = 8
    discretization: str = "zoh_exact"

    def __post_init__(self):
        if self.scan_mode not in SCAN_MODES:
            raise ValueError(f"scan_mode must be one of {SCAN_MODES}, got {self.scan_mode!r}")
        if self.dwconv_kernel % 2 == 0 or self.dwconv_kernel < 1:
            raise ValueError("dwconv_kernel must be odd and positive")
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")
        if self.discretization not in ssm.DISCRETIZATION_MODES:
            raise ValueError(f"unknown discretization {self.discretization!r}")


def fold_tokens(x: Tensor, batch: int) -> Tensor:
    """[(B*S), H, W, E] -> [(B*H*W), S, E]. Pure reshape/transpose, lossless."""
    bs, h, w, e = x.shape
    s = bs // batch
    if s * batch != bs:
        raise ValueError(f"leading dim {bs} not divisible by batch {batch}")
    x = x.reshape(batch, s, h, w, e)
    x = x.transpose((0, 2, 3, 1, 4))
    return x.reshape(batch * h * w, s, e)


def unfold_tokens(tokens: Tensor, batch: int, height: int, width: int) -> Tensor:
    """[(B*H*W), S, E] -> [(B*S), H, W, E], inverse of fold_tokens."""
    bhw, s, e = tokens.shape
    if bhw != batch * height * width:
        raise ValueError(f"token count {bhw} != {batch}*{height}*{width}")
    x = tokens.reshape(batch, height, width, s, e)
    x = x.transpose((0, 3, 1, 2, 4))
    return x.reshape(batch * s, height, width, e)


class FixedScanParams(nn.Module):
    """Directly trainable discrete (A_bar, B_bar, C_bar), each [D, N].

    Nothing constrains |A_bar| < 1 during training; at desk scale short runs
    keep it tame, and tests that need exact values set the tensors directly.
    """

    def __init__(self, d_model, d_state, rng):
        self.A_bar = Tensor(
            rng.uniform(0.5, 0.95, size=(d_model, d_state)).astype(np.float32), requires_grad=True
        )
        self.B_bar = nn._uniform(rng, (d_model, d_state), 1.0 / np.sqrt(d_state))
        self.C_bar = nn._uniform(rng, (d_model, d_state), 1.0 / np.sqrt(d_state))


class SpectralScan(nn.Module):
    """Band-sequence scan with selectable direction handling.

    unidirectional: one causal pass over the S tokens.
    circular: scan the doubled sequence [T;T] and keep positions S..2S-1, so
        every band sees every other band with wrap-around context.
    bidirectional: forward pass plus a reversed pass, summed.
    identity: tokens pass through untouched (diagnostic).
    """

    def __init__(self, cfg: SpectralStreamConfig, rng):
        self.cfg = cfg
        if cfg.scan_mode == "identity":
            return
        if cfg.selective:
            self.proj = ssm.SelectiveProjections(cfg.embed_dim, cfg.state_size, rng)
        else:
            self.fixed = FixedScanParams(cfg.embed_dim, cfg.state_size, rng)

    def _scan_once(self, seq: Tensor) -> Tensor:
        if self.cfg.selective:
            sp = ssm.selective_parameterize(seq, self.proj)
            return ssm.selective_scan(seq, sp, mode=self.cfg.discretization)
        d = ssm.DiscreteSsm(A_bar=self.fixed.A_bar, B_bar=self.fixed.B_bar, C=self.fixed.C_bar)
        y, _ = ssm.scan_parallel(d, seq)
        return y

    def forward(self, tokens: Tensor) -> Tensor:
        mode = self.cfg.scan_mode
        if mode == "identity":
            return tokens
        if mode == "unidirectional":
            return self._scan_once(tokens)
        if mode == "circular":
            s = tokens.shape[1]
            doubled = T.concat([tokens, tokens], axis=1)
            return self._scan_once(doubled)[:, s:]
        # bidirectional
        fwd = self._scan_once(tokens)
        bwd = self._scan_once(tokens.flip(1)).flip(1)
        return fwd + bwd


class SpectralStream(nn.Module):
    def __init__(self, cfg: SpectralStreamConfig, rng):
        self.cfg = cfg
        e = cfg.embed_dim
        # Pointwise 1 -> E lift, shared across bands and pixels.
        self.lift = nn.Linear(1, e, rng)
        k = cfg.dwconv_kernel
        self.dw_kernel = Tensor(
            (rng.uniform(-1.0, 1.0, size=(e, 1, k, k)) / k).astype(np.float32), requires_grad=True
        )
        self.norm1 = nn.LayerNorm(e)
        self.scan = SpectralScan(cfg, rng)
        self.norm2 = nn.LayerNorm(e)
        self.ffn = nn.Ffn(e, cfg.ffn_expansion, rng)

    def embed(self, x: Tensor) -> Tensor:
        """[B, S, H, W] -> [(B*S), H, W, E], band index folded into the batch."""
        if x.ndim != 4:
            raise ValueError(f"expected [B, S, H, W], got {x.shape}")
        b, s, h, w = x.shape
        flat = x.reshape(b * s, h, w, 1)
        return self.lift(flat)

    def dwconv(self, x: Tensor) -> Tensor:
        """Depthwise conv over the spatial extent of each lifted band."""
        nchw = x.transpose((0, 3, 1, 2))
        out = T.conv2d_depthwise(nchw, self.dw_kernel)
        return out.transpose((0, 2, 3, 1))

    def forward(self, x: Tensor) -> Tensor:
        b, s, h, w = x.shape
        lifted = self.dwconv(self.embed(x))
        tokens = fold_tokens(lifted, b)  # the flatten step of the residual
        mixed = self.scan(self.norm1(tokens)) + tokens
        return self.ffn(self.norm2(mixed)) + mixed


class SpectralProjector(nn.Module):
    """Pool stream tokens down to one spatial stage: mean over bands, average
    pool to (h, w), layer norm, pointwise linear to out_channels. The norm
    matches feature scale across streams before fusion, so intensity-scale
    nuisance in the cube cannot dominate the injected channels. Invented
    plumbing; the re-entry resolution is not constrained elsewhere."""

    def __init__(self, embed_dim, out_channels, rng):
        self.norm = nn.LayerNorm(embed_dim)
        self.proj = nn.Linear(embed_dim, out_channels, rng)

    def forward(self, tokens: Tensor, batch, height, width, out_h, out_w) -> Tensor:
        if height % out_h or width % out_w:
            raise ValueError(f"target {out_h}x{out_w} must divide source {height}x{width}")
        bhw, s, e = tokens.shape
        if bhw != batch * height * width:
            raise ValueError(f"token count {bhw} != {batch}*{height}*{width}")
        grid = tokens.mean(axis=1).reshape(batch, height, width, e)
        fh, fw = height // out_h, width // out_w
        grid = grid.reshape(batch, out_h, fh, out_w, fw, e).mean(axis=(2, 4))
        out = self.proj(self.norm(grid))  # [B, out_h, out_w, C]
        return out.transpose((0, 3, 1, 2))
