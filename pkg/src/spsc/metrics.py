"""Segmentation metrics, channel redundancy, analytic MACs, throughput.

Undefined metric values (empty masks, zero denominators) are reported as None
and excluded from aggregation rather than silently coerced.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .model import ModelConfig
from .spatial import NUM_STAGES
from .tensor import Tensor, no_grad


def _as_bool_mask(m, name):
    arr = np.asarray(m)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def dsc(pred, gt) -> float:
    """Dice coefficient 2|P&G| / (|P|+|G|); 1.0 when both masks are empty."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def hausdorff(pred, gt, percentile: float = 100.0) -> float | None:
    """Symmetric Hausdorff distance in pixels, exact Euclidean metric.

    percentile=100 is the classic max-of-sup distance; 95 gives the robust
    variant. Returns None when either mask is empty.
    """
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return None
    d_to_g = distance_transform_edt(~g)
    d_to_p = distance_transform_edt(~p)
    d_pg = d_to_g[p]
    d_gp = d_to_p[g]
    if percentile >= 100.0:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def confusion_rates(pred, gt) -> tuple[float | None, float | None]:
    """(specificity, sensitivity); None where the denominator is zero."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int((p & g).sum())
    tn = int((~p & ~g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    spec = tn / (tn + fp) if tn + fp else None
    sens = tp / (tp + fn) if tp + fn else None
    return spec, sens


def channel_redundancy(features, return_excluded: bool = False):
    """Mean |Pearson r| over all channel pairs of a [B, C, H, W] feature map.

    Zero-variance channels cannot be correlated and are excluded (their count
    is available via return_excluded). Needs at least two usable channels.
    """
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim != 4:
        raise ValueError(f"expected [B, C, H, W], got {arr.shape}")
    b, c, h, w = arr.shape
    flat = arr.transpose(1, 0, 2, 3).reshape(c, b * h * w).astype(np.float64)
    std = flat.std(axis=1)
    usable = std > 0
    excluded = int((~usable).sum())
    flat = flat[usable]
    if flat.shape[0] < 2:
        raise ValueError(f"need >= 2 channels with variance, got {flat.shape[0]}")
    corr = np.corrcoef(flat)
    iu = np.triu_indices(flat.shape[0], k=1)
    value = float(np.abs(corr[iu]).mean())
    if return_excluded:
        return value, excluded
    return value


# -- analytic MACs -------------------------------------------------------------
#
# Formula sheet (docs/formats.md): linear = positions*in*out;
# depthwise conv = K*K*C*H*W; scan = L*D*N per directional pass (a circular
# pass over S tokens scans 2S). Elementwise work, normalization and softmax
# are excluded. Counts are for a single cube (batch 1).


def count_macs_breakdown(cfg: ModelConfig, height: int, width: int) -> dict[str, int]:
    acc = {"linear": 0, "dwconv": 0, "scan": 0}
    sp = cfg.spatial
    p = sp.patch_size
    if height % (p * (1 << (NUM_STAGES - 1))) or width % (p * (1 << (NUM_STAGES - 1))):
        raise ValueError("input does not tile the stage pyramid")
    hp, wp = height // p, width // p
    s_bands = cfg.in_bands
    r = sp.ffn_expansion

    def ffn_macs(L, dim):
        hidden = int(dim * r)
        return 2 * L * dim * hidden

    def vss_macs(dim, h, w):
        L = h * w
        lin = L * dim * 2 * dim + L * dim * dim  # in_proj + out_proj
        lin += 4 * (L * dim * dim + 2 * L * dim * sp.state_size)
        lin += ffn_macs(L, dim)
        scan = 4 * L * dim * sp.state_size
        return lin, scan

    acc["linear"] += hp * wp * (s_bands * p * p) * sp.base_channels  # patch embed

    h, w = hp, wp
    n = sp.vss_per_stage
    enc_dims = []
    for stage in range(1, NUM_STAGES + 1):
        dim = sp.stage_channels(stage)
        if stage > 1:
            prev = sp.stage_channels(stage - 1)
            acc["linear"] += (h // 2) * (w // 2) * (4 * prev) * (2 * prev)  # merge
            h, w = h // 2, w // 2
        for _ in range(n):
            lin, scan = vss_macs(dim, h, w)
            acc["linear"] += lin
            acc["scan"] += scan
        enc_dims.append((dim, h, w))

    depths = sp.decoder_depths()
    for _ in range(depths[0]):
        lin, scan = vss_macs(enc_dims[3][0], h, w)
        acc["linear"] += lin
        acc["scan"] += scan
    for i, level in enumerate((3, 2, 1)):
        dim_in = sp.stage_channels(level + 1)
        dim = sp.stage_channels(level)
        acc["linear"] += h * w * dim_in * 2 * dim_in  # expand
        h, w = h * 2, w * 2
        acc["linear"] += h * w * (2 * dim) * dim  # skip fuse
        for _ in range(depths[i + 1]):
            lin, scan = vss_macs(dim, h, w)
            acc["linear"] += lin
            acc["scan"] += scan
    acc["linear"] += hp * wp * sp.base_channels * (2 * p * p)  # final projection

    if cfg.enable_spectral and cfg.insertion:
        spe = cfg.spectral
        e, n_state = spe.embed_dim, spe.state_size
        hw = height * width
        acc["linear"] += s_bands * hw * 1 * e  # lift
        acc["dwconv"] += spe.dwconv_kernel**2 * e * height * width * s_bands
        if spe.scan_mode == "unidirectional":
            s_eff = s_bands
        elif spe.scan_mode == "identity":
            s_eff = 0
        else:  # circular doubles the pass; bidirectional runs two passes
            s_eff = 2 * s_bands
        if s_eff:
            if spe.selective:
                acc["linear"] += hw * s_eff * e * e  # W_delta
                acc["linear"] += 2 * hw * s_eff * e * n_state  # W_B, W_C
            acc["scan"] += hw * s_eff * e * n_state
        hidden = int(e * spe.ffn_expansion)
        acc["linear"] += 2 * hw * s_bands * e * hidden  # ffn
        for key in cfg.insertion:
            stage = int(key[1])
            dim = sp.stage_channels(stage)
            sh = hp // (1 << (stage - 1))
            sw = wp // (1 << (stage - 1))
            acc["linear"] += sh * sw * e * dim  # projector
            acc["linear"] += sh * sw * (2 * dim) * dim  # post-concat
    return acc


def count_macs(cfg: ModelConfig, height: int, width: int) -> int:
    return sum(count_macs_breakdown(cfg, height, width).values())


def depthwise_conv_macs(kernel: int, channels: int, height: int, width: int) -> int:
    return kernel * kernel * channels * height * width


def linear_macs(positions: int, in_dim: int, out_dim: int) -> int:
    return positions * in_dim * out_dim


def scan_macs(length: int, dim: int, state: int) -> int:
    return length * dim * state


# -- throughput ----------------------------------------------------------------


@dataclass
class ThroughputResult:
    mean_images_per_s: float
    std_images_per_s: float
    runs: list[float]


def throughput(model, batches: list[np.ndarray], warmup: int = 1, repeats: int = 3) -> ThroughputResult:
    """Forward-only images/second over `repeats` timed sweeps of `batches`."""
    if not batches:
        raise ValueError("need at least one batch")
    n_images = sum(b.shape[0] for b in batches)
    with no_grad():
        for _ in range(warmup):
            for b in batches:
                model(Tensor(b))
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for b in batches:
                model(Tensor(b))
            runs.append(n_images / (time.perf_counter() - t0))
    return ThroughputResult(float(np.mean(runs)), float(np.std(runs)), runs)


# -- per-image evaluation --------------------------------------------------------


@dataclass
class SegReport:
    dsc: float
    hausdorff: float | None
    specificity: float | None
    sensitivity: float | None

    def to_dict(self) -> dict:
        return {
            "dsc": self.dsc,
            "hausdorff": self.hausdorff,
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
        }


def evaluate_pair(pred, gt, hd_percentile: float = 100.0) -> SegReport:
    spec, sens = confusion_rates(pred, gt)
    return SegReport(
        dsc=dsc(pred, gt),
        hausdorff=hausdorff(pred, gt, hd_percentile),
        specificity=spec,
        sensitivity=sens,
    )


def aggregate_reports(reports: list[SegReport]) -> dict:
    """Mean of each metric; None entries are excluded (and counted)."""
    if not reports:
        raise ValueError("nothing to aggregate")
    out = {"n": len(reports)}
    for key in ("dsc", "hausdorff", "specificity", "sensitivity"):
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(values)) if values else None
        out[f"{key}_excluded"] = len(reports) - len(values)
    return out
