"""Dual-stream segmenter: spatial U-net backbone with spectral token fusion.

The spectral stream turns the cube into per-pixel band tokens once per
forward pass; at each configured insertion stage its pooled projection is
concatenated onto the encoder feature (spatial channels first, spectral
channels after) and a pointwise linear maps back to the stage width.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import nn
from . import tensor as T
from .errors import ConfigError, NumericError
from .optim import Adam
from .serialize import read_tensors, write_tensors
from .spatial import SpatialStream, SpatialStreamConfig
from .spectral import SpectralProjector, SpectralStream, SpectralStreamConfig
from .tensor import Tensor

NUM_CLASSES = 2
DICE_EPS = 1e-5
INSERTION_STAGES = ("L1", "L2", "L3", "L4")


@dataclass
class ModelConfig:
    in_bands: int
    spatial: SpatialStreamConfig = field(default_factory=SpatialStreamConfig)
    spectral: SpectralStreamConfig = field(default_factory=SpectralStreamConfig)
    insertion: tuple[str, ...] = ("L2",)
    enable_spectral: bool = True

    def __post_init__(self):
        if isinstance(self.spatial, dict):
            self.spatial = SpatialStreamConfig(**self.spatial)
        if isinstance(self.spectral, dict):
            self.spectral = SpectralStreamConfig(**self.spectral)
        stages = tuple(dict.fromkeys(self.insertion))
        for s in stages:
            if s not in INSERTION_STAGES:
                raise ConfigError(f"insertion stage {s!r} not in {INSERTION_STAGES}")
        self.insertion = tuple(sorted(stages))
        if self.in_bands < 1:
            raise ConfigError("in_bands must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["insertion"] = list(self.insertion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["insertion"] = tuple(d.get("insertion", ("L2",)))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from None


class FusionSite(nn.Module):
    """Pooled spectral projection + post-concat pointwise linear for one stage.

    The post-concat linear starts as identity on the spatial half and zero on
    the spectral half: fusion is a no-op at initialization and the inserted
    stream fades in by gradient, so adding it never perturbs the backbone's
    starting point.
    """

    def __init__(self, embed_dim, stage_channels, rng):
        self.projector = SpectralProjector(embed_dim, stage_channels, rng)
        self.post = nn.Linear(2 * stage_channels, stage_channels, rng)
        w = np.zeros_like(self.post.weight.data)
        w[:stage_channels] = np.eye(stage_channels, dtype=w.dtype)
        self.post.weight.data = w


class DualStreamSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        # independent init streams per component, so the backbone draws the
        # same weights whether or not a spectral stream is configured
        r_spatial, r_spectral, r_fusion = rng.spawn(3)
        self.cfg = cfg
        self.spatial = SpatialStream(cfg.spatial, cfg.in_bands, r_spatial, NUM_CLASSES)
        self.fusion_stages: list[int] = sorted(int(s[1]) for s in cfg.insertion)
        if cfg.enable_spectral:
            self.spectral = SpectralStream(cfg.spectral, r_spectral)
            self.fusion_sites = [
                FusionSite(cfg.spectral.embed_dim, cfg.spatial.stage_channels(s),
                           r_fusion)
                for s in self.fusion_stages
            ]

    @property
    def fusion_active(self) -> bool:
        return self.cfg.enable_spectral and bool(self.fusion_stages)

    def _fusion_hook(self, tokens, batch, height, width):
        sites = dict(zip(self.fusion_stages, self.fusion_sites))

        def hook(stage: int, feat: Tensor):
            site = sites.get(stage)
            if site is None:
                return None
            spec = site.projector(tokens, batch, height, width, feat.shape[2], feat.shape[3])
            cat = T.concat([feat, spec], axis=1)
            merged = site.post(cat.transpose((0, 2, 3, 1)))
            return merged.transpose((0, 3, 1, 2))

        return hook

    def forward(self, x: Tensor) -> Tensor:
        """[B, S, H, W] cube batch -> [B, 2, H, W] class logits."""
        if x.shape[1] != self.cfg.in_bands:
            raise ValueError(f"expected {self.cfg.in_bands} bands, got {x.shape[1]}")
        if not self.fusion_active:
            return self.spatial(x)
        b, s, h, w = x.shape
        tokens = self.spectral(x)  # once per forward
        return self.spatial(x, self._fusion_hook(tokens, b, h, w))

    def encoder_features(self, x: Tensor) -> dict[str, Tensor]:
        """Post-fusion encoder stage outputs, channel-first, keyed "L1".."L4"."""
        captured: dict[str, Tensor] = {}
        inner = None
        if self.fusion_active:
            b, s, h, w = x.shape
            tokens = self.spectral(x)
            inner = self._fusion_hook(tokens, b, h, w)

        def hook(stage, feat):
            replaced = inner(stage, feat) if inner is not None else None
            captured[f"L{stage}"] = replaced if replaced is not None else feat
            return replaced

        self.spatial.encode(x, hook)
        return captured


def predict_mask(logits: Tensor | np.ndarray) -> np.ndarray:
    """Argmax with ties to background: foreground iff its logit strictly wins."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (arr[:, 1] > arr[:, 0]).astype(np.uint8)


@dataclass
class LossReport:
    total: Tensor
    dice: Tensor
    ce: Tensor

    def floats(self) -> tuple[float, float, float]:
        return self.total.item(), self.dice.item(), self.ce.item()


def segmentation_loss(logits: Tensor, mask: np.ndarray) -> LossReport:
    """Smoothed dice on the foreground probability plus mean cross-entropy."""
    b, c, h, w = logits.shape
    if c != NUM_CLASSES:
        raise ValueError(f"expected {NUM_CLASSES} class channels, got {c}")
    mask = np.asarray(mask)
    if mask.shape != (b, h, w):
        raise ValueError(f"mask {mask.shape} does not match logits {(b, h, w)}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    m = mask.astype(logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    onehot = np.stack([1.0 - m, m], axis=1)
    ce = -(logp * onehot).sum() * (1.0 / (b * h * w))
    p_fg = T.texp(logp[:, 1])
    inter = (p_fg * m).sum()
    dice = 1.0 - (inter * 2.0 + DICE_EPS) / (p_fg.sum() + float(m.sum()) + DICE_EPS)
    return LossReport(total=dice + ce, dice=dice, ce=ce)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 8
    lr: float = 1e-3  # not a published value; chosen default
    seed: int = 0
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from None


@dataclass
class TrainResult:
    model: DualStreamSegmenter
    history: list[dict]
    checkpoint_path: Path | None
    log_path: Path | None


def _batch_arrays(cubes, idxs, augment_ops, rng):
    xs, ms = [], []
    for i in idxs:
        c = cubes[i]
        arr, mask = c.data, c.mask
        if mask is None:
            raise ValueError("training cubes need masks")
        if augment_ops:
            arr, mask = data_mod.augment(arr, mask, augment_ops, int(rng.integers(2**31)))
        xs.append(arr)
        ms.append(mask)
    return np.stack(xs), np.stack(ms)


def train(cubes, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Seeded end-to-end training; same inputs give bit-identical artifacts.

    Writes checkpoint.spsc and loss.csv under out_dir when given. Aborts with
    NumericError if the loss goes non-finite.
    """
    if not cubes:
        raise ValueError("empty training set")
    rng = np.random.default_rng(train_cfg.seed)
    model = DualStreamSegmenter(model_cfg, rng)
    params = model.parameters()
    opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.eps)
    augment_ops = data_mod.AUGMENT_OPS if train_cfg.augment else ()

    history = []
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(cubes))
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), train_cfg.batch):
            idxs = order[start : start + train_cfg.batch]
            x_arr, m_arr = _batch_arrays(cubes, idxs, augment_ops, rng)
            logits = model(Tensor(x_arr))
            report = segmentation_loss(logits, m_arr)
            total, dice, ce = report.floats()
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {batches}: "
                    f"total={total} dice={dice} ce={ce}"
                )
            opt.zero_grad()
            report.total.backward()
            opt.step()
            sums += (total, dice, ce)
            batches += 1
        history.append(
            {
                "epoch": epoch,
                "total": sums[0] / batches,
                "dice": sums[1] / batches,
                "ce": sums[2] / batches,
                "wall_s": time.perf_counter() - t0,
            }
        )

    ckpt_path = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.spsc"
        save_checkpoint(model, ckpt_path)
        log_path = out_dir / "loss.csv"
        # wall_s stays out of the CSV so reruns with the same seed are
        # bit-identical on disk.
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "total", "dice", "ce"],
                                    extrasaction="ignore")
            writer.writeheader()
            writer.writerows(history)
    return TrainResult(model, history, ckpt_path, log_path)


CONFIG_KEY = "__config__"


def save_checkpoint(model: DualStreamSegmenter, path):
    arrays = dict(model.state())
    blob = json.dumps({"model": model.cfg.to_dict()}, sort_keys=True).encode("utf-8")
    arrays[CONFIG_KEY] = np.frombuffer(blob, dtype=np.uint8)
    write_tensors(path, arrays)


def load_checkpoint(path) -> DualStreamSegmenter:
    arrays = read_tensors(path)
    if CONFIG_KEY not in arrays:
        raise ConfigError(f"{path}: checkpoint has no embedded config")
    cfg_dict = json.loads(arrays.pop(CONFIG_KEY).tobytes().decode("utf-8"))
    cfg = ModelConfig.from_dict(cfg_dict["model"])
    model = DualStreamSegmenter(cfg)
    model.load_state(arrays)
    return model
