"""Hyperspectral cube container, file format, synthetic data, splits.

Cube file layout:
    8 bytes  magic b"SPSCHSI1"
    4 bytes  u32 little-endian header length
    N bytes  UTF-8 JSON header {height, width, bands, dtype:"f32",
             wavelengths, has_mask}
    payload  float32 little-endian, band-sequential (all of band 0, then
             band 1, ...), then an optional height*width uint8 mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, DataError, FormatMismatchError, TruncatedPayloadError

CUBE_MAGIC = b"SPSCHSI1"

AUGMENT_OPS = ("rot90", "rot180", "rot270", "flip_h", "flip_v")


@dataclass
class HsiCube:
    """data: [bands, height, width] float32; mask: optional [height, width] uint8."""

    data: np.ndarray
    wavelengths: np.ndarray
    mask: np.ndarray | None = None
    group: str | None = None  # provenance key for group-disjoint splits

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"cube data must be [bands, H, W], got {self.data.shape}")
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.wavelengths.shape != (self.data.shape[0],):
            raise DataError(
                f"{self.wavelengths.size} wavelengths for {self.data.shape[0]} bands"
            )
        if np.any(np.diff(self.wavelengths) <= 0):
            raise DataError("wavelengths must be strictly increasing")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.data.shape[1:]:
                raise DataError(f"mask {self.mask.shape} does not match {self.data.shape[1:]}")
            if not np.isin(self.mask, (0, 1)).all():
                raise DataError("mask must be binary")

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


def write_cube(path, cube: HsiCube):
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32",
        "wavelengths": [float(v) for v in cube.wavelengths],
        "has_mask": cube.mask is not None,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC)
        f.write(len(hbytes).to_bytes(4, "little"))
        f.write(hbytes)
        f.write(cube.data.astype("<f4", copy=False).tobytes())
        if cube.mask is not None:
            f.write(cube.mask.tobytes())


def read_cube(path) -> HsiCube:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise TruncatedPayloadError(f"{path}: shorter than any valid header")
    if blob[:8] != CUBE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:8]!r}")
    n = int.from_bytes(blob[8:12], "little")
    if len(blob) < 12 + n:
        raise TruncatedPayloadError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + n].decode("utf-8"))
        h = int(header["height"])
        w = int(header["width"])
        s = int(header["bands"])
        dtype = header["dtype"]
        wavelengths = [float(v) for v in header["wavelengths"]]
        has_mask = bool(header["has_mask"])
    except (KeyError, TypeError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatMismatchError(f"{path}: unreadable header: {e}") from None
    if dtype != "f32":
        raise FormatMismatchError(f"{path}: unsupported dtype {dtype!r}")
    if len(wavelengths) != s:
        raise FormatMismatchError(f"{path}: {len(wavelengths)} wavelengths for {s} bands")
    payload = blob[12 + n :]
    need = s * h * w * 4 + (h * w if has_mask else 0)
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload {len(payload)} bytes, need {need}")
    if len(payload) > need:
        raise FormatMismatchError(f"{path}: {len(payload) - need} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4", count=s * h * w).reshape(s, h, w).copy()
    mask = None
    if has_mask:
        mask = np.frombuffer(payload, dtype="u1", count=h * w, offset=s * h * w * 4)
        mask = mask.reshape(h, w).copy()
        if not np.isin(mask, (0, 1)).all():
            raise FormatMismatchError(f"{path}: mask is not binary")
    try:
        return HsiCube(data=data, wavelengths=np.asarray(wavelengths), mask=mask)
    except DataError as e:
        raise FormatMismatchError(f"{path}: {e}") from None


def import_external(path) -> HsiCube:
    """Conversion contract for bringing external captures into this format.

    Not implemented: real acquisitions vary too much to guess at. A converter
    must produce data as [bands, H, W] float32 in band-sequential order,
    strictly increasing wavelengths in nm, and (optionally) an H x W binary
    mask, then hand them to HsiCube / write_cube. Spatial resizing, band
    selection and calibration happen before that hand-off.
    """
    raise NotImplementedError(
        f"no importer for {path}: convert to the native cube format first "
        "(see docstring for the contract)"
    )


# -- augmentation ------------------------------------------------------------


def apply_transform(data: np.ndarray, mask: np.ndarray | None, op: str):
    """Apply one named spatial transform identically to cube bands and mask.

    data is [..., H, W]; rotations are counter-clockwise in array axes.
    """
    if op in ("rot90", "rot270") and data.shape[-2] != data.shape[-1]:
        raise DataError(f"{op} needs a square grid, got {data.shape[-2]}x{data.shape[-1]}")
    if op == "rot90":
        k = 1
    elif op == "rot180":
        k = 2
    elif op == "rot270":
        k = 3
    elif op == "flip_h":  # mirror columns
        out = np.ascontiguousarray(data[..., ::-1])
        m = None if mask is None else np.ascontiguousarray(mask[..., ::-1])
        return out, m
    elif op == "flip_v":  # mirror rows
        out = np.ascontiguousarray(data[..., ::-1, :])
        m = None if mask is None else np.ascontiguousarray(mask[..., ::-1, :])
        return out, m
    else:
        raise ValueError(f"unknown augmentation op {op!r}")
    out = np.ascontiguousarray(np.rot90(data, k, axes=(-2, -1)))
    m = None if mask is None else np.ascontiguousarray(np.rot90(mask, k, axes=(-2, -1)))
    return out, m


def augment(data: np.ndarray, mask: np.ndarray | None, ops, seed: int):
    """Pick one op from `ops` (or no-op) with a seeded draw and apply it."""
    ops = list(ops)
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ValueError(f"unknown augmentation op {op!r}")
    rng = np.random.default_rng(seed)
    choice = rng.integers(0, len(ops) + 1)  # == len(ops) means identity
    if choice == len(ops):
        return data.copy(), None if mask is None else mask.copy()
    return apply_transform(data, mask, ops[choice])


# -- splits ------------------------------------------------------------------


def make_splits(groups: list[str], ratios=(3, 1, 1), seed: int = 0) -> dict[str, list[int]]:
    """Group-disjoint index split. `groups[i]` is item i's group key.

    Whole groups are shuffled (seeded) and dealt so the group counts match the
    ratio within +-1 per part. Returns {"train": [...], "val": [...],
    "test": [...]} with every index present exactly once.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    uniq = sorted(set(groups))
    if len(uniq) < 3:
        raise DataError(f"need at least 3 groups for disjoint splits, got {len(uniq)}")
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    total = float(sum(ratios))
    g = len(uniq)
    n_train = int(round(g * ratios[0] / total))
    n_val = int(round(g * ratios[1] / total))
    n_train = max(1, min(n_train, g - 2))
    n_val = max(1, min(n_val, g - n_train - 1))
    parts = {
        "train": set(order[:n_train]),
        "val": set(order[n_train : n_train + n_val]),
        "test": set(order[n_train + n_val :]),
    }
    out = {k: [] for k in parts}
    for i, key in enumerate(groups):
        for part, members in parts.items():
            if key in members:
                out[part].append(i)
                break
    return out


# -- synthetic generator -----------------------------------------------------


@dataclass
class SyntheticSpec:
    """Recipe for synthetic cubes: two class signatures plus confounds.

    Per pixel: spectrum = band_gain * signature[class] + brightness + noise,
    where brightness is white per-pixel jitter of amplitude
    texture_gain*noise_sigma shared by both classes, and band_gain is an
    optional smooth per-image per-band gain (1 +- band_jitter). noise_sigma=0
    therefore reproduces the exact class signatures.
    """

    bands: int
    height: int
    width: int
    signatures: np.ndarray  # [2, bands]; row 0 background, row 1 foreground
    noise_sigma: float = 0.02
    texture_gain: float = 0.0
    band_jitter: float = 0.0
    blob_count: tuple[int, int] = (2, 4)
    blob_radius: tuple[float, float] = (5.0, 12.0)
    fg_fraction: tuple[float, float] | None = None
    wavelengths: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        self.signatures = np.asarray(self.signatures, dtype=np.float64)
        if self.signatures.shape != (2, self.bands):
            raise DataError(f"signatures must be [2, {self.bands}]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if np.array_equal(self.signatures[0], self.signatures[1]):
            raise DataError("class signatures are identical; nothing to segment")
        if self.wavelengths is None:
            self.wavelengths = np.linspace(450.0, 1000.0, self.bands)

    def to_json(self) -> dict:
        return {
            "bands": self.bands,
            "height": self.height,
            "width": self.width,
            "signatures": self.signatures.tolist(),
            "noise_sigma": self.noise_sigma,
            "texture_gain": self.texture_gain,
            "band_jitter": self.band_jitter,
            "blob_count": list(self.blob_count),
            "blob_radius": list(self.blob_radius),
            "fg_fraction": None if self.fg_fraction is None else list(self.fg_fraction),
            "wavelengths": self.wavelengths.tolist(),
            "name": self.name,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["signatures"] = np.asarray(d["signatures"])
        d["blob_count"] = tuple(d.get("blob_count", (2, 4)))
        d["blob_radius"] = tuple(d.get("blob_radius", (5.0, 12.0)))
        if d.get("fg_fraction") is not None:
            d["fg_fraction"] = tuple(d["fg_fraction"])
        if d.get("wavelengths") is not None:
            d["wavelengths"] = np.asarray(d["wavelengths"])
        return cls(**d)


def _gauss(t, mu, sig):
    return np.exp(-0.5 * ((t - mu) / sig) ** 2)


def _base_curve(t):
    return 0.55 + 0.25 * _gauss(t, 0.35, 0.18) + 0.20 * _gauss(t, 0.75, 0.20)


def preset_spec(name: str, bands: int = 12, size: int = 64) -> SyntheticSpec:
    """Built-in recipes: "separable" and "spectral-only"."""
    t = np.linspace(0.0, 1.0, bands)
    base = _base_curve(t)
    if name == "separable":
        # Wide gap between curves; any sensible classifier should separate.
        dip = 0.18 * _gauss(t, 0.55, 0.10)
        sig = np.stack([base, base - dip + 0.10])
        return SyntheticSpec(
            bands=bands, height=size, width=size, signatures=sig,
            noise_sigma=0.01, texture_gain=0.0, band_jitter=0.0,
            blob_count=(2, 4), blob_radius=(size * 0.08, size * 0.2),
            name=name,
        )
    if name == "spectral-only":
        # Class difference is a zero-sum ripple (slow cosine plus a narrow
        # absorption-style dip) far below the per-pixel brightness jitter, so
        # single-band marginals nearly coincide while the full spectrum
        # separates via a matched filter that cancels brightness exactly.
        # The brightness term dominates every band's variance and washes the
        # worst band's marginal gap below the KS bound without touching the
        # matched-filter SNR.
        sigma = 0.02
        b = np.arange(bands)
        ripple = (np.cos(2 * np.pi * b / bands * 2.5)
                  + 2.6 * np.exp(-0.5 * ((b - 8) / 0.8) ** 2))
        ripple = ripple - ripple.mean()
        ripple = ripple / np.linalg.norm(ripple) * (4.75 * sigma)
        sig = np.stack([base, base + ripple])
        return SyntheticSpec(
            bands=bands, height=size, width=size, signatures=sig,
            noise_sigma=sigma, texture_gain=20.0, band_jitter=0.015,
            blob_count=(3, 6), blob_radius=(size * 0.12, size * 0.3),
            fg_fraction=(0.40, 0.60),
            name=name,
        )
    raise DataError(f"unknown preset {name!r}")


def _random_mask(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]

    def draw():
        mask = np.zeros((h, w), dtype=bool)
        count = rng.integers(spec.blob_count[0], spec.blob_count[1] + 1)
        for _ in range(count):
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            ry = rng.uniform(*spec.blob_radius)
            rx = rng.uniform(*spec.blob_radius)
            th = rng.uniform(0, np.pi)
            c, s = np.cos(th), np.sin(th)
            u = (xx - cx) * c + (yy - cy) * s
            v = -(xx - cx) * s + (yy - cy) * c
            mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        return mask

    if spec.fg_fraction is None:
        return draw().astype(np.uint8)
    lo, hi = spec.fg_fraction
    for _ in range(200):
        mask = draw()
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask.astype(np.uint8)
    raise DataError(f"could not hit foreground fraction [{lo}, {hi}] in 200 draws")


def _smooth_band_gain(bands: int, jitter: float, rng) -> np.ndarray:
    if jitter <= 0:
        return np.ones(bands)
    # Low-frequency gain: a few random cosines over the band axis.
    t = np.linspace(0.0, 1.0, bands)
    g = np.zeros(bands)
    for k in (1, 2):
        g += rng.normal() * np.cos(np.pi * k * t + rng.uniform(0, np.pi))
    g /= max(np.abs(g).max(), 1e-9)
    return 1.0 + jitter * g


def generate_synthetic(spec: SyntheticSpec, n: int, seed: int) -> list[HsiCube]:
    """Deterministic per (spec, n, seed). Each cube gets group key "g{i}"."""
    rng = np.random.default_rng(seed)
    cubes = []
    for i in range(n):
        mask = _random_mask(spec, rng)
        sig = spec.signatures  # [2, S]
        # noise_sigma == 0 silences every stochastic term: spectra are then
        # exactly the class signatures.
        jitter = spec.band_jitter if spec.noise_sigma > 0 else 0.0
        gain = _smooth_band_gain(spec.bands, jitter, rng)  # [S]
        clean = sig[mask.astype(np.int64)]  # [H, W, S]
        cube = clean * gain
        if spec.noise_sigma > 0:
            brightness = rng.normal(0.0, spec.texture_gain * spec.noise_sigma,
                                    size=(spec.height, spec.width, 1))
            noise = rng.normal(0.0, spec.noise_sigma,
                               size=(spec.height, spec.width, spec.bands))
            cube = cube + brightness + noise
        data = np.ascontiguousarray(cube.transpose(2, 0, 1), dtype=np.float32)
        cubes.append(
            HsiCube(data=data, wavelengths=spec.wavelengths.copy(), mask=mask, group=f"g{i}")
        )
    return cubes


# -- oracle classifiers (generation-time checks) ------------------------------


def best_single_band_accuracy(cubes: list[HsiCube]) -> float:
    """Best threshold accuracy over every (band, direction) pair.

    Upper-bounds any monotone single-band pixel classifier, including 1-D
    logistic regression.
    """
    best = 0.0
    bands = cubes[0].bands
    labels = np.concatenate([c.mask.reshape(-1) for c in cubes]).astype(bool)
    n = labels.size
    n_pos = int(labels.sum())
    for b in range(bands):
        values = np.concatenate([c.data[b].reshape(-1) for c in cubes])
        order = np.argsort(values, kind="stable")
        sorted_labels = labels[order]
        # pos_below[i]: positives among the i smallest values
        pos_below = np.concatenate([[0], np.cumsum(sorted_labels)])
        k = np.arange(n + 1)
        # predict positive above the cut
        acc_hi = ((n_pos - pos_below) + (k - pos_below)) / n
        # predict positive below the cut
        acc_lo = (pos_below + ((n - k) - (n_pos - pos_below))) / n
        best = max(best, float(acc_hi.max()), float(acc_lo.max()))
    return best


def nearest_signature_accuracy(cubes: list[HsiCube], spec: SyntheticSpec) -> float:
    """Pixel accuracy of arg-min Euclidean distance to the class signatures."""
    correct = 0
    total = 0
    sig = spec.signatures  # [2, S]
    for c in cubes:
        x = c.data.reshape(c.bands, -1).T.astype(np.float64)  # [HW, S]
        d0 = ((x - sig[0]) ** 2).sum(axis=1)
        d1 = ((x - sig[1]) ** 2).sum(axis=1)
        pred = d1 < d0
        correct += int((pred == c.mask.reshape(-1).astype(bool)).sum())
        total += pred.size
    return correct / total
