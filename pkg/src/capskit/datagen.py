"""Synthetic defect images and the crop-sampling protocols.

A raw image is a smooth seeded value-noise texture with a few dark elliptical
spots stamped on it. Training crops are drawn at random (defective:normal =
3:1); test crops come from a one-pixel sliding window and are sorted into a
middle set (every defect pixel inside the inner window) and a boundary set
(some defect pixel in the margin band).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

REGIONS = ("middle", "boundary", "train")


@dataclass(frozen=True)
class RawSpec:
    size: int = 192
    n_defects: tuple = (1, 3)  # inclusive range
    cell: int = 16  # value-noise lattice spacing for the coarsest octave
    octaves: int = 3
    texture_amp: float = 0.12
    radius: tuple = (3.0, 7.0)
    contrast: tuple = (0.12, 0.25)
    edge_fraction: float = 0.35  # contrast kept at the rim of a defect
    pixel_noise: float = 0.03
    border: int = 32  # minimum distance of a defect centre from the image edge


@dataclass
class RawImage:
    image: np.ndarray  # (H, W) in [0, 1], on the 1/255 grid
    mask: np.ndarray  # (H, W) uint8 0/1
    raw_id: str
    seed: int


@dataclass(frozen=True)
class ProtocolConfig:
    crop_size: int = 64
    margin: int = 20
    step: int = 1
    train_crops_per_raw: int = 30
    defect_to_normal: tuple = (3, 1)
    max_offsets_per_subset: int = 25

    def __post_init__(self):
        if not self.margin < self.crop_size / 2:
            raise ValueError("margin must be less than half the crop size")
        if self.step < 1:
            raise ValueError("step must be >= 1")


@dataclass
class CropSample:
    image: np.ndarray
    mask: np.ndarray
    raw_id: str
    offset: tuple  # (row, col) of the crop's top-left corner in the raw image
    region: str
    flags: list = field(default_factory=list)


class EmptySubsetError(ValueError):
    pass


def value_noise(shape, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Bilinear interpolation of a random lattice with spacing ``cell``."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.random((gh, gw))
    r = np.arange(h) / cell
    c = np.arange(w) / cell
    r0, c0 = np.floor(r).astype(int), np.floor(c).astype(int)
    fr, fc = (r - r0)[:, None], (c - c0)[None, :]
    # smoothstep keeps the surface C1 across lattice lines
    fr, fc = fr * fr * (3 - 2 * fr), fc * fc * (3 - 2 * fc)
    a = lattice[np.ix_(r0, c0)]
    b = lattice[np.ix_(r0, c0 + 1)]
    cc = lattice[np.ix_(r0 + 1, c0)]
    d = lattice[np.ix_(r0 + 1, c0 + 1)]
    return (a * (1 - fr) * (1 - fc) + b * (1 - fr) * fc + cc * fr * (1 - fc) + d * fr * fc)


def gen_raw(seed: int, spec: RawSpec = RawSpec(), raw_id: str | None = None) -> RawImage:
    rng = np.random.default_rng(seed)
    n = spec.size
    tex = np.zeros((n, n))
    amp, total = 1.0, 0.0
    for o in range(spec.octaves):
        tex += amp * value_noise((n, n), max(1, spec.cell >> o), rng)
        total += amp
        amp *= 0.5
    tex = 0.5 + spec.texture_amp * 2 * (tex / total - 0.5)
    tex += rng.normal(0, spec.pixel_noise, size=(n, n))

    mask = np.zeros((n, n), dtype=np.uint8)
    image = tex.copy()
    k = int(rng.integers(spec.n_defects[0], spec.n_defects[1] + 1))
    rr, cc = np.mgrid[0:n, 0:n]
    for _ in range(k):
        ra, rb = rng.uniform(*spec.radius, size=2)
        theta = rng.uniform(0, np.pi)
        pad = max(int(math.ceil(max(ra, rb))) + 2, spec.border)
        cy, cx = rng.uniform(pad, n - pad, size=2)
        dy, dx = rr - cy, cc - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        q = (u / ra) ** 2 + (v / rb) ** 2
        spot = q <= 1.0
        depth = rng.uniform(*spec.contrast)
        image[spot] -= depth * (spec.edge_fraction + (1 - spec.edge_fraction) * (1 - q[spot]))
        mask[spot] = 1
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return RawImage(image, mask, raw_id or f"raw{seed:05d}", seed)


def crop(raw: RawImage, offset, size: int, region: str) -> CropSample:
    r, c = offset
    n_r, n_c = raw.image.shape
    if not (0 <= r <= n_r - size and 0 <= c <= n_c - size):
        raise ValueError(f"crop at {offset} of size {size} leaves the raw image")
    return CropSample(raw.image[r:r + size, c:c + size].copy(),
                      raw.mask[r:r + size, c:c + size].copy(),
                      raw.raw_id, (int(r), int(c)), region)


def _window_counts(mask: np.ndarray, size: int, lo: int, hi: int):
    """Defect-pixel count in the window [lo, hi) of every crop position."""
    ii = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    n_off_r = mask.shape[0] - size + 1
    n_off_c = mask.shape[1] - size + 1
    r = np.arange(n_off_r)[:, None]
    c = np.arange(n_off_c)[None, :]
    return ii[r + hi, c + hi] - ii[r + lo, c + hi] - ii[r + hi, c + lo] + ii[r + lo, c + lo]


def classify_offsets(raw: RawImage, cfg: ProtocolConfig):
    """Boolean (middle, boundary) grids over every crop position.

    Only crops that hold each defect either whole or not at all qualify, so the
    true defect area is the same for every crop of a subset.
    """
    s, m = cfg.crop_size, cfg.margin
    total = _window_counts(raw.mask, s, 0, s)
    inner = _window_counts(raw.mask, s, m, s - m)
    labels, n = ndimage.label(raw.mask, structure=np.ones((3, 3), dtype=int))
    whole = np.ones_like(total, dtype=bool)
    for lab in range(1, n + 1):
        blob = labels == lab
        cnt = _window_counts(blob, s, 0, s)
        whole &= (cnt == 0) | (cnt == blob.sum())
    middle = whole & (total > 0) & (inner == total)
    boundary = whole & (total > inner)
    return middle, boundary


def sample_training(raws, cfg: ProtocolConfig = ProtocolConfig(), seed: int = 0):
    """Random crops, ``train_crops_per_raw`` per raw, mostly defective."""
    if not raws:
        raise ValueError("no raw images given")
    rng = np.random.default_rng(seed)
    s = cfg.crop_size
    n = cfg.train_crops_per_raw
    d, nn = cfg.defect_to_normal
    n_def = n * d // (d + nn)
    out = []
    for raw in raws:
        total = _window_counts(raw.mask, s, 0, s)
        defective = np.argwhere(total > 0)
        normal = np.argwhere(total == 0)
        flags = []
        if len(defective) == 0:
            flags.append("no-defect-fallback")
            log.warning("raw %s has no defective crop positions; sampling normals only", raw.raw_id)
            want_def = 0
        else:
            want_def = n_def
        if len(normal) == 0:
            flags.append("no-normal-fallback")
            want_def = n
        picks = []
        if want_def:
            picks += list(defective[rng.integers(0, len(defective), size=want_def)])
        if n - want_def:
            picks += list(normal[rng.integers(0, len(normal), size=n - want_def)])
        for off in picks:
            sample = crop(raw, tuple(off), s, "train")
            sample.flags = list(flags)
            out.append(sample)
    return out


def build_testset(raw: RawImage, cfg: ProtocolConfig, region: str):
    """Sliding-window crops of one raw image for the middle or boundary test set."""
    if region not in ("middle", "boundary"):
        raise ValueError(f"region must be 'middle' or 'boundary', got {region!r}")
    if not raw.mask.any():
        raise EmptySubsetError(f"raw {raw.raw_id} has no defect")
    middle, boundary = classify_offsets(raw, cfg)
    grid = middle if region == "middle" else boundary
    st = cfg.step
    offsets = [tuple(o) for o in np.argwhere(grid) if o[0] % st == 0 and o[1] % st == 0]
    if not offsets:
        raise EmptySubsetError(f"raw {raw.raw_id}: no {region} offsets")
    k = math.ceil(len(offsets) / cfg.max_offsets_per_subset)
    return [crop(raw, o, cfg.crop_size, region) for o in offsets[::k]]


@dataclass
class Dataset:
    train: list
    val: list
    mdt: list  # list of per-raw crop lists
    bdt: list


def make_dataset(n_raw: int = 10, n_test_raw: int = 3, seed: int = 0,
                 cfg: ProtocolConfig = ProtocolConfig(), raw_spec: RawSpec = RawSpec()) -> Dataset:
    """Train/val crops from ``n_raw`` raws (80/20 split) plus single-defect test raws."""
    raws = [gen_raw(seed * 1000 + i, raw_spec, f"r{seed}_{i:03d}") for i in range(n_raw)]
    n_val = max(1, n_raw // 5) if n_raw > 1 else 0
    train_raws, val_raws = raws[:n_raw - n_val], raws[n_raw - n_val:]
    test_spec = RawSpec(**{**raw_spec.__dict__, "n_defects": (1, 1)})
    tests = [gen_raw(seed * 1000 + 500 + i, test_spec, f"t{seed}_{i:03d}") for i in range(n_test_raw)]
    return Dataset(
        train=sample_training(train_raws, cfg, seed),
        val=sample_training(val_raws, cfg, seed + 1) if val_raws else [],
        mdt=[build_testset(r, cfg, "middle") for r in tests],
        bdt=[build_testset(r, cfg, "boundary") for r in tests],
    )


def stack_samples(samples):
    x = np.stack([s.image for s in samples])[:, None].astype(np.float64)
    y = np.stack([s.mask for s in samples]).astype(np.int64)
    return x, y


# -- PGM persistence ---------------------------------------------------------

def write_pgm(path, plane: np.ndarray, is_mask: bool = False):
    data = plane.astype(np.uint8) * 255 if is_mask else np.round(plane * 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PPM")


def read_pgm(path, is_mask: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"))
    return (data > 127).astype(np.uint8) if is_mask else data / 255.0


def _offset_name(off):
    return f"r{off[0]:03d}_c{off[1]:03d}"


def save_dataset(ds: Dataset, root) -> Path:
    """Write ``root/{train,val,mdt,bdt}/<raw_id>/<offset>.pgm`` plus masks and manifest.csv.

    Training crops may repeat an offset; repeats get a ``_kN`` suffix.
    """
    root = Path(root)
    rows = []
    splits = {"train": [ds.train], "val": [ds.val], "mdt": ds.mdt, "bdt": ds.bdt}
    for split, groups in splits.items():
        for group in groups:
            seen = {}
            for s in group:
                d = root / split / s.raw_id
                d.mkdir(parents=True, exist_ok=True)
                name = _offset_name(s.offset)
                seen[name] = seen.get(name, -1) + 1
                if seen[name]:
                    name = f"{name}_k{seen[name]}"
                write_pgm(d / f"{name}.pgm", s.image)
                write_pgm(d / f"{name}_mask.pgm", s.mask, is_mask=True)
                rows.append((f"{split}/{s.raw_id}/{name}.pgm", s.raw_id,
                             f"{s.offset[0]} {s.offset[1]}", s.region))
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "raw_id", "offset", "region"])
        w.writerows(rows)
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    buckets = {"train": {}, "val": {}, "mdt": {}, "bdt": {}}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            split = row["sample"].split("/", 1)[0]
            path = root / row["sample"]
            r, c = (int(v) for v in row["offset"].split())
            s = CropSample(read_pgm(path), read_pgm(path.with_name(path.stem + "_mask.pgm"), True),
                           row["raw_id"], (r, c), row["region"])
            buckets[split].setdefault(row["raw_id"], []).append(s)
    flat = lambda b: [s for g in b.values() for s in g]  # noqa: E731
    return Dataset(flat(buckets["train"]), flat(buckets["val"]),
                   list(buckets["mdt"].values()), list(buckets["bdt"].values()))
