"""Synthetic pseudo-slides with planted stripe textures, tiling and dataset I/O.

Every random draw is derived from an explicit seed. Slides are rendered with a
smooth mid-intensity tissue field, near-white background regions (removed by
the foreground filter) and, in positive slides, a class-specific oriented
stripe texture on a fraction of tissue tiles.

On-disk layout of a dataset directory::

    manifest.json        list of bag records (see ``BagRecord.to_json``)
    bags/<bag_id>.tpfm   "TPFM" + 5 x u32 LE (version, K, tile, tile, C)
                         + K*tile*tile*C float32 LE, bag-major, row-major
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"TPFM"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4s5I")
FOREGROUND_THRESHOLD = 0.92

# EGFR, KRAS, MET, ALK positive rates of the multi-label LUAD cohort
MULTILABEL_CLASSES = ("EGFR", "KRAS", "MET", "ALK")
MULTILABEL_PREVALENCES = (0.26, 0.27, 0.04, 0.03)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TextureSpec:
    """Stripe texture: orientation in degrees, period in pixels (at 1x), amplitude."""

    angle: float
    period: float
    amplitude: float = 0.25


DEFAULT_TEXTURES = {
    "binary": (TextureSpec(angle=30.0, period=4.0),),
    # periods differ so that rotations/flips never map one class onto another
    "multilabel": (
        TextureSpec(angle=0.0, period=3.0),
        TextureSpec(angle=45.0, period=4.0),
        TextureSpec(angle=90.0, period=6.0),
        TextureSpec(angle=135.0, period=8.0),
    ),
}


@dataclass(frozen=True)
class SlideParams:
    size: int = 1024
    tile_size: int = 32
    channels: int = 3
    signal_fraction: float = 0.10
    background_fraction: float = 0.15
    tissue_level: float = 0.55
    tissue_contrast: float = 0.10
    pixel_noise: float = 0.04

    def __post_init__(self):
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("signal_fraction must be in (0, 1]")
        if not 0 <= self.background_fraction < 1:
            raise ValueError("background_fraction must be in [0, 1)")
        if self.size % self.tile_size:
            raise ValueError(f"slide size {self.size} is not divisible by tile size {self.tile_size}")


@dataclass
class PseudoSlide:
    image: np.ndarray  # (S*mag)×(S*mag)×C in [0, 1]
    label: np.ndarray  # length-C 0/1 vector (length 1 for binary)
    signal_mask: np.ndarray  # grid×grid bool
    signal_class: np.ndarray  # grid×grid int, -1 where no texture
    magnification: int = 1
    tile_size: int = 32


@dataclass
class TileBag:
    bag_id: str
    tiles: np.ndarray  # K×t×t×C float32 (may be a read-only memmap)
    label: np.ndarray
    tile_coords: np.ndarray  # K×2 (row, col)
    signal: np.ndarray | None = None  # K ints, texture class or -1
    grid: tuple[int, int] | None = None
    magnification: int = 1
    split: str | None = None

    @property
    def K(self) -> int:
        return int(self.tiles.shape[0])

    @property
    def index(self) -> int:
        """Stable integer key for seeding per-bag randomness."""
        return zlib.crc32(self.bag_id.encode())


# ---------------------------------------------------------------- rendering


def _check_textures(textures: Sequence[TextureSpec]) -> None:
    seen = set()
    for t in textures:
        key = (round(t.angle % 180.0, 6), round(t.period, 6))
        if key in seen:
            raise DataError(f"overlapping texture definitions for angle={t.angle}, period={t.period}")
        seen.add(key)


def _stripes(n: int, texture: TextureSpec, scale: int, phase: float, dtype) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    th = math.radians(texture.angle)
    arg = (xx * math.cos(th) + yy * math.sin(th)) / (texture.period * scale)
    return (texture.amplitude * np.sin(2 * math.pi * arg + phase)).astype(dtype)


def generate_slide(
    seed: int,
    label,
    params: SlideParams = SlideParams(),
    textures: Sequence[TextureSpec] | None = None,
    magnification: int = 1,
) -> PseudoSlide:
    """Render one pseudo-slide.

    ``label`` is a 0/1 vector with one entry per texture class. Each positive
    class receives ``max(1, floor(signal_fraction * n_foreground))`` texture
    tiles, disjoint across classes.
    """
    label = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if textures is None:
        textures = DEFAULT_TEXTURES["binary" if label.size == 1 else "multilabel"]
    textures = tuple(textures)
    if len(textures) != label.size:
        raise DataError(f"{label.size} label entries but {len(textures)} textures")
    _check_textures(textures)
    if magnification not in (1, 2):
        raise ValueError("magnification must be 1 or 2")

    rng = np.random.default_rng(seed)
    n = params.size // params.tile_size
    mag = magnification
    side = params.size * mag
    t = params.tile_size * mag
    C = params.channels

    # tile-level tissue mask from a smooth random field
    field_ = gaussian_filter(rng.standard_normal((n, n)), sigma=max(n / 8.0, 1.0), mode="wrap")
    cut = np.quantile(field_, params.background_fraction) if params.background_fraction > 0 else -np.inf
    background = field_ < cut

    smooth = gaussian_filter(rng.standard_normal((side, side)).astype(np.float32), sigma=3.0 * mag, mode="wrap")
    smooth /= smooth.std() + 1e-12
    tint = np.array([0.92, 0.68, 0.84, 0.8, 0.8][:C], dtype=np.float32)
    tissue = params.tissue_level + params.tissue_contrast * smooth
    image = tissue[:, :, None] * (tint / tint.mean())
    image += params.pixel_noise * rng.standard_normal((side, side, C), dtype=np.float32)

    bg_pixels = np.repeat(np.repeat(background, t, axis=0), t, axis=1)
    image[bg_pixels] = 0.96 + 0.01 * rng.standard_normal((int(bg_pixels.sum()), C), dtype=np.float32)

    signal_class = np.full((n, n), -1, dtype=np.int64)
    fg = np.argwhere(~background)
    free = rng.permutation(len(fg))
    count = max(1, int(math.floor(params.signal_fraction * len(fg))))
    used = 0
    for j in np.flatnonzero(label):
        if used + count > len(fg):
            raise DataError("not enough foreground tiles for disjoint class textures")
        chosen = fg[free[used:used + count]]
        used += count
        for r, c in chosen:
            signal_class[r, c] = j
            patch = _stripes(t, textures[j], mag, rng.uniform(0, 2 * math.pi), np.float32)
            image[r * t:(r + 1) * t, c * t:(c + 1) * t, :] += patch[:, :, None]

    np.clip(image, 0.0, 1.0, out=image)
    return PseudoSlide(
        image=image,
        label=label,
        signal_mask=signal_class >= 0,
        signal_class=signal_class,
        magnification=mag,
        tile_size=params.tile_size,
    )


def area_downscale(tile: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return tile
    h, w, c = tile.shape
    return tile.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def tile_slide(slide: PseudoSlide, tile_size: int | None = None, bag_id: str = "bag") -> TileBag:
    """Cut the slide into a grid, drop near-white tiles, downscale 2x slides."""
    tile_size = tile_size or slide.tile_size
    mag = slide.magnification
    t = tile_size * mag
    side = slide.image.shape[0]
    if side % t:
        raise DataError(f"slide side {side} is not divisible by tile size {t}")
    n = side // t
    C = slide.image.shape[2]
    grid = slide.image.reshape(n, t, n, t, C).transpose(0, 2, 1, 3, 4)
    means = grid.mean(axis=(2, 3, 4))
    keep = np.argwhere(means <= FOREGROUND_THRESHOLD)
    if len(keep) == 0:
        raise DataError("no foreground")
    tiles = grid[keep[:, 0], keep[:, 1]]
    if mag > 1:
        K = tiles.shape[0]
        tiles = tiles.reshape(K, tile_size, mag, tile_size, mag, C).mean(axis=(2, 4))
    signal = slide.signal_class[keep[:, 0], keep[:, 1]] if slide.signal_class.shape == (n, n) else None
    return TileBag(
        bag_id=bag_id,
        tiles=np.ascontiguousarray(tiles, dtype=np.float32),
        label=slide.label.copy(),
        tile_coords=keep.astype(np.int64),
        signal=signal,
        grid=(n, n),
        magnification=mag,
    )


# ---------------------------------------------------------------- bag files


def write_bag_file(path, tiles: np.ndarray) -> None:
    tiles = np.ascontiguousarray(tiles, dtype="<f4")
    K, t1, t2, C = tiles.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, K, t1, t2, C))
        fh.write(tiles.tobytes(order="C"))


def read_bag_file(path, mmap: bool = True) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, K, t1, t2, C = HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    shape = (K, t1, t2, C)
    expected = HEADER.size + 4 * K * t1 * t2 * C
    if Path(path).stat().st_size != expected:
        raise DataError(f"{path}: size does not match header")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=HEADER.size, shape=shape)
    return np.fromfile(path, dtype="<f4", offset=HEADER.size).reshape(shape)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetSpec:
    task: str = "binary"
    n_train: int = 200
    n_val: int = 25
    n_test: int = 25
    prior: float = 0.5
    class_names: tuple[str, ...] = ("positive",)
    prevalences: tuple[float, ...] | None = None
    magnification_fraction: float = 0.3
    slide: SlideParams = field(default_factory=SlideParams)
    textures: tuple[TextureSpec, ...] | None = None

    @classmethod
    def multilabel(cls, **kw) -> "DatasetSpec":
        kw.setdefault("class_names", MULTILABEL_CLASSES)
        kw.setdefault("prevalences", MULTILABEL_PREVALENCES)
        return cls(task="multilabel", **kw)

    @classmethod
    def from_total(cls, n_slides: int, fractions=(0.8, 0.1, 0.1), **kw) -> "DatasetSpec":
        n_train = int(round(n_slides * fractions[0]))
        n_val = int(round(n_slides * fractions[1]))
        return cls(n_train=n_train, n_val=n_val, n_test=n_slides - n_train - n_val, **kw)

    @property
    def rates(self) -> tuple[float, ...]:
        if self.task == "binary":
            return (self.prior,)
        if self.prevalences is None or len(self.prevalences) != len(self.class_names):
            raise ValueError("multilabel spec needs one prevalence per class")
        return tuple(self.prevalences)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("task", "n_train", "n_val", "n_test", "prior",
                                             "magnification_fraction")}
        d["class_names"] = list(self.class_names)
        d["prevalences"] = list(self.prevalences) if self.prevalences else None
        d["slide"] = self.slide.__dict__.copy()
        tex = self.textures or DEFAULT_TEXTURES[self.task]
        d["textures"] = [t.__dict__.copy() for t in tex]
        return d


def positives_for(rate: float, n: int) -> int:
    """Positive count for a split: round-half-up of ``rate * n``, at least 1 when rate > 0."""
    k = int(math.floor(rate * n + 0.5))
    if rate > 0:
        k = max(k, 1)
    return k


def _split_labels(spec: DatasetSpec, n: int, rng: np.random.Generator, split: str) -> np.ndarray:
    rates = spec.rates
    labels = np.zeros((n, len(rates)), dtype=np.int64)
    for j, rate in enumerate(rates):
        k = positives_for(rate, n)
        if k >= n or k == 0 and rate > 0 or n < 2:
            raise DataError(f"{split} split of {n} slides is too small to stratify class {j} at rate {rate}")
        if spec.task == "binary":
            labels[:k, j] = 1  # shuffled below
        else:
            labels[rng.choice(n, size=k, replace=False), j] = 1
    if spec.task == "binary":
        labels = labels[rng.permutation(n)]
    return labels


def _assign_magnification(labels: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    mags = np.ones(len(labels), dtype=np.int64)
    strata = labels.any(axis=1)
    for s in (False, True):
        idx = np.flatnonzero(strata == s)
        k = int(math.floor(frac * len(idx) + 0.5))
        if k:
            mags[rng.choice(idx, size=k, replace=False)] = 2
    return mags


def plan_dataset(spec: DatasetSpec, seed: int) -> list[dict]:
    """Deterministic per-slide plan: bag id, split, labels, magnification, slide seed."""
    rng = np.random.default_rng([seed, 7])
    plan = []
    for split, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        if n == 0:
            continue
        labels = _split_labels(spec, n, rng, split)
        mags = _assign_magnification(labels, spec.magnification_fraction, rng)
        for i in range(n):
            plan.append({
                "bag_id": f"{split}_{i:04d}",
                "split": split,
                "labels": labels[i].tolist(),
                "magnification": int(mags[i]),
                "slide_seed": int(rng.integers(0, 2**63 - 1)),
            })
    return plan


def make_dataset(spec: DatasetSpec, seed: int, out_dir=None, force: bool = False, progress=None) -> "Dataset":
    """Generate every slide of ``spec``; write files when ``out_dir`` is given.

    Without ``out_dir`` the bags are kept in memory (suited to small slides).
    """
    textures = spec.textures or DEFAULT_TEXTURES[spec.task]
    if len(textures) != len(spec.rates):
        raise DataError("one texture per class is required")
    _check_textures(textures)
    plan = plan_dataset(spec, seed)
    bag_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        if out_dir.exists() and any(out_dir.iterdir()) and not force:
            raise FileExistsError(f"{out_dir} exists and is not empty (use force)")
        bag_dir = out_dir / "bags"
        bag_dir.mkdir(parents=True, exist_ok=True)

    bags, records = [], []
    for i, item in enumerate(plan):
        slide = generate_slide(item["slide_seed"], item["labels"], spec.slide, textures, item["magnification"])
        bag = tile_slide(slide, spec.slide.tile_size, bag_id=item["bag_id"])
        bag.split = item["split"]
        del slide
        rec = BagRecord(
            bag_id=bag.bag_id,
            split=bag.split,
            labels=[int(v) for v in bag.label],
            magnification=bag.magnification,
            path=f"bags/{bag.bag_id}.tpfm",
            K=bag.K,
            tile_size=spec.slide.tile_size,
            C=spec.slide.channels,
            grid=list(bag.grid),
            coords=bag.tile_coords.tolist(),
            signal=bag.signal.tolist(),
        )
        records.append(rec)
        if bag_dir is not None:
            write_bag_file(out_dir / rec.path, bag.tiles)
            bag = None
        else:
            bags.append(bag)
        if progress is not None:
            progress(i + 1, len(plan))

    ds = Dataset(records=records, spec=spec.to_dict(), root=out_dir, seed=seed, _bags=bags or None)
    if out_dir is not None:
        ds.write_manifest()
    return ds


@dataclass
class BagRecord:
    bag_id: str
    split: str
    labels: list[int]
    magnification: int
    path: str
    K: int
    tile_size: int
    C: int
    grid: list[int] | None = None
    coords: list[list[int]] | None = None
    signal: list[int] | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Dataset:
    """Manifest plus bag access (memory-mapped when loaded from disk)."""

    records: list[BagRecord]
    spec: dict
    root: Path | None = None
    seed: int | None = None
    _bags: list[TileBag] | None = None

    @property
    def task(self) -> str:
        return self.spec.get("task", "binary")

    @property
    def class_names(self) -> list[str]:
        return list(self.spec.get("class_names") or ["positive"])

    @property
    def tile_size(self) -> int:
        return self.records[0].tile_size

    @property
    def channels(self) -> int:
        return self.records[0].C

    def split(self, name: str) -> list[TileBag]:
        idx = [i for i, r in enumerate(self.records) if r.split == name]
        if not idx:
            raise DataError(f"split {name!r} is empty or absent")
        return [self.bag(i) for i in idx]

    def labels(self, name: str) -> np.ndarray:
        return np.array([r.labels for r in self.records if r.split == name], dtype=np.int64)

    def bag(self, i: int) -> TileBag:
        if self._bags is not None:
            return self._bags[i]
        rec = self.records[i]
        tiles = read_bag_file(self.root / rec.path, mmap=True)
        return TileBag(
            bag_id=rec.bag_id,
            tiles=tiles,
            label=np.array(rec.labels, dtype=np.int64),
            tile_coords=np.array(rec.coords if rec.coords is not None else [], dtype=np.int64).reshape(-1, 2),
            signal=None if rec.signal is None else np.array(rec.signal, dtype=np.int64),
            grid=None if rec.grid is None else tuple(rec.grid),
            magnification=rec.magnification,
            split=rec.split,
        )

    def manifest(self) -> dict:
        return {"format": "tapfm-dataset", "version": FORMAT_VERSION, "seed": self.seed,
                "spec": self.spec, "bags": [r.to_json() for r in self.records]}

    def write_manifest(self) -> None:
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=1, sort_keys=True)

    def counts(self) -> dict:
        """Per split: bag count, positives per class, 2x-magnification count."""
        out = {}
        for split in ("train", "val", "test"):
            recs = [r for r in self.records if r.split == split]
            if not recs:
                continue
            lab = np.array([r.labels for r in recs])
            out[split] = {
                "bags": len(recs),
                "positives": dict(zip(self.class_names, lab.sum(axis=0).tolist())),
                "magnification_2x": sum(r.magnification == 2 for r in recs),
            }
        return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {root}")
    with open(path) as fh:
        doc = json.load(fh)
    bags = doc["bags"] if isinstance(doc, dict) else doc
    records = [BagRecord(**rec) for rec in bags]
    spec = doc.get("spec", {}) if isinstance(doc, dict) else {}
    return Dataset(records=records, spec=spec, root=root, seed=doc.get("seed") if isinstance(doc, dict) else None)


# ---------------------------------------------------------------- sampling


def bag_rng(seed: int, epoch: int, bag_key: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, bag_key, stream])


def sample_bag_tiles(K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``min(n, K)`` distinct tiles, uniformly without replacement, ascending."""
    if n < 1:
        raise ValueError("tiles_per_bag must be at least 1")
    if n >= K:
        return np.arange(K)
    return np.sort(rng.choice(K, size=n, replace=False))


def gaussian_kernel3(sigma: float = 1.0) -> np.ndarray:
    x = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def blur(tile: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable 3×3 Gaussian blur, edges replicated."""
    k = gaussian_kernel3(sigma).astype(tile.dtype)
    p = np.pad(tile, ((1, 1), (1, 1), (0, 0)), mode="edge")
    rows = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    return k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]


def augment(tile: np.ndarray, rng: np.random.Generator, blur_p: float = 0.25, sigma: float = 1.0) -> np.ndarray:
    """Random horizontal flip (p=0.5), rotation by a multiple of 90°, blur (p=``blur_p``)."""
    if tile.shape[0] != tile.shape[1]:
        raise ValueError("augment expects a square tile")
    flip = rng.random() < 0.5
    k = int(rng.integers(0, 4))
    do_blur = rng.random() < blur_p
    out = tile[:, ::-1] if flip else tile
    out = np.rot90(out, k, axes=(0, 1))
    if do_blur:
        out = blur(out, sigma)
    return np.clip(out, 0.0, 1.0).astype(tile.dtype, copy=False)


def augment_bag(tiles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(t, rng) for t in tiles])
