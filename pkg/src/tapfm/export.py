"""Tile attention export: CSV rows and an 8-bit PGM grid image."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np

from .aggregator import normalize_attention
from .synth import TileBag
from .trainer import ModelState
from .vit import extract_features


@dataclass
class AttentionMap:
    raw: np.ndarray  # K raw CLS-attention scores
    normalized: np.ndarray  # K weights summing to one
    coords: np.ndarray | None  # K×2 (row, col) or None
    grid: tuple[int, int] | None

    def image(self) -> np.ndarray:
        """grid-shaped uint8 image; tiles scaled by the largest weight, empty cells 0."""
        if self.grid is None or self.coords is None:
            raise ValueError("no tile grid available")
        img = np.zeros(self.grid, dtype=np.float64)
        img[self.coords[:, 0], self.coords[:, 1]] = self.normalized
        top = self.normalized.max()
        if top > 0:
            img = img / top
        return np.rint(img * 255.0).astype(np.uint8)


def attention_map(bag: TileBag, state: ModelState) -> AttentionMap:
    _, scores = extract_features(np.asarray(bag.tiles), state.backbone, state.vit)
    weights = normalize_attention(scores.astype(np.float64))
    coords = None
    if bag.tile_coords is not None and len(bag.tile_coords) == bag.K and bag.grid is not None:
        coords = np.asarray(bag.tile_coords, dtype=np.int64)
    return AttentionMap(scores.astype(np.float64), weights, coords, bag.grid if coords is not None else None)


def write_attention_csv(path, amap: AttentionMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_row", "tile_col", "raw_attention", "normalized_attention"])
        for i, (a, n) in enumerate(zip(amap.raw, amap.normalized)):
            r, c = ("", "") if amap.coords is None else (int(amap.coords[i, 0]), int(amap.coords[i, 1]))
            w.writerow([r, c, repr(float(a)), repr(float(n))])


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale."""
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: expected 8-bit data")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
