"""
Overlapping tiling of normalized images and background rejection by the
spectral inverse participation ratio (sIPR).

The sIPR of a tile is the sum of squared, normalized periodogram weights of
the mean-subtracted tile, excluding the DC bin. A flat spectrum gives 1/N
(N = tile**2 - 1 bins), a single conjugate pair of bins gives 1/2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NumericError, SizeError
from .imagio import UNIT, ImageRecord, ensure_dir, write_pgm

TILE = 80
STRIDE = 48
RELATIVE_THRESHOLD = 1.009


@dataclass(frozen=True)
class Tile:
    pixels: np.ndarray
    origin: tuple[int, int]
    sipr: float
    image_id: str = ""


@dataclass
class TileBatch:
    """Retained tiles of one image, in row-major origin order."""
    image_id: str
    tiles: list[Tile] = field(default_factory=list)
    n_generated: int = 0

    @property
    def n_retained(self) -> int:
        return len(self.tiles)

    def stack(self, dtype=np.float32) -> np.ndarray:
        """Tiles as an (n, 1, h, w) array ready for the autoencoder."""
        if not self.tiles:
            return np.zeros((0, 1, TILE, TILE), dtype=dtype)
        return np.stack([t.pixels for t in self.tiles])[:, None].astype(dtype)


def tile_origins(size: int, tile: int = TILE, stride: int = STRIDE) -> list[int]:
    """Regular origins 0, stride, ... plus a flush-to-edge origin if needed."""
    if not 1 <= stride <= tile:
        raise ContractViolation(f"stride must lie in [1, {tile}] so tiles cover the image, got {stride}")
    if size < tile:
        raise SizeError(f"image side {size} is smaller than the tile size {tile}")
    origins = list(range(0, size - tile + 1, stride))
    if origins[-1] != size - tile:
        origins.append(size - tile)
    return origins


def n_bins(tile: int = TILE) -> int:
    """Number of non-DC frequency bins of a tile x tile periodogram."""
    return tile * tile - 1


def _sipr_stack(stack: np.ndarray) -> np.ndarray:
    """sIPR for an (n, h, w) stack of tiles."""
    stack = np.asarray(stack, dtype=np.float64)
    if not np.all(np.isfinite(stack)):
        raise NumericError("tile contains non-finite values")
    n_freq = stack.shape[1] * stack.shape[2] - 1
    centered = stack - stack.mean(axis=(1, 2), keepdims=True)
    power = np.abs(np.fft.fft2(centered)) ** 2
    power[:, 0, 0] = 0.0
    total = power.sum(axis=(1, 2))
    flat = (stack.max(axis=(1, 2)) == stack.min(axis=(1, 2))) | (total <= 0)
    safe = np.where(flat, 1.0, total)
    out = np.sum((power / safe[:, None, None]) ** 2, axis=(1, 2))
    out[flat] = 1.0 / n_freq
    return out


def spectral_ipr(tile_pixels) -> float:
    tile_pixels = np.asarray(tile_pixels, dtype=np.float64)
    if tile_pixels.ndim != 2:
        raise ContractViolation("spectral_ipr expects a 2-D tile")
    return float(_sipr_stack(tile_pixels[None])[0])


def tile_image(img: ImageRecord, tile: int = TILE, stride: int = STRIDE) -> list[Tile]:
    """Cut a unit-normalized image into overlapping tiles, each with its sIPR."""
    if img.norm_state != UNIT:
        raise ContractViolation(f"image {img.id!r} must be normalized before tiling")
    if min(img.height, img.width) < tile:
        raise SizeError(f"image {img.id!r} ({img.height}x{img.width}) is smaller than {tile}x{tile}")
    rows = tile_origins(img.height, tile, stride)
    cols = tile_origins(img.width, tile, stride)
    origins = [(r, c) for r in rows for c in cols]
    stack = np.stack([img.pixels[r:r + tile, c:c + tile] for r, c in origins])
    sipr = _sipr_stack(stack)
    return [Tile(pixels=stack[i], origin=o, sipr=float(sipr[i]), image_id=img.id)
            for i, o in enumerate(origins)]


def filter_background(tiles, relative_threshold: float = RELATIVE_THRESHOLD,
                      image_id: str | None = None) -> TileBatch:
    """Keep tiles whose sIPR exceeds ``relative_threshold / N``."""
    tiles = list(tiles)
    if image_id is None:
        image_id = tiles[0].image_id if tiles else ""
    kept = []
    for t in tiles:
        if t.sipr > relative_threshold / (t.pixels.size - 1):
            kept.append(t)
    kept.sort(key=lambda t: t.origin)
    return TileBatch(image_id=image_id, tiles=kept, n_generated=len(tiles))


def preprocess(img: ImageRecord, tile: int = TILE, stride: int = STRIDE,
               relative_threshold: float = RELATIVE_THRESHOLD) -> TileBatch:
    """Tile a normalized image and drop background tiles."""
    return filter_background(tile_image(img, tile, stride), relative_threshold, image_id=img.id)


def dump_tiles(batch: TileBatch, directory) -> list[Path]:
    """Write tiles as 16-bit PGMs named ``<image_id>_r<row>_c<col>.pgm``."""
    directory = ensure_dir(directory)
    paths = []
    for t in batch.tiles:
        path = directory / f"{batch.image_id}_r{t.origin[0]}_c{t.origin[1]}.pgm"
        write_pgm(path, np.rint(np.clip(t.pixels, 0, 1) * 65535), maxval=65535)
        paths.append(path)
    return paths
