"""Per-image residual score: log of the pixel-mean squared reconstruction error."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cae, imagio, tiling
from .errors import AnomalyError, DataError, NoSignalError

MSE_FLOOR = 1e-30


@dataclass
class ScoreRow:
    image_id: str
    log_mse: float
    n_tiles: int | None
    label: str | None = None
    posterior_normal: float | None = None


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)
    model_fingerprint: str = ""
    side_report: list[tuple[str, str]] = field(default_factory=list)

    def scores(self) -> np.ndarray:
        return np.array([r.log_mse for r in self.rows], dtype=np.float64)

    def labels(self) -> list[str | None]:
        return [r.label for r in self.rows]

    @property
    def has_labels(self) -> bool:
        return any(r.label in (imagio.NORMAL, imagio.ANOMALOUS) for r in self.rows)


def log_mse(sq_error_sum: float, n_pixels: int) -> float:
    return math.log(max(sq_error_sum / n_pixels, MSE_FLOOR))


def residual_sum(model, batch: tiling.TileBatch, chunk: int = 32) -> float:
    """Sum of squared reconstruction errors over every pixel of every tile (float64)."""
    stack = batch.stack()
    total = 0.0
    for i in range(0, len(stack), chunk):
        x = stack[i:i + chunk]
        r = cae.reconstruct_batch(model, x, chunk=chunk)
        total += float(np.sum(np.square(x.astype(np.float64) - r.astype(np.float64))))
    return total


def score_image(model, batch: tiling.TileBatch) -> tuple[float, int]:
    """Return ``(e, n_tiles)`` with e = ln(mean squared error over all tile pixels)."""
    if batch.n_retained < 1:
        raise NoSignalError(f"image {batch.image_id!r} kept no tiles after background rejection")
    n_pixels = sum(t.pixels.size for t in batch.tiles)
    return log_mse(residual_sum(model, batch), n_pixels), batch.n_retained


def load_batch(path, image_id=None, tile=tiling.TILE, stride=tiling.STRIDE,
               relative_threshold=tiling.RELATIVE_THRESHOLD) -> tiling.TileBatch:
    img = imagio.normalize(imagio.load_pgm(path))
    batch = tiling.preprocess(img, tile, stride, relative_threshold)
    if image_id is not None:
        batch.image_id = image_id
    return batch


def score_dataset(model, manifest: imagio.DatasetManifest, *, tile=tiling.TILE, stride=tiling.STRIDE,
                  relative_threshold=tiling.RELATIVE_THRESHOLD, batches=None) -> ScoreTable:
    """Score every manifest image, in manifest order.

    Images without retained tiles, and unreadable images, go to
    ``table.side_report`` as ``(path, reason)`` and are left out of the rows.
    ``batches`` may map manifest paths to pre-computed tile batches.
    """
    if len(manifest) == 0:
        raise DataError("cannot score an empty manifest")
    fingerprint = model.fingerprint_str() if hasattr(model, "fingerprint_str") else ""
    table = ScoreTable(model_fingerprint=fingerprint)
    for path, label in manifest.entries:
        try:
            batch = batches[path] if batches and path in batches else load_batch(
                manifest.resolve(path), tile=tile, stride=stride, relative_threshold=relative_threshold)
            e, n = score_image(model, batch)
        except NoSignalError as exc:
            table.side_report.append((path, f"no signal: {exc}"))
            continue
        except (AnomalyError, OSError) as exc:
            table.side_report.append((path, f"error: {exc}"))
            continue
        table.rows.append(ScoreRow(image_id=batch.image_id, log_mse=e, n_tiles=n, label=label))
    return table


def table_from_records(records) -> ScoreTable:
    """Rebuild a table from :func:`imagio.read_scores` output (tile counts are not stored)."""
    return ScoreTable(rows=[ScoreRow(image_id=r["id"], log_mse=r["log_mse"], n_tiles=None,
                                     label=r["label"], posterior_normal=r["posterior_normal"])
                            for r in records])


def histogram(scores, bins: int = 30):
    """(bin_left, count) pairs of the score histogram."""
    scores = np.asarray(scores, dtype=np.float64)
    counts, edges = np.histogram(scores, bins=bins)
    return list(zip(edges[:-1].tolist(), counts.tolist()))


def save_histogram(scores, path, bins: int = 30):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_left,count\n")
        for left, count in histogram(scores, bins):
            fh.write(f"{left!r},{count}\n")
