"""Grayscale image records, binary PGM (P5) I/O, dataset manifests and score CSVs."""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError, IoError, UnsupportedDepth

RAW = "raw"
UNIT = "unit-normalized"

NORMAL = "normal"
ANOMALOUS = "anomalous"
UNLABELED = "unlabeled"
LABELS = (NORMAL, ANOMALOUS, UNLABELED)

SCORES_HEADER = ("id", "log_mse", "posterior_normal", "label")


@dataclass(frozen=True)
class ImageRecord:
    """One grayscale image plus provenance.

    ``pixels`` is a 2-D float64 array (height x width).
    """
    id: str
    pixels: np.ndarray
    norm_state: str = RAW
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise FormatError(f"image {self.id!r} is not 2-D: shape {self.pixels.shape}")
        if self.norm_state not in (RAW, UNIT):
            raise ContractViolation(f"unknown normalization state {self.norm_state!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DatasetManifest:
    """Ordered (path, label) entries. ``root`` resolves relative paths."""
    entries: list[tuple[str, str]] = field(default_factory=list)
    seed: int = 0
    root: str = "."

    def __post_init__(self):
        seen = set()
        for path, label in self.entries:
            if path in seen:
                raise FormatError(f"duplicate manifest path {path!r}")
            if label not in LABELS:
                raise FormatError(f"unknown label {label!r} for {path!r}")
            seen.add(path)

    def __len__(self):
        return len(self.entries)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    @property
    def has_labels(self) -> bool:
        return any(label != UNLABELED for _, label in self.entries)


_HEADER = re.compile(rb"(P5)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm_bytes(data: bytes):
    """Parse a P5 payload into an integer array.

    16-bit samples are big-endian, per the format rule for maxval > 255.
    """
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM: missing 'P5' magic")
    m = _HEADER.match(data)
    if m is None:
        raise FormatError("malformed PGM header")
    width, height, maxval = (int(g) for g in m.group(2, 3, 4))
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    if maxval == 255:
        dtype = np.dtype("u1")
    elif maxval == 65535:
        dtype = np.dtype(">u2")
    else:
        raise UnsupportedDepth(f"unsupported PGM maxval {maxval}; expected 255 or 65535")
    start = m.end()
    need = width * height * dtype.itemsize
    if len(data) - start < need:
        raise FormatError(f"truncated PGM payload: {len(data) - start} of {need} bytes")
    arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=start)
    return arr.reshape(height, width), maxval


def load_pgm(path) -> ImageRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    arr, _ = read_pgm_bytes(data)
    return ImageRecord(id=path.stem, pixels=arr.astype(np.float64), norm_state=RAW,
                       source_path=str(path))


def pgm_bytes(pixels, maxval: int = 65535) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise FormatError("PGM data must be 2-D")
    if maxval not in (255, 65535):
        raise UnsupportedDepth(f"unsupported PGM maxval {maxval}")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise FormatError(f"pixel values outside [0, {maxval}]")
    rounded = np.rint(pixels)
    if not np.array_equal(rounded, pixels):
        raise FormatError("PGM pixels must be integers")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = pixels.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + rounded.astype(dtype).tobytes()


def write_pgm(path, pixels, maxval: int = 65535):
    payload = pgm_bytes(pixels, maxval)
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def normalize(img: ImageRecord) -> ImageRecord:
    """Per-image min-max scaling to [0, 1]; a constant image maps to zeros."""
    if img.norm_state != RAW:
        raise ContractViolation(f"image {img.id!r} is already {img.norm_state}")
    px = np.asarray(img.pixels, dtype=np.float64)
    lo, hi = px.min(), px.max()
    if hi > lo:
        out = (px - lo) / (hi - lo)
    else:
        out = np.zeros_like(px)
    return replace(img, pixels=out, norm_state=UNIT)


def parse_manifest(text: str, seed: int = 0, root: str = ".") -> DatasetManifest:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        path, sep, label = line.partition(",")
        path, label = path.strip(), label.strip()
        if not sep:
            label = UNLABELED
        if not path:
            raise FormatError(f"line {lineno}: empty path")
        if label not in LABELS:
            raise FormatError(f"line {lineno}: unknown label {label!r}")
        entries.append((path, label))
    return DatasetManifest(entries=entries, seed=seed, root=root)


def load_manifest(path, seed: int = 0) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, seed=seed, root=str(path.parent))


def save_manifest(manifest: DatasetManifest, path):
    lines = [p if label == UNLABELED else f"{p},{label}" for p, label in manifest.entries]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def _fmt(x):
    return "" if x is None else repr(float(x))


def save_scores(table, path):
    """Write ``table.rows`` as CSV with header id,log_mse,posterior_normal,label.

    Rows need ``image_id``, ``log_mse``, ``posterior_normal`` (may be None)
    and ``label`` attributes.
    """
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SCORES_HEADER)
            for row in table.rows:
                writer.writerow([row.image_id, _fmt(row.log_mse), _fmt(row.posterior_normal),
                                 row.label or UNLABELED])
    except OSError as exc:
        raise IoError(f"cannot write scores {path}: {exc}") from exc


def read_scores(path):
    """Read a scores CSV back as a list of dicts with parsed floats."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != SCORES_HEADER:
                raise FormatError(f"{path}: expected header {','.join(SCORES_HEADER)}")
            rows = []
            for lineno, rec in enumerate(reader, 2):
                if len(rec) != len(SCORES_HEADER):
                    raise FormatError(f"{path}:{lineno}: expected 4 fields")
                image_id, e, post, label = rec
                if label not in LABELS:
                    raise FormatError(f"{path}:{lineno}: unknown label {label!r}")
                try:
                    rows.append({"id": image_id, "log_mse": float(e),
                                 "posterior_normal": float(post) if post else None,
                                 "label": label})
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
            return rows
    except OSError as exc:
        raise IoError(f"cannot read scores {path}: {exc}") from exc


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create directory {path}: {exc}") from exc
    return path
