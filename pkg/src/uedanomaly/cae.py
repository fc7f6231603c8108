"""
The fixed convolutional autoencoder: assembly, training, reconstruction and
the CAE1 model file format.

Encoder: three (conv 3x3 pad 1 -> maxpool 4 -> ReLU) stages taking an 80x80
tile to a 1x1x256 bottleneck. Decoder: transposed convolutions 5/1, 4/4 and
4/4 with ReLU, then a linear 3x3 conv back to one channel.
"""
from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchitectureError, DataError, DivergenceError, FormatError, IncompatibleModel, IoError, ShapeError
from .nn import AdamState, Conv2D, ConvTranspose2D, MaxPool2D, ReLU, Sequential, adam_step, mse_loss
from .tiling import TILE

log = logging.getLogger(__name__)

WIDTHS = (64, 128, 256)
TABLE_PARAMS = (640, 73856, 295168, 1638400, 524288, 131072, 576)
TABLE_SHAPES = ((80, 80, 64), (20, 20, 64), (20, 20, 128), (5, 5, 128), (5, 5, 256),
                (1, 1, 256), (5, 5, 256), (20, 20, 128), (80, 80, 64), (80, 80, 1))

MAGIC = b"CAE1"
_LAYER_CODES = {"conv": 1, "transpose-conv": 2, "pool": 3, "relu": 4}
_CODE_NAMES = {v: k for k, v in _LAYER_CODES.items()}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise DataError("learning rate and batch size must be positive, epochs >= 0")


class CaeModel:
    """Autoencoder weights plus provenance (seed, epochs trained)."""

    def __init__(self, net: Sequential, seed: int = 0, epoch_count: int = 0, widths=WIDTHS):
        self.net = net
        self.seed = int(seed)
        self.epoch_count = int(epoch_count)
        self.widths = tuple(widths)

    @property
    def layers(self):
        return self.net.layers

    def forward(self, x):
        return self.net.forward(x)

    def param_counts(self) -> list[int]:
        """Trainable parameters of each conv / transpose-conv layer, in order."""
        return [layer.n_params() for layer in self.layers if layer.params]

    def n_params(self) -> int:
        return sum(self.param_counts())

    def fingerprint(self) -> list[tuple]:
        """Ordered layer dimension tuples identifying the architecture."""
        return [layer.dims() for layer in self.layers]

    def fingerprint_str(self) -> str:
        return ";".join(",".join(str(v) for v in dims) for dims in self.fingerprint())

    def shape_chain(self, size: int = TILE) -> list[tuple[int, int, int]]:
        """(h, w, c) after every conv, pool and transpose-conv layer, ReLUs skipped."""
        x = np.zeros((1, 1, size, size), dtype=np.float32)
        shapes = []
        for layer in self.layers:
            x = layer.forward(x)
            layer._cache = None
            if not isinstance(layer, ReLU):
                shapes.append((x.shape[2], x.shape[3], x.shape[1]))
        return shapes

    def encode(self, tile) -> np.ndarray:
        """Bottleneck feature vector of one tile."""
        x = _as_batch(tile)
        for layer in self.layers[:9]:
            x = layer.forward(x)
            layer._cache = None
        return x.reshape(-1)

    def astype(self, dtype):
        self.net.astype(dtype)
        return self

    def copy(self) -> "CaeModel":
        clone = build(self.seed, widths=self.widths)
        for (_, _, dst), (_, _, src) in zip(clone.net.parameters(), self.net.parameters()):
            dst[...] = src
        clone.epoch_count = self.epoch_count
        return clone


def _as_batch(tile):
    tile = np.asarray(tile, dtype=np.float32)
    if tile.shape != (TILE, TILE):
        raise ShapeError(f"expected a {TILE}x{TILE} tile, got {tile.shape}")
    return tile[None, None]


def build(seed: int = 0, widths=WIDTHS) -> CaeModel:
    """Assemble the autoencoder with seeded uniform(+-sqrt(6/fan_in)) weights."""
    c1, c2, c3 = widths
    rng = np.random.default_rng(seed)
    layers = [
        Conv2D(1, c1, 3, padding=1, rng=rng), MaxPool2D(4), ReLU(),
        Conv2D(c1, c2, 3, padding=1, rng=rng), MaxPool2D(4), ReLU(),
        Conv2D(c2, c3, 3, padding=1, rng=rng), MaxPool2D(4), ReLU(),
        ConvTranspose2D(c3, c3, 5, stride=1, rng=rng), ReLU(),
        ConvTranspose2D(c3, c2, 4, stride=4, rng=rng), ReLU(),
        ConvTranspose2D(c2, c1, 4, stride=4, rng=rng), ReLU(),
        Conv2D(c1, 1, 3, padding=1, bias=False, rng=rng),
    ]
    layers[0].input_grad = False
    model = CaeModel(Sequential(layers), seed=seed, widths=widths)
    if tuple(widths) == WIDTHS and tuple(model.param_counts()) != TABLE_PARAMS:
        raise ArchitectureError(f"parameter census {model.param_counts()} != {list(TABLE_PARAMS)}")
    return model


def reconstruct(model: CaeModel, tile) -> np.ndarray:
    """Forward pass of a single 80x80 tile."""
    out = model.forward(_as_batch(tile))
    for layer in model.layers:
        layer._cache = None
    return out[0, 0]


def reconstruct_batch(model: CaeModel, stack, chunk: int = 32) -> np.ndarray:
    """Reconstruct an (n, 1, 80, 80) stack in chunks."""
    stack = np.asarray(stack, dtype=np.float32)
    if stack.ndim != 4 or stack.shape[1:] != (1, TILE, TILE):
        raise ShapeError(f"expected (n, 1, {TILE}, {TILE}) tiles, got {stack.shape}")
    out = np.empty_like(stack)
    for i in range(0, len(stack), chunk):
        out[i:i + chunk] = model.forward(stack[i:i + chunk])
    for layer in model.layers:
        layer._cache = None
    return out


def _gather_tiles(batches) -> np.ndarray:
    stacks = [b.stack() for b in batches if b.n_retained]
    if not stacks:
        raise DataError("no tiles to train on")
    stack = np.concatenate(stacks)
    if stack.min() < 0 or stack.max() > 1:
        raise DataError("training tiles must lie in [0, 1]")
    return stack


def train(model: CaeModel, tiles, cfg: TrainConfig = TrainConfig(), progress=None):
    """Fit the autoencoder to tiles with Adam on the MSE loss.

    Parameters
    ----------
    model : CaeModel
        Updated in place.
    tiles : list of TileBatch, or an (n, 1, 80, 80) array
        Tiles only; labels never reach this function.
    cfg : TrainConfig
    progress : callable, optional
        Called as ``progress(epoch, batch_index, n_batches, loss)``.

    Returns
    -------
    model, trace
        ``trace`` holds the mean loss of every epoch.
    """
    if isinstance(tiles, np.ndarray):
        stack = tiles.astype(np.float32, copy=False)
        if len(stack) == 0:
            raise DataError("no tiles to train on")
    else:
        stack = _gather_tiles(list(tiles))
    trace = []
    if cfg.epochs == 0:
        return model, trace
    rng = np.random.default_rng(cfg.seed)
    params = [p for _, _, p in model.net.parameters()]
    state = AdamState.for_params(params, lr=cfg.learning_rate)
    n = len(stack)
    n_batches = -(-n // cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = stack[idx]
            y = model.forward(x)
            loss, grad = mse_loss(y, x)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch + 1}, batch {b + 1}")
            model.net.backward(grad)
            adam_step(params, model.net.gradients(), state)
            total += loss * len(idx)
            if progress is not None:
                progress(epoch, b, n_batches, loss)
        trace.append(total / n)
        model.epoch_count += 1
        log.info("epoch %d/%d mean loss %.6g", epoch + 1, cfg.epochs, trace[-1])
    early = trace[:3]
    if any(later > earlier for earlier, later in zip(early, early[1:])):
        warnings.warn(f"training loss rose during the first epochs: {early}", RuntimeWarning)
    return model, trace


def _encode_fingerprint(fp) -> bytes:
    out = [struct.pack("<I", len(fp))]
    for dims in fp:
        values = [_LAYER_CODES[dims[0]]] + [int(v) for v in dims[1:]]
        out.append(struct.pack(f"<I{len(values)}i", len(values), *values))
    return b"".join(out)


def _read(buf, offset, fmt):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise FormatError("truncated model file")
    return struct.unpack_from(fmt, buf, offset), offset + size


def _decode_fingerprint(buf, offset):
    (n_layers,), offset = _read(buf, offset, "<I")
    if n_layers > 1000:
        raise FormatError("implausible layer count in model header")
    fp = []
    for _ in range(n_layers):
        (n_values,), offset = _read(buf, offset, "<I")
        if not 1 <= n_values <= 64:
            raise FormatError("implausible layer descriptor in model header")
        values, offset = _read(buf, offset, f"<{n_values}i")
        if values[0] not in _CODE_NAMES:
            raise IncompatibleModel(f"unknown layer code {values[0]}")
        fp.append((_CODE_NAMES[values[0]],) + tuple(values[1:]))
    return fp, offset


def model_bytes(model: CaeModel) -> bytes:
    header = MAGIC + struct.pack("<QI", model.seed, model.epoch_count)
    header += _encode_fingerprint(model.fingerprint())
    payload = b"".join(np.asarray(p, dtype="<f4").tobytes() for _, _, p in model.net.parameters())
    return header + payload


def save(model: CaeModel, path):
    try:
        Path(path).write_bytes(model_bytes(model))
    except OSError as exc:
        raise IoError(f"cannot write model {path}: {exc}") from exc


def model_from_bytes(buf: bytes) -> CaeModel:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a CAE1 model file")
    (seed, epochs), offset = _read(buf, len(MAGIC), "<QI")
    fp, offset = _decode_fingerprint(buf, offset)
    try:
        widths = (fp[0][2], fp[3][2], fp[6][2])
        model = build(seed, widths=widths)
    except (IndexError, TypeError, ValueError, ArchitectureError) as exc:
        raise IncompatibleModel(f"model header does not describe this autoencoder: {exc}") from exc
    if model.fingerprint() != fp:
        raise IncompatibleModel("architecture fingerprint does not match the autoencoder")
    params = [p for _, _, p in model.net.parameters()]
    need = 4 * sum(p.size for p in params)
    if len(buf) - offset != need:
        raise FormatError(f"model payload has {len(buf) - offset} bytes, expected {need}")
    for p in params:
        p[...] = np.frombuffer(buf, dtype="<f4", count=p.size, offset=offset).reshape(p.shape)
        offset += 4 * p.size
    model.epoch_count = epochs
    return model


def load(path) -> CaeModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    return model_from_bytes(buf)
