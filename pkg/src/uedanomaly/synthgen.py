"""
Seeded synthetic single-crystal diffraction shots.

A normal shot is a centro-symmetric rectangular lattice of Gaussian Bragg
peaks on a flat background, sampled with Poisson shot noise. Anomalous
shots apply one beam-instability transform before the noise:

* ``shift(dx, dy)``      the whole pattern is displaced;
* ``blur(sigma)``        peaks are broadened (defocused / hot beam);
* ``streak(angle, width, gain)``  a bright band crosses the pattern centre;
* ``dropout(fraction)``  that fraction of the beam charge is lost.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .errors import ContractViolation, DataError
from .imagio import ANOMALOUS, NORMAL, RAW, DatasetManifest, ImageRecord, ensure_dir, save_manifest, write_pgm

KINDS = ("none", "shift", "blur", "streak", "dropout")


@dataclass(frozen=True)
class Anomaly:
    kind: str = "none"
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown anomaly kind {self.kind!r}")

    def __str__(self):
        if self.kind == "none":
            return "none"
        return f"{self.kind}({','.join(f'{p:g}' for p in self.params)})"


NONE = Anomaly()


def shift(dx: float, dy: float) -> Anomaly:
    return Anomaly("shift", (float(dx), float(dy)))


def blur(sigma: float) -> Anomaly:
    return Anomaly("blur", (float(sigma),))


def streak(angle: float, width: float, gain: float) -> Anomaly:
    """``angle`` in degrees, ``width`` in pixels, ``gain`` relative to the peak amplitude."""
    return Anomaly("streak", (float(angle), float(width), float(gain)))


def dropout(fraction: float) -> Anomaly:
    return Anomaly("dropout", (float(fraction),))


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 512
    lattice_spacing: float = 34.0
    aspect: float = 1.3
    peak_sigma: float = 2.0
    n_peaks: int = 6
    base_intensity: float = 20.0
    peak_amplitude: float = 1500.0
    envelope: float = 110.0
    poisson_scale: float = 1.0
    intensity_jitter: float = 0.03
    centre_jitter: float = 0.5
    anomaly: Anomaly = NONE
    seed: int = 0
    crystal_seed: int = 2024

    def __post_init__(self):
        positive = (self.image_size, self.lattice_spacing, self.aspect, self.peak_sigma, self.n_peaks,
                    self.base_intensity, self.peak_amplitude, self.envelope, self.poisson_scale)
        if min(positive) <= 0:
            raise ContractViolation("geometric and intensity parameters must be positive")
        if self.anomaly.kind == "shift":
            dx, dy = self.anomaly.params
            if np.hypot(dx, dy) > self.image_size / 4:
                raise ContractViolation("shift magnitude must not exceed image_size / 4")
        if self.anomaly.kind == "dropout" and not 0 <= self.anomaly.params[0] < 1:
            raise ContractViolation("dropout fraction must lie in [0, 1)")


def _structure_factors(cfg: SynthConfig):
    """Fixed centro-symmetric amplitudes for lattice orders (i, j), origin excluded."""
    n = cfg.n_peaks
    rng = np.random.default_rng(cfg.crystal_seed)
    table = rng.uniform(0.3, 1.0, size=(2 * n + 1, 2 * n + 1))
    table = 0.5 * (table + table[::-1, ::-1])
    table[n, n] = 0.0
    return table


def peak_positions(cfg: SynthConfig, centre=None):
    """(row, col, relative amplitude) of every lattice peak, before jitter."""
    n = cfg.n_peaks
    if centre is None:
        centre = (cfg.image_size / 2.0, cfg.image_size / 2.0)
    sf = _structure_factors(cfg)
    out = []
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            if i == 0 and j == 0:
                continue
            r = centre[0] + i * cfg.lattice_spacing * cfg.aspect
            c = centre[1] + j * cfg.lattice_spacing
            g2 = (r - centre[0]) ** 2 + (c - centre[1]) ** 2
            amp = sf[i + n, j + n] * np.exp(-g2 / (2 * cfg.envelope ** 2))
            out.append((r, c, amp))
    return out


def _render_peaks(size, peaks, sigma):
    img = np.zeros((size, size))
    half = int(np.ceil(5 * sigma))
    for r, c, amp in peaks:
        r0, r1 = max(int(r) - half, 0), min(int(r) + half + 2, size)
        c0, c1 = max(int(c) - half, 0), min(int(c) + half + 2, size)
        if r0 >= r1 or c0 >= c1:
            continue
        gr = np.exp(-(np.arange(r0, r1) - r) ** 2 / (2 * sigma ** 2))
        gc = np.exp(-(np.arange(c0, c1) - c) ** 2 / (2 * sigma ** 2))
        img[r0:r1, c0:c1] += amp * np.outer(gr, gc)
    return img


def intensity(cfg: SynthConfig, rng=None) -> np.ndarray:
    """Noise-free expected counts of one shot (anomaly applied)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    size = cfg.image_size
    centre = np.array([size / 2.0, size / 2.0]) + rng.uniform(-cfg.centre_jitter, cfg.centre_jitter, 2)
    kind, params = cfg.anomaly.kind, cfg.anomaly.params
    if kind == "shift":
        centre = centre + np.array([params[1], params[0]])
    beam = 1.0 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
    peaks = [(r, c, a * beam * (1.0 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)))
             for r, c, a in peak_positions(cfg, centre)]
    signal = cfg.peak_amplitude * _render_peaks(size, peaks, cfg.peak_sigma)
    if kind == "blur":
        sigma = params[0]
        # broadened peaks keep their integrated charge
        signal = ndi.gaussian_filter(signal, sigma, mode="constant")
    elif kind == "streak":
        angle, width, gain = params
        rows, cols = np.mgrid[0:size, 0:size].astype(float)
        t = np.deg2rad(angle)
        dist = (rows - centre[0]) * np.cos(t) - (cols - centre[1]) * np.sin(t)
        signal = signal + gain * cfg.peak_amplitude * np.exp(-0.5 * (dist / (width / 2.0)) ** 2)
    elif kind == "dropout":
        signal = signal * (1.0 - params[0])
    return cfg.base_intensity + signal


def generate(cfg: SynthConfig, index: int | None = None):
    """Render one shot.

    Returns
    -------
    ImageRecord, str
        The raw 16-bit count image and its label (``"normal"`` / ``"anomalous"``).
    """
    seed = [cfg.seed] if index is None else [cfg.seed, index]
    rng = np.random.default_rng(seed)
    lam = intensity(cfg, rng)
    counts = rng.poisson(lam * cfg.poisson_scale) / cfg.poisson_scale
    counts = np.clip(np.rint(counts), 0, 65535)
    label = NORMAL if cfg.anomaly.kind == "none" else ANOMALOUS
    name = f"synth_{cfg.seed}" if index is None else f"img_{index:04d}"
    return ImageRecord(id=name, pixels=counts, norm_state=RAW), label


DEFAULT_MIX = (blur(3.0), streak(30.0, 24.0, 0.25), dropout(0.8))


@dataclass
class Corpus:
    manifest: DatasetManifest
    paths: list[Path] = field(default_factory=list)
    anomalies: list[Anomaly] = field(default_factory=list)


def generate_corpus(n_normal: int, n_anomalous: int, directory, mix=DEFAULT_MIX, seed: int = 0,
                    base: SynthConfig = SynthConfig(), manifest_name: str = "manifest.txt") -> Corpus:
    """Write ``n_normal + n_anomalous`` PGM shots plus a labelled manifest.

    Normal and anomalous shots are interleaved by a seeded permutation;
    anomaly kinds are taken from ``mix`` in turn.
    """
    if n_normal < 0 or n_anomalous < 0 or n_normal + n_anomalous < 20:
        raise DataError("a corpus needs at least 20 images")
    if n_anomalous and not mix:
        raise DataError("anomalous images requested with an empty anomaly mix")
    directory = ensure_dir(directory)
    order = np.random.default_rng([seed, 1 << 20]).permutation(n_normal + n_anomalous)
    is_anom = np.zeros(n_normal + n_anomalous, dtype=bool)
    is_anom[order[:n_anomalous]] = True
    entries, paths, anomalies = [], [], []
    k = 0
    for i in range(n_normal + n_anomalous):
        anomaly = NONE
        if is_anom[i]:
            anomaly = mix[k % len(mix)]
            k += 1
        cfg = replace(base, anomaly=anomaly, seed=seed)
        img, label = generate(cfg, index=i)
        path = directory / f"{img.id}.pgm"
        write_pgm(path, img.pixels, maxval=65535)
        entries.append((path.name, label))
        paths.append(path)
        anomalies.append(anomaly)
    manifest = DatasetManifest(entries=entries, seed=seed, root=str(directory))
    save_manifest(manifest, directory / manifest_name)
    return Corpus(manifest=manifest, paths=paths, anomalies=anomalies)
