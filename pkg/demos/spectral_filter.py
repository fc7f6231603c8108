"""
How the background filter decides which tiles reach the autoencoder.

A diffraction shot is mostly flat background with a few sharp Bragg peaks.
The spectral inverse participation ratio (sIPR) of a tile's periodogram is
small when power is spread evenly over frequencies and large when it is
concentrated, so a single cut separates the two kinds of tile.

    python demos/spectral_filter.py
"""
import numpy as np

from uedanomaly import imagio, synthgen, tiling

n = tiling.n_bins()
print(f"an 80x80 tile has N = {n} non-DC frequency bins; the cut is {tiling.RELATIVE_THRESHOLD} / N")

# reference values: a constant tile, a pure sinusoid and white noise
yy, xx = np.mgrid[0:80, 0:80]
print(f"constant tile      sIPR * N = {tiling.spectral_ipr(np.ones((80, 80))) * n:.4f}")
print(f"single sinusoid    sIPR     = {tiling.spectral_ipr(np.sin(2 * np.pi * (3 * xx + 5 * yy) / 80)):.6f}")
noise = tiling._sipr_stack(np.random.default_rng(0).standard_normal((500, 80, 80)))
# conjugate bins share one value, so white noise sits near 2 / N rather than 1 / N
print(f"white noise        sIPR * N = {noise.mean() * n:.3f}  (periodogram theory: {n / 3198:.3f})")

# a synthetic shot, tiled the way the pipeline tiles it
img, _ = synthgen.generate(synthgen.SynthConfig(image_size=512, seed=1))
tiles = tiling.tile_image(imagio.normalize(img))
values = np.array([t.sipr for t in tiles]) * n
batch = tiling.filter_background(tiles)
print(f"\n512 px shot: {len(tiles)} tiles, {batch.n_retained} retained")
print("sIPR * N per tile (rows of the tile grid):")
side = int(np.sqrt(len(tiles)))
for row in values.reshape(side, side):
    print("  " + " ".join(f"{v:6.1f}" for v in row))

# blurring a shot concentrates its spectrum, raising the sIPR of peak tiles
blurred, _ = synthgen.generate(synthgen.SynthConfig(image_size=512, seed=1, anomaly=synthgen.blur(4)))
peak = max(range(len(tiles)), key=lambda i: values[i])
r, c = tiles[peak].origin
after = tiling.spectral_ipr(imagio.normalize(blurred).pixels[r:r + 80, c:c + 80]) * n
print(f"\nbrightest tile at {tiles[peak].origin}: sIPR * N = {values[peak]:.1f}, after blur(4) {after:.1f}")
