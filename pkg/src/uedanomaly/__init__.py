"""
Unsupervised detection of anomalous single-shot diffraction images.

Images are cut into overlapping 80x80 tiles, background tiles are rejected
by their spectral inverse participation ratio, a convolutional autoencoder
reconstructs the rest, and the per-image log reconstruction error is
modelled as a two-component Rice mixture whose posterior gives p(normal | e)
and an automatic detection threshold.
"""
__version__ = "0.1.0"

from . import errors  # noqa: E402
from .errors import AnomalyError  # noqa: E402
