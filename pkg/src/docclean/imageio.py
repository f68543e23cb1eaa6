"""Reading and writing page images (PNG, PGM, PPM) through Pillow."""
import numpy as np
from PIL import Image

from .features import PageRaster


def read_page(path):
    """Load an image as a PageRaster with values in [0, 1].

    Greyscale images give one channel, everything else is converted to RGB.
    """
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64)
            return PageRaster(np.clip(a / (65535.0 if a.max() > 255 else 255.0), 0.0, 1.0))
        if im.mode in ("1", "L", "LA"):
            a = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            a = np.asarray(im.convert("RGB"), dtype=np.float64)
    return PageRaster(a / 255.0)


def to_uint8(page):
    return np.round(np.clip(page.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_page(path, page, format=None):
    """Save as 8-bit greyscale or RGB; the format follows the file suffix."""
    a = to_uint8(page)
    im = Image.fromarray(a[:, :, 0] if page.channels == 1 else a, mode="L" if page.channels == 1 else "RGB")
    im.save(path, format=format)
