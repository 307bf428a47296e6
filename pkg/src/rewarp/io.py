"""8-bit image files (PNG, binary PPM/PGM) through Pillow."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Image


def read_image(path) -> Image:
    with PILImage.open(Path(path)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return Image.from_array(arr)


def write_image(path, img: Image) -> None:
    """Write an 8-bit file; invalid pixels are written black."""
    arr = img.to_uint8()
    arr[~img.valid] = 0
    PILImage.fromarray(arr).save(Path(path))
