"""PNG encoding for renders, masks and 16-bit depth maps."""

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def to_uint8_rgb(color):
    """Float RGB in [0, 1] to 8-bit."""
    return np.rint(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)


def mask_to_uint8(mask):
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def encode_png(arr):
    """Encode a uint8 (H, W) / (H, W, 3) or uint16 (H, W) array as PNG bytes."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint16:
        if arr.ndim != 2:
            raise ValidationError("16-bit PNG export supports grayscale only")
        img = Image.fromarray(arr)
    elif arr.dtype == np.uint8 and arr.ndim in (2, 3):
        img = Image.fromarray(arr)
    else:
        raise ValidationError(f"cannot encode {arr.dtype} array of shape {arr.shape}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, arr):
    Path(path).write_bytes(encode_png(arr))


def read_image(path, mode=None):
    """Load an image as a numpy array; 16-bit grayscale stays uint16."""
    with Image.open(path) as img:
        if mode is not None:
            img = img.convert(mode)
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(img, dtype=np.uint16) if img.mode != "I" else np.asarray(img).astype(np.int64)
        return np.asarray(img)
