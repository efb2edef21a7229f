"""Grayscale image loading and saving.

Accepted inputs are 8-bit PNG and PGM; color PNGs are converted with
ITU-R BT.601 luma weights (0.299, 0.587, 0.114).  Pixels map to floats
in [0, 1] by dividing by 255.  Writers quantize back to 8 bits with
round-half-away (numpy rint) after clipping.
"""

import os

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError

EXTENSIONS = (".png", ".pgm")
LUMA = (0.299, 0.587, 0.114)


def load_image(path):
    """Read one image as a 2-D float64 array in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from None
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    if img.mode in ("P", "1"):
        img = img.convert("RGB")
    if img.mode in ("RGB", "RGBA"):
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
        return (rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1]
                + rgb[..., 2] * LUMA[2]) / 255.0
    raise FormatError(f"{path}: unsupported mode {img.mode!r}; "
                      f"only 8-bit grayscale or color images are accepted")


def save_image(path, array):
    """Write a [0, 1] float image as 8-bit PNG or PGM, atomically."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D image, got shape {arr.shape}")
    ext = os.path.splitext(path)[1].lower()
    if ext not in EXTENSIONS:
        raise ValidationError(f"unsupported extension {ext!r}; "
                              f"use one of {EXTENSIONS}")
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil_format = "PNG" if ext == ".png" else "PPM"
    tmp = path + ".tmp"
    Image.fromarray(quantized, mode="L").save(tmp, format=pil_format)
    os.replace(tmp, path)


def scan_images(directory):
    """Paths of all PNG/PGM files directly in a directory, sorted by name."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"image directory not found: {directory}")
    names = [n for n in sorted(os.listdir(directory))
             if os.path.splitext(n)[1].lower() in EXTENSIONS]
    return [os.path.join(directory, n) for n in names]


def load_directory(directory):
    """Load every image in lexicographic filename order."""
    paths = scan_images(directory)
    if not paths:
        raise FileNotFoundError(f"no PNG/PGM images in {directory}")
    return [load_image(p) for p in paths], paths
