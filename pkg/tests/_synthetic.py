"""Synthetic grayscale corpus for the end-to-end acceptance run.

The images are smooth (cosine mixtures, soft blobs, a global ramp), so they
compress well under a blockwise DCT — the regime the solver is built for —
while still having enough structure that a learned sampling matrix can beat
an unstructured Gaussian one.
"""
import numpy as np

from dsmm.seeding import stream


def make_image(rng, size=64):
    """One smooth grayscale image in [0.05, 0.95]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    for _ in range(rng.integers(3, 7)):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.2, 1.0)
        img += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        s = rng.uniform(0.05, 0.25)
        amp = rng.uniform(-1.0, 1.0)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    g = rng.uniform(-0.5, 0.5, 2)
    img += g[0] * xx + g[1] * yy
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def corpus(seed, count, size=64, tag="train"):
    return [make_image(stream(seed, f"corpus-{tag}", i), size)
            for i in range(count)]
