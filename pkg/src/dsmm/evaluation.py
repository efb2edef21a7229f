"""Quality metrics and the matrix-comparison pipeline.

PSNR assumes a dynamic range of 1 (images in [0, 1]); SSIM is the
single-scale variant with an 11x11 Gaussian window (sigma 1.5) and the
standard stability constants, evaluated only where the window fits
entirely inside the image.  The comparison harness runs every (image,
matrix, reconstructor) cell of a small grid and reports per-image rows,
per-cell means, and learned-minus-gaussian gain rows.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import MatrixMismatch, ShapeError, ValidationError
from .sampling import MeasurementMatrix, measurement_dim, sample_image
from .seeding import stream
from .tensor_ops import ConvSpec, conv2d_forward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images scaled to [0, 1].

    Identical inputs give +inf (serialized as ``inf`` in reports).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("image", f"shapes {a.shape} and {b.shape} differ")
    # fsum keeps the mean correctly rounded; plain pairwise summation can
    # land an ulp off and visibly pollutes round-number decibel values.
    sq = ((a - b) ** 2).ravel()
    mse = math.fsum(sq.tolist()) / sq.size
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window():
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    window = np.outer(g, g)
    return window / np.sum(window)


_SSIM_SPEC = ConvSpec(kernel_size=(SSIM_WINDOW, SSIM_WINDOW), stride=(1, 1),
                      out_channels=1)
_SSIM_KERNEL = _gaussian_window().reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def _windowed_mean(img):
    out = conv2d_forward(img.reshape(1, 1, *img.shape), _SSIM_KERNEL, None,
                         _SSIM_SPEC)
    return out[0, 0]


def ssim(a, b):
    """Mean local structural similarity of two [0, 1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("image", f"shapes {a.shape} and {b.shape} differ")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValidationError(
            f"ssim needs 2-D images at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
            f"got {a.shape}")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _windowed_mean(a)
    mu_b = _windowed_mean(b)
    var_a = _windowed_mean(a * a) - mu_a * mu_a
    var_b = _windowed_mean(b * b) - mu_b * mu_b
    cov = _windowed_mean(a * b) - mu_a * mu_b
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
             / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    return float(np.mean(score))


def generate_grm(n_b, n_B, seed):
    """Row-normalized Gaussian baseline matrix, deterministic per seed."""
    if n_b > n_B:
        warnings.warn(f"n_b={n_b} exceeds n_B={n_B}; the system is "
                      f"overdetermined", stacklevel=2)
    block = int(round(math.sqrt(n_B)))
    if block * block != n_B:
        raise ValidationError(f"n_B={n_B} is not a perfect square")
    entries = stream(seed, "grm").standard_normal((n_b, n_B))
    norms = np.linalg.norm(entries, axis=1, keepdims=True)
    if np.any(norms == 0.0):  # pragma: no cover - measure-zero event
        raise ValidationError("drawn a zero row; pick another seed")
    return MeasurementMatrix(n_b=n_b, n_B=n_B, block_size=block,
                             sparsity_degree=1.0, entries=entries / norms,
                             provenance="gaussian")


def blockify(image, block_size, mode="replicate"):
    """Extend (or truncate) an image so both extents divide by the block.

    Returns ``(adjusted, (h, w))`` with the original dims for
    :func:`unblockify`.  Replicate mode repeats the last row/column;
    crop mode drops the remainder and fails on images smaller than one
    block.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("image", f"expected 2-D, got shape {img.shape}")
    h, w = img.shape
    b = block_size
    if mode == "replicate":
        ph = (b - h % b) % b
        pw = (b - w % b) % b
        if ph or pw:
            img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
        return img, (h, w)
    if mode == "crop":
        if h < b or w < b:
            raise ValidationError(
                f"cannot crop {h}x{w} image to {b}x{b} blocks")
        return img[:h - h % b, :w - w % b], (h - h % b, w - w % b)
    raise ValidationError(f"unknown blockify mode {mode!r}")


def unblockify(image, original_dims):
    """Crop a padded image back to its pre-blockify extent."""
    h, w = original_dims
    img = np.asarray(image)
    if img.shape[0] < h or img.shape[1] < w:
        raise ShapeError("image", f"cannot crop {img.shape} to {(h, w)}")
    return img[:h, :w]


@dataclass(frozen=True)
class ReportRow:
    image: str
    matrix: str
    ratio: float
    reconstructor: str
    psnr_db: float
    ssim: float


@dataclass
class ComparisonReport:
    rows: List[ReportRow]
    config: Dict[str, object] = field(default_factory=dict)

    def cell_mean(self, matrix, ratio, reconstructor):
        vals = [(r.psnr_db, r.ssim) for r in self.rows
                if r.matrix == matrix and r.ratio == ratio
                and r.reconstructor == reconstructor]
        if not vals:
            raise ValidationError(
                f"no rows for cell ({matrix}, {ratio}, {reconstructor})")
        ps = [v[0] for v in vals]
        ss = [v[1] for v in vals]
        return sum(ps) / len(ps), sum(ss) / len(ss)

    def cells(self):
        seen = []
        for r in self.rows:
            key = (r.matrix, r.ratio, r.reconstructor)
            if key not in seen:
                seen.append(key)
        return seen

    def gains(self):
        """learned-minus-gaussian mean differences per (ratio, reconstructor).

        Matrix labels are expected to carry their provenance prefix
        ("learned"/"gaussian"), as produced by :func:`run_comparison`.
        """
        out = {}
        pairs = {(ratio, rec) for (_, ratio, rec) in self.cells()}
        for ratio, rec in sorted(pairs):
            learned = [m for (m, rt, rc) in self.cells()
                       if rt == ratio and rc == rec and m.startswith("learned")]
            gaussian = [m for (m, rt, rc) in self.cells()
                        if rt == ratio and rc == rec and m.startswith("gaussian")]
            if len(learned) == 1 and len(gaussian) == 1:
                lp, ls = self.cell_mean(learned[0], ratio, rec)
                gp, gs = self.cell_mean(gaussian[0], ratio, rec)
                out[(ratio, rec)] = (lp - gp, ls - gs)
        return out


def run_comparison(images, matrices, ratios, reconstructors,
                   image_names=None, pad_mode="replicate", config_echo=None):
    """Score every (image, matrix, reconstructor) cell of the grid.

    ``matrices`` and ``ratios`` pair up elementwise and each pair must be
    geometry-consistent (n_b = floor(ratio * B^2)).  ``reconstructors``
    maps a label to ``f(measurements, phi) -> images``.  Reconstructions
    are clipped to [0, 1] before scoring.  Matrix labels in the report
    are ``provenance + index``.
    """
    if len(matrices) != len(ratios):
        raise ValidationError("need one ratio per matrix")
    for phi, ratio in zip(matrices, ratios):
        expected = measurement_dim(ratio, phi.block_size)
        if phi.n_b != expected:
            raise MatrixMismatch(
                f"ratio {ratio} at block {phi.block_size} expects "
                f"n_b={expected}, matrix has n_b={phi.n_b}")
    if image_names is None:
        image_names = [f"image{i:02d}" for i in range(len(images))]
    if len(image_names) != len(images):
        raise ValidationError("need one name per image")

    rows = []
    for img_name, img in zip(image_names, images):
        img = np.asarray(img, dtype=np.float64)
        for m_idx, (phi, ratio) in enumerate(zip(matrices, ratios)):
            label = f"{phi.provenance}{m_idx}"
            padded, dims = blockify(img, phi.block_size, mode=pad_mode)
            meas = sample_image(padded.reshape(1, 1, *padded.shape), phi)
            target = unblockify(padded, dims)
            for rec_name in sorted(reconstructors):
                recon = reconstructors[rec_name](meas, phi)
                result = np.clip(unblockify(recon[0, 0], dims), 0.0, 1.0)
                rows.append(ReportRow(image=img_name, matrix=label,
                                      ratio=ratio, reconstructor=rec_name,
                                      psnr_db=psnr(target, result),
                                      ssim=ssim(target, result)))
    return ComparisonReport(rows=rows, config=dict(config_echo or {}))


def write_report_csv(path, report):
    import os
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write("image,matrix,ratio,reconstructor,psnr_db,ssim\n")
        for r in report.rows:
            fh.write(f"{r.image},{r.matrix},{r.ratio!r},{r.reconstructor},"
                     f"{r.psnr_db!r},{r.ssim!r}\n")
    os.replace(tmp, path)


def write_summary_csv(path, report):
    import os
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write("kind,matrix,ratio,reconstructor,psnr_db,ssim\n")
        for matrix, ratio, rec in report.cells():
            mp, ms = report.cell_mean(matrix, ratio, rec)
            fh.write(f"mean,{matrix},{ratio!r},{rec},{mp!r},{ms!r}\n")
        for (ratio, rec), (gp, gs) in sorted(report.gains().items()):
            fh.write(f"gain,,{ratio!r},{rec},{gp!r},{gs!r}\n")
    os.replace(tmp, path)
