"""Dense float64 tensor primitives: strided 2-D convolution with exact
backward, ReLU, batch-mean squared-error loss, and a central finite-difference
gradient oracle.

Layout convention is (batch, channels, height, width) throughout. Convolution
is cross-correlation (no kernel flip) so matrix rows can be read off kernels
directly. All reductions run in a fixed order (channel-major, then kernel row,
then kernel column) so identical inputs give bit-identical outputs across runs.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError


def as_tensor(x):
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class ConvSpec:
    """Static shape contract of a convolution.

    kernel_size / stride / padding are (height, width) pairs.
    """

    kernel_size: tuple
    stride: tuple
    out_channels: int
    has_bias: bool = False
    padding: tuple = (0, 0)

    def __post_init__(self):
        for name, pair in (("kernel_size", self.kernel_size),
                           ("stride", self.stride)):
            if len(pair) != 2 or min(pair) < 1:
                raise ShapeError(name, f"{name} must be a positive pair, got {pair}")
        if len(self.padding) != 2 or min(self.padding) < 0:
            raise ShapeError("padding", f"padding must be a non-negative pair, got {self.padding}")
        if self.out_channels < 1:
            raise ShapeError("out_channels", f"out_channels must be >= 1, got {self.out_channels}")

    def out_extent(self, in_hw):
        """Output (H', W') for an input of spatial size (H, W)."""
        h = (in_hw[0] + 2 * self.padding[0] - self.kernel_size[0]) // self.stride[0] + 1
        w = (in_hw[1] + 2 * self.padding[1] - self.kernel_size[1]) // self.stride[1] + 1
        if h < 1:
            raise ShapeError("height", f"input height {in_hw[0]} too small for {self}")
        if w < 1:
            raise ShapeError("width", f"input width {in_hw[1]} too small for {self}")
        return h, w


def _check_conv_args(x, kernels, bias, spec):
    if x.ndim != 4:
        raise ShapeError("batch", f"input must be 4-D (N,C,H,W), got shape {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError("out_channels", f"kernels must be 4-D (K,C,kh,kw), got shape {kernels.shape}")
    if kernels.shape[1] != x.shape[1]:
        raise ShapeError("channels",
                         f"input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}")
    if kernels.shape[0] != spec.out_channels:
        raise ShapeError("out_channels",
                         f"kernels provide {kernels.shape[0]} filters, spec says {spec.out_channels}")
    if tuple(kernels.shape[2:]) != tuple(spec.kernel_size):
        raise ShapeError("kernel_size",
                         f"kernels are {kernels.shape[2:]}, spec says {spec.kernel_size}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError("out_channels",
                         f"bias has shape {bias.shape}, expected ({spec.out_channels},)")


def _pad(x, padding):
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp, spec, out_hw):
    """Gather sliding windows into [N, H'*W', C*kh*kw].

    The last axis flattens in (channel, kernel-row, kernel-column) order,
    matching a row-major flatten of a (K, C, kh, kw) kernel tensor, which
    fixes the reduction order of the convolution.
    """
    n, c, _, _ = xp.shape
    kh, kw = spec.kernel_size
    sh, sw = spec.stride
    ho, wo = out_hw
    sn, sc, sy, sx = xp.strides
    windows = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sy * sh, sx * sw, sc, sy, sx),
        writeable=False,
    )
    return windows.reshape(n, ho * wo, c * kh * kw)


def conv2d_forward(x, kernels, bias, spec):
    """Strided cross-correlation of x [N,C,H,W] with kernels [K,C,kh,kw].

    Returns [N,K,H',W'] with extents given by ``spec.out_extent``.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    bias = None if bias is None else as_tensor(bias)
    _check_conv_args(x, kernels, bias, spec)

    out_hw = spec.out_extent(x.shape[2:])
    xp = _pad(x, spec.padding)
    cols = _im2col(xp, spec, out_hw)
    w = kernels.reshape(kernels.shape[0], -1)
    out = cols @ w.T                       # [N, H'*W', K]
    out = out.transpose(0, 2, 1).reshape(x.shape[0], spec.out_channels, *out_hw)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv2d_backward(x, kernels, spec, grad_output):
    """Exact gradients of conv2d_forward.

    Returns (grad_input, grad_kernels, grad_bias); grad_bias is None when
    spec.has_bias is False.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    _check_conv_args(x, kernels, None, spec)
    out_hw = spec.out_extent(x.shape[2:])
    expected = (x.shape[0], spec.out_channels, *out_hw)
    grad_output = as_tensor(grad_output)
    if grad_output.shape != expected:
        raise ShapeError("grad_output",
                         f"grad_output has shape {grad_output.shape}, expected {expected}")

    n, c, h, w_in = x.shape
    k = spec.out_channels
    kh, kw = spec.kernel_size
    sh, sw = spec.stride
    ho, wo = out_hw
    ph, pw = spec.padding

    xp = _pad(x, spec.padding)
    cols = _im2col(xp, spec, out_hw)                     # [N, P, C*kh*kw]
    g = grad_output.reshape(n, k, ho * wo).transpose(0, 2, 1)  # [N, P, K]

    # One flat GEMM accumulates over (batch, position) in index order.
    grad_w = g.reshape(-1, k).T @ cols.reshape(-1, c * kh * kw)
    grad_kernels = grad_w.reshape(k, c, kh, kw)

    grad_bias = grad_output.sum(axis=(0, 2, 3)) if spec.has_bias else None

    grad_cols = g @ kernels.reshape(k, -1)               # [N, P, C*kh*kw]
    grad_cols = grad_cols.reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_input = gxp[:, :, ph:ph + h, pw:pw + w_in] if (ph or pw) else gxp
    return grad_input, grad_kernels, grad_bias


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(0.0, as_tensor(x))


def relu_backward(x, grad_output):
    """Pass gradient where x > 0; subgradient 0 is used at x == 0."""
    x = as_tensor(x)
    grad_output = as_tensor(grad_output)
    if x.shape != grad_output.shape:
        raise ShapeError("shape", f"input {x.shape} vs grad_output {grad_output.shape}")
    return np.where(x > 0.0, grad_output, 0.0)


def mse_loss(pred, target, per_pixel=False):
    """Mean-square-error training loss and its gradient w.r.t. pred.

    loss = sum_i ||pred_i - target_i||^2 / (2 * D) where i runs over the
    batch. By default D is the batch size, i.e. squared norms are summed over
    all pixels of a sample and averaged only over the batch; with
    per_pixel=True, D additionally includes the per-sample element count.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("shape", f"pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    divisor = float(n * (pred.size // n)) if per_pixel else float(n)
    diff = pred - target
    loss = float(np.sum(diff * diff) / (2.0 * divisor))
    grad = diff / divisor
    return loss, grad


def finite_diff_grad(f, at, eps=1e-6):
    """Central-difference gradient of a scalar function at a point.

    Pure: perturbations happen on an internal copy. O(2 * at.size) calls
    to f, so intended for small tensors and test oracles.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    at = as_tensor(at)
    work = at.copy()
    flat = work.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(work)
        flat[i] = orig - eps
        fm = f(work)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(at.shape)
