"""Block-measurement reconstruction network.

A 1x1 convolution lifts each block's measurement vector back to n_B
values, a fixed permutation lays those out as B x B pixels, and a small
zero-padded conv stack (1 -> 64 -> 64 -> 1, ReLU between) refines the
result.  By default the stack output is added to the permuted initial
estimate so the deep path only has to learn a correction.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor_ops import ConvSpec, conv2d_backward, conv2d_forward, relu, relu_backward

HIDDEN_CHANNELS = 64
KERNEL = 3

PARAM_FIELDS = ("init_w", "init_b", "conv1_w", "conv1_b",
                "conv2_w", "conv2_b", "conv3_w", "conv3_b")


def _isqrt_checked(n_B):
    root = int(round(np.sqrt(n_B)))
    if root * root != n_B:
        raise ValidationError(f"n_B={n_B} is not a perfect square")
    return root


@dataclass
class ReconstructionParams:
    init_w: np.ndarray   # (n_B, n_b, 1, 1)
    init_b: np.ndarray   # (n_B,)
    conv1_w: np.ndarray  # (64, 1, 3, 3)
    conv1_b: np.ndarray  # (64,)
    conv2_w: np.ndarray  # (64, 64, 3, 3)
    conv2_b: np.ndarray  # (64,)
    conv3_w: np.ndarray  # (1, 64, 3, 3)
    conv3_b: np.ndarray  # (1,)

    @property
    def n_B(self):
        return self.init_w.shape[0]

    @property
    def n_b(self):
        return self.init_w.shape[1]

    @property
    def block_size(self):
        return _isqrt_checked(self.n_B)

    @classmethod
    def initialize(cls, n_b, block_size, rng, hidden=HIDDEN_CHANNELS):
        """Fresh parameters: 1/n_b variance for the lift, He for the stack."""
        n_B = block_size * block_size
        init_w = rng.normal(0.0, np.sqrt(1.0 / n_b), (n_B, n_b, 1, 1))
        conv1_w = rng.normal(0.0, np.sqrt(2.0 / (1 * KERNEL * KERNEL)),
                             (hidden, 1, KERNEL, KERNEL))
        conv2_w = rng.normal(0.0, np.sqrt(2.0 / (hidden * KERNEL * KERNEL)),
                             (hidden, hidden, KERNEL, KERNEL))
        conv3_w = rng.normal(0.0, np.sqrt(2.0 / (hidden * KERNEL * KERNEL)),
                             (1, hidden, KERNEL, KERNEL))
        return cls(init_w=init_w, init_b=np.zeros(n_B),
                   conv1_w=conv1_w, conv1_b=np.zeros(hidden),
                   conv2_w=conv2_w, conv2_b=np.zeros(hidden),
                   conv3_w=conv3_w, conv3_b=np.zeros(1))

    def named_arrays(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self):
        return ReconstructionParams(**{name: arr.copy()
                                       for name, arr in self.named_arrays()})


def _specs(params):
    hidden = params.conv1_w.shape[0]
    return {
        "init": ConvSpec(kernel_size=(1, 1), stride=(1, 1),
                         out_channels=params.n_B, has_bias=True),
        "conv1": ConvSpec(kernel_size=(KERNEL, KERNEL), stride=(1, 1),
                          out_channels=hidden, has_bias=True, padding=(1, 1)),
        "conv2": ConvSpec(kernel_size=(KERNEL, KERNEL), stride=(1, 1),
                          out_channels=hidden, has_bias=True, padding=(1, 1)),
        "conv3": ConvSpec(kernel_size=(KERNEL, KERNEL), stride=(1, 1),
                          out_channels=1, has_bias=True, padding=(1, 1)),
    }


def reshape_concat(x, block_size):
    """Scatter channel p*B + q of each block cell to pixel (p, q) of that block.

    (N, B*B, h, w) -> (N, 1, h*B, w*B).
    """
    n, n_B, h, w = x.shape
    b = block_size
    if n_B != b * b:
        raise ShapeError("channels", f"expected {b * b} channels, got {n_B}")
    return (x.reshape(n, b, b, h, w)
             .transpose(0, 3, 1, 4, 2)
             .reshape(n, 1, h * b, w * b))


def reshape_split(x, block_size):
    """Inverse permutation of :func:`reshape_concat`."""
    n, c, hh, ww = x.shape
    b = block_size
    if c != 1 or hh % b or ww % b:
        raise ShapeError("image", f"expected (N, 1, k*{b}, k*{b}), got {x.shape}")
    h, w = hh // b, ww // b
    return (x.reshape(n, h, b, w, b)
             .transpose(0, 2, 4, 1, 3)
             .reshape(n, b * b, h, w))


def initial_reconstruction(measurements, params):
    """Linear lift plus pixel scatter, no deep refinement."""
    spec = _specs(params)["init"]
    lifted = conv2d_forward(measurements, params.init_w, params.init_b, spec)
    return reshape_concat(lifted, params.block_size)


@dataclass
class ForwardCache:
    measurements: np.ndarray
    x0: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    out: np.ndarray
    residual: bool


def forward(measurements, params, residual=True):
    """Run the network; returns a cache whose ``out`` field is the image."""
    specs = _specs(params)
    lifted = conv2d_forward(measurements, params.init_w, params.init_b,
                            specs["init"])
    x0 = reshape_concat(lifted, params.block_size)
    z1 = conv2d_forward(x0, params.conv1_w, params.conv1_b, specs["conv1"])
    a1 = relu(z1)
    z2 = conv2d_forward(a1, params.conv2_w, params.conv2_b, specs["conv2"])
    a2 = relu(z2)
    z3 = conv2d_forward(a2, params.conv3_w, params.conv3_b, specs["conv3"])
    out = z3 + x0 if residual else z3
    return ForwardCache(measurements=measurements, x0=x0, z1=z1, a1=a1,
                        z2=z2, a2=a2, out=out, residual=residual)


def backward(params, cache, grad_output):
    """Backpropagate through the cache.

    Returns ``(grad_measurements, grads)`` where ``grads`` maps parameter
    names to arrays shaped like the parameters.
    """
    specs = _specs(params)
    grad_a2, g_conv3_w, g_conv3_b = conv2d_backward(
        cache.a2, params.conv3_w, specs["conv3"], grad_output)
    grad_z2 = relu_backward(cache.z2, grad_a2)
    grad_a1, g_conv2_w, g_conv2_b = conv2d_backward(
        cache.a1, params.conv2_w, specs["conv2"], grad_z2)
    grad_z1 = relu_backward(cache.z1, grad_a1)
    grad_x0, g_conv1_w, g_conv1_b = conv2d_backward(
        cache.x0, params.conv1_w, specs["conv1"], grad_z1)
    if cache.residual:
        grad_x0 = grad_x0 + grad_output
    grad_lifted = reshape_split(grad_x0, params.block_size)
    grad_meas, g_init_w, g_init_b = conv2d_backward(
        cache.measurements, params.init_w, specs["init"], grad_lifted)
    grads = {"init_w": g_init_w, "init_b": g_init_b,
             "conv1_w": g_conv1_w, "conv1_b": g_conv1_b,
             "conv2_w": g_conv2_w, "conv2_b": g_conv2_b,
             "conv3_w": g_conv3_w, "conv3_b": g_conv3_b}
    return grad_meas, grads
