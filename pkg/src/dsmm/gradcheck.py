"""End-to-end gradient verification on a one-block instance.

Analytic gradients of the training loss are compared against central
finite differences for every parameter group, including the constrained
sampling kernels (perturbed directly, as free variables).  A naive
check would re-run the whole forward pass twice per coordinate; here
each group's probe recomputes only the layers it can affect, and the
large mid-stack kernel exploits linearity — perturbing one output
channel's weights shifts that channel's pre-activation by a known
column, so the remaining work is a ReLU and one small matvec.  The
shortcuts are exact reformulations, not approximations, and
:func:`fd_single` keeps the slow full-pipeline probe available so tests
can spot-check them.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .reconstruction import ReconstructionParams, _specs, forward, reshape_concat
from .sampling import SamplingLayerState, constrained_matrix, measurement_dim
from .seeding import stream
from .tensor_ops import ConvSpec, conv2d_backward, conv2d_forward, mse_loss, relu

GROUPS = ("sampling", "init_w", "init_b", "conv1_w", "conv1_b",
          "conv2_w", "conv2_b", "conv3_w", "conv3_b")
DEFAULT_TOL = 1e-5


@dataclass
class GradcheckInstance:
    batch: np.ndarray
    phi: object
    recon: ReconstructionParams
    residual: bool

    @property
    def kernels(self):
        return self.phi.as_kernels()

    @property
    def sampling_spec(self):
        b = self.phi.block_size
        return ConvSpec(kernel_size=(b, b), stride=(b, b),
                        out_channels=self.phi.n_b)


def build_instance(seed, block_size=8, sampling_ratio=0.25, alpha=0.2,
                   residual=True):
    """One random block, one constrained matrix, fresh network weights."""
    rng = stream(seed, "gradcheck")
    batch = rng.uniform(size=(1, 1, block_size, block_size))
    n_b = measurement_dim(sampling_ratio, block_size)
    state = SamplingLayerState.initialize(n_b, block_size, alpha, rng)
    recon = ReconstructionParams.initialize(n_b, block_size, rng)
    return GradcheckInstance(batch=batch, phi=constrained_matrix(state),
                             recon=recon, residual=residual)


def full_loss(inst, kernels=None, recon=None):
    """The training loss computed from scratch."""
    kernels = inst.kernels if kernels is None else kernels
    recon = inst.recon if recon is None else recon
    meas = conv2d_forward(inst.batch, kernels, None, inst.sampling_spec)
    cache = forward(meas, recon, residual=inst.residual)
    return mse_loss(cache.out, inst.batch)[0]


def analytic_gradients(inst):
    """Backprop gradients for every group, keyed like GROUPS."""
    from .reconstruction import backward

    meas = conv2d_forward(inst.batch, inst.kernels, None, inst.sampling_spec)
    cache = forward(meas, inst.recon, residual=inst.residual)
    _, grad_out = mse_loss(cache.out, inst.batch)
    grad_meas, recon_grads = backward(inst.recon, cache, grad_out)
    _, grad_kernels, _ = conv2d_backward(inst.batch, inst.kernels,
                                         inst.sampling_spec, grad_meas)
    grads = dict(recon_grads)
    grads["sampling"] = grad_kernels
    return grads


def fd_single(inst, group, flat_index, eps=1e-6):
    """Plain full-pipeline central difference for one coordinate."""
    if group == "sampling":
        base = inst.kernels
        def evaluate(arr):
            return full_loss(inst, kernels=arr)
    else:
        base = getattr(inst.recon, group)
        def evaluate(arr):
            trial = inst.recon.copy()
            setattr(trial, group, arr)
            return full_loss(inst, recon=trial)
    plus = base.copy()
    minus = base.copy()
    plus.reshape(-1)[flat_index] += eps
    minus.reshape(-1)[flat_index] -= eps
    return (evaluate(plus) - evaluate(minus)) / (2.0 * eps)


def _fd_over(base, evaluate, eps):
    flat = base.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        lp = evaluate(base)
        flat[i] = saved - eps
        lm = evaluate(base)
        flat[i] = saved
        out[i] = (lp - lm) / (2.0 * eps)
    return out.reshape(base.shape)


def _single_channel_taps(block_size, kernel=3):
    """Index tables mapping one channel of a padded 3x3 conv to a matrix."""
    pad = kernel // 2
    outs, ins, kis, kjs = [], [], [], []
    for oy in range(block_size):
        for ox in range(block_size):
            for di in range(-pad, pad + 1):
                for dj in range(-pad, pad + 1):
                    iy, ix = oy + di, ox + dj
                    if 0 <= iy < block_size and 0 <= ix < block_size:
                        outs.append(oy * block_size + ox)
                        ins.append(iy * block_size + ix)
                        kis.append(di + pad)
                        kjs.append(dj + pad)
    return (np.asarray(outs), np.asarray(ins),
            np.asarray(kis), np.asarray(kjs))


def fd_gradients(inst, eps=1e-6):
    """Central differences for all groups, organized for speed.

    Every group perturbs real parameters and evaluates the same
    mathematical loss; groups differ only in how much of the pipeline
    they recompute.
    """
    recon = inst.recon
    specs = _specs(recon)
    b = inst.phi.block_size
    p = b * b
    hidden = recon.conv1_w.shape[0]

    # Baseline activations shared by the suffix probes.
    meas = conv2d_forward(inst.batch, inst.kernels, None, inst.sampling_spec)
    lifted = conv2d_forward(meas, recon.init_w, recon.init_b, specs["init"])
    x0 = reshape_concat(lifted, b)
    z1 = conv2d_forward(x0, recon.conv1_w, recon.conv1_b, specs["conv1"])
    a1 = relu(z1)
    z2 = conv2d_forward(a1, recon.conv2_w, recon.conv2_b, specs["conv2"])
    a2 = relu(z2)
    z3 = conv2d_forward(a2, recon.conv3_w, recon.conv3_b, specs["conv3"])

    target_vec = inst.batch.reshape(-1)
    x0_vec = x0.reshape(-1)

    def loss_from_z3vec(z3_vec):
        out = z3_vec + x0_vec if inst.residual else z3_vec
        d = out - target_vec
        return 0.5 * float(d @ d)

    def loss_from_x0(x0_arr):
        z1_ = conv2d_forward(x0_arr, recon.conv1_w, recon.conv1_b, specs["conv1"])
        z2_ = conv2d_forward(relu(z1_), recon.conv2_w, recon.conv2_b, specs["conv2"])
        z3_ = conv2d_forward(relu(z2_), recon.conv3_w, recon.conv3_b, specs["conv3"])
        out = z3_ + x0_arr if inst.residual else z3_
        return mse_loss(out, inst.batch)[0]

    out = {}

    out["sampling"] = _fd_over(
        inst.kernels.copy(),
        lambda kern: full_loss(inst, kernels=kern), eps)

    def from_init(w, bias):
        lifted_ = conv2d_forward(meas, w, bias, specs["init"])
        return loss_from_x0(reshape_concat(lifted_, b))

    out["init_w"] = _fd_over(recon.init_w.copy(),
                             lambda w: from_init(w, recon.init_b), eps)
    out["init_b"] = _fd_over(recon.init_b.copy(),
                             lambda bias: from_init(recon.init_w, bias), eps)

    def from_conv1(w, bias):
        z1_ = conv2d_forward(x0, w, bias, specs["conv1"])
        z2_ = conv2d_forward(relu(z1_), recon.conv2_w, recon.conv2_b, specs["conv2"])
        z3_ = conv2d_forward(relu(z2_), recon.conv3_w, recon.conv3_b, specs["conv3"])
        return loss_from_z3vec(z3_.reshape(-1))

    out["conv1_w"] = _fd_over(recon.conv1_w.copy(),
                              lambda w: from_conv1(w, recon.conv1_b), eps)
    out["conv1_b"] = _fd_over(recon.conv1_b.copy(),
                              lambda bias: from_conv1(recon.conv1_w, bias), eps)

    def from_conv2_bias(bias):
        z2_ = conv2d_forward(a1, recon.conv2_w, bias, specs["conv2"])
        z3_ = conv2d_forward(relu(z2_), recon.conv3_w, recon.conv3_b, specs["conv3"])
        return loss_from_z3vec(z3_.reshape(-1))

    out["conv2_b"] = _fd_over(recon.conv2_b.copy(), from_conv2_bias, eps)

    # conv2_w: perturbing weight (k, j) moves channel k's pre-activation by
    # eps times column j of conv2's input patches, and nothing else.  The
    # change is pushed through the last conv as a per-channel matrix.
    from .tensor_ops import _im2col, _pad

    cols2 = _im2col(_pad(a1, specs["conv2"].padding), specs["conv2"], (b, b))[0]  # (p, fan_in)
    z2_pc = z2[0].reshape(hidden, p).T                                    # (p, hidden)
    a2_pc = np.maximum(z2_pc, 0.0)
    outs, ins, kis, kjs = _single_channel_taps(b)
    taps = np.zeros((hidden, p, p))
    taps[:, outs, ins] = recon.conv3_w[0][:, kis, kjs]
    z3_vec = z3.reshape(-1)
    contrib = np.einsum("kij,jk->ik", taps, a2_pc)      # (p, hidden)
    rest = z3_vec.reshape(-1, 1) - contrib              # (p, hidden)

    w2f = recon.conv2_w.reshape(hidden, -1)
    fd_w2 = np.empty_like(w2f)
    for k in range(hidden):
        base_k = z2_pc[:, k]
        tap_k = taps[k]
        rest_k = rest[:, k]
        for j in range(w2f.shape[1]):
            col = cols2[:, j]
            zp = base_k + eps * col
            zm = base_k - eps * col
            lp = loss_from_z3vec(rest_k + tap_k @ np.maximum(zp, 0.0))
            lm = loss_from_z3vec(rest_k + tap_k @ np.maximum(zm, 0.0))
            fd_w2[k, j] = (lp - lm) / (2.0 * eps)
    out["conv2_w"] = fd_w2.reshape(recon.conv2_w.shape)

    cols3 = _im2col(_pad(a2, specs["conv3"].padding), specs["conv3"], (b, b))[0]

    def from_conv3(w, bias):
        z3_pc = cols3 @ w.reshape(1, -1).T + bias
        return loss_from_z3vec(z3_pc.reshape(-1))

    out["conv3_w"] = _fd_over(recon.conv3_w.copy(),
                              lambda w: from_conv3(w, recon.conv3_b), eps)
    out["conv3_b"] = _fd_over(recon.conv3_b.copy(),
                              lambda bias: from_conv3(recon.conv3_w, bias), eps)
    return out


def relative_errors(analytic, numeric):
    """Per-group max |analytic - fd| scaled by the group's largest fd."""
    out = {}
    for name in GROUPS:
        a = analytic[name].reshape(-1)
        f = numeric[name].reshape(-1)
        scale = max(float(np.max(np.abs(f))), 1e-12)
        out[name] = float(np.max(np.abs(a - f))) / scale
    return out


def run_gradcheck(seed, eps=1e-6, tol=DEFAULT_TOL,
                  corrupt_hook: Optional[Callable[[Dict], Dict]] = None):
    """Errors per group for one seed; ``corrupt_hook`` is a test-only
    knob that tampers with the analytic gradients (negative control)."""
    inst = build_instance(seed)
    analytic = analytic_gradients(inst)
    if corrupt_hook is not None:
        analytic = corrupt_hook(analytic)
    errors = relative_errors(analytic, fd_gradients(inst, eps))
    return errors, all(v < tol for v in errors.values())
