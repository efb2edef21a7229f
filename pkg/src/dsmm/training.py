"""Joint training of the sampling kernels and the reconstruction network.

One step works on a copy-constrain-restore cycle: the unconstrained
sampling weights are saved, overwritten by their sparsified + normalized
view for the forward/backward pass, restored, and then updated with the
backprop gradient modulated elementwise by the normalization derivative
(the sparsifier itself passes gradients straight through).  Both
parameter groups use classical momentum SGD with weight decay applied to
the stored (for the sampling group: unconstrained) values.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, TrainingDiverged, ValidationError
from .reconstruction import ReconstructionParams, backward, forward
from .sampling import (
    SamplingLayerState,
    constrained_matrix,
    gradient_modulation,
    measurement_dim,
)
from .seeding import stream
from .tensor_ops import ConvSpec, conv2d_backward, conv2d_forward, mse_loss


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise schedule: flat head, two-decade decline, flat tail."""

    phase1_end: int = 30
    phase2_end: int = 70
    phase1_rate: float = 1e-3
    phase2_start_rate: float = 1e-4
    phase2_end_rate: float = 1e-6
    phase3_rate: float = 1e-6
    interpolation: str = "geometric"

    def __post_init__(self):
        if not (0 < self.phase1_end < self.phase2_end):
            raise ConfigError("lr_schedule", "phase boundaries must increase")
        rates = (self.phase1_rate, self.phase2_start_rate,
                 self.phase2_end_rate, self.phase3_rate)
        if any(r <= 0 for r in rates):
            raise ConfigError("lr_schedule", "rates must be positive")
        if not (self.phase1_rate >= self.phase2_start_rate
                >= self.phase2_end_rate >= self.phase3_rate):
            raise ConfigError("lr_schedule", "rates must be non-increasing")
        if self.interpolation not in ("geometric", "linear"):
            raise ConfigError("lr_schedule",
                              f"unknown interpolation {self.interpolation!r}")


def lr_at(epoch, schedule=None):
    """Learning rate for a 1-based epoch index."""
    schedule = schedule or LrSchedule()
    if epoch < 1:
        raise ConfigError("epoch", "must be >= 1")
    if epoch <= schedule.phase1_end:
        return schedule.phase1_rate
    if epoch > schedule.phase2_end:
        return schedule.phase3_rate
    span = schedule.phase2_end - schedule.phase1_end - 1
    t = (epoch - schedule.phase1_end - 1) / span if span > 0 else 0.0
    lo, hi = schedule.phase2_start_rate, schedule.phase2_end_rate
    if schedule.interpolation == "geometric":
        return 10.0 ** (math.log10(lo) + (math.log10(hi) - math.log10(lo)) * t)
    return lo + (hi - lo) * t


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    alpha: float
    block_size: int = 32
    sampling_ratio: float = 0.1
    patch_size: int = 96
    batch_size: int = 32
    epochs: int = 100
    iters_per_epoch: int = 600
    momentum: float = 0.9
    weight_decay: float = 1e-4
    weight_decay_sampling: Optional[float] = None  # None -> weight_decay
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    scale_range: Tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5
    augment: bool = True
    per_pixel_loss: bool = False
    residual: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", "must lie in [0, 1]")
        if self.block_size < 1:
            raise ConfigError("block_size", "must be >= 1")
        if (self.block_size <= self.patch_size
                and self.patch_size % self.block_size != 0):
            raise ConfigError("patch_size",
                              f"must be a multiple of block_size "
                              f"({self.patch_size} % {self.block_size} != 0)")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0 or self.iters_per_epoch < 1:
            raise ConfigError("epochs", "epochs >= 0, iters_per_epoch >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not self.scale_range[0] <= self.scale_range[1]:
            raise ConfigError("scale_range", "must be (low, high) with low <= high")
        if self.scale_range[0] <= 0:
            raise ConfigError("scale_range", "scales must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob", "must lie in [0, 1]")
        # Fails early when the ratio yields zero measurement rows.
        measurement_dim(self.sampling_ratio, self.block_size)

    @property
    def n_b(self):
        return measurement_dim(self.sampling_ratio, self.block_size)

    @property
    def sampling_decay(self):
        if self.weight_decay_sampling is None:
            return self.weight_decay
        return self.weight_decay_sampling


# ---------------------------------------------------------------------------
# optimizer


def sgd_update(param, grad, buffer, gamma, momentum, weight_decay):
    """Classical momentum step, in place.

    buffer <- momentum * buffer - gamma * (grad + weight_decay * param)
    param  <- param + buffer
    """
    if param.shape != grad.shape or param.shape != buffer.shape:
        raise ValidationError("parameter, gradient and buffer shapes must match")
    buffer *= momentum
    buffer -= gamma * (grad + weight_decay * param)
    param += buffer


@dataclass
class OptimizerState:
    buffers: dict

    @classmethod
    def initialize(cls, sampling, recon):
        buffers = {"sampling": np.zeros_like(sampling.raw_weights)}
        for name, arr in recon.named_arrays():
            buffers[name] = np.zeros_like(arr)
        return cls(buffers=buffers)


# ---------------------------------------------------------------------------
# data pipeline


def _bilinear_resize(img, out_h, out_w):
    in_h, in_w = img.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f).reshape(-1, 1)
    wx = (xs - x0f).reshape(1, -1)
    y0 = np.clip(y0f.astype(int), 0, in_h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, in_h - 1)
    x0 = np.clip(x0f.astype(int), 0, in_w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, in_w - 1)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def augment_patch(patch, rng, scale_range=(0.8, 1.2), hflip_prob=0.5):
    """Random rescale (resample + center crop/edge-pad) then maybe flip.

    Draw order is fixed — scale factor first, flip coin second — so a
    shared generator reproduces batches exactly.
    """
    size = patch.shape[0]
    scale = float(rng.uniform(scale_range[0], scale_range[1]))
    new_size = max(1, int(round(size * scale)))
    out = patch
    if new_size != size:
        out = _bilinear_resize(patch, new_size, new_size)
        if new_size > size:
            start = (new_size - size) // 2
            out = out[start:start + size, start:start + size]
        else:
            lo = (size - new_size) // 2
            hi = size - new_size - lo
            out = np.pad(out, ((lo, hi), (lo, hi)), mode="edge")
    if rng.random() < hflip_prob:
        out = out[:, ::-1]
    return np.clip(out, 0.0, 1.0)


class PatchDataset:
    """Deterministic random patches from a list of grayscale images.

    Every batch is a pure function of (seed, epoch, iteration): the image
    visit order reshuffles per epoch and corners/augmentation draw from a
    stream keyed by epoch and iteration.
    """

    def __init__(self, images, patch_size, seed, scale_range=(0.8, 1.2),
                 hflip_prob=0.5, augment=True):
        if not images:
            raise ValidationError("dataset needs at least one image")
        self.images = []
        for idx, img in enumerate(images):
            arr = np.asarray(img, dtype=np.float64)
            if arr.ndim != 2:
                raise ValidationError(f"image {idx} is not 2-D")
            if arr.shape[0] < patch_size or arr.shape[1] < patch_size:
                raise ValidationError(
                    f"image {idx} is {arr.shape}, smaller than "
                    f"patch_size {patch_size}")
            self.images.append(arr)
        self.patch_size = patch_size
        self.seed = seed
        self.scale_range = scale_range
        self.hflip_prob = hflip_prob
        self.augment = augment

    def __len__(self):
        return len(self.images)

    def batch(self, epoch, iteration, batch_size):
        p = self.patch_size
        order = stream(self.seed, "epoch-order", epoch).permutation(len(self.images))
        rng = stream(self.seed, "patches", epoch, iteration)
        out = np.empty((batch_size, 1, p, p))
        base = (iteration - 1) * batch_size
        for i in range(batch_size):
            img = self.images[order[(base + i) % len(self.images)]]
            top = int(rng.integers(0, img.shape[0] - p + 1))
            left = int(rng.integers(0, img.shape[1] - p + 1))
            patch = img[top:top + p, left:left + p]
            if self.augment:
                patch = augment_patch(patch, rng, self.scale_range,
                                      self.hflip_prob)
            out[i, 0] = patch
        return out


# ---------------------------------------------------------------------------
# the step and the loop


def train_step(batch, sampling, recon, opt, gamma, cfg):
    """One optimization step; returns the pre-update loss.

    Order of operations: save the raw sampling weights, swap in their
    constrained view, run forward/backward, update the reconstruction
    parameters, restore the raw weights, then update them with the
    modulated gradient.
    """
    saved = sampling.raw_weights.copy()
    phi = constrained_matrix(sampling)
    sampling.raw_weights = phi.entries.copy()

    b = phi.block_size
    spec = ConvSpec(kernel_size=(b, b), stride=(b, b), out_channels=phi.n_b)
    kernels = phi.as_kernels()
    measurements = conv2d_forward(batch, kernels, None, spec)
    cache = forward(measurements, recon, residual=cfg.residual)
    loss, grad_out = mse_loss(cache.out, batch, per_pixel=cfg.per_pixel_loss)
    if not np.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss!r}; the learning rate is likely too high")

    grad_meas, recon_grads = backward(recon, cache, grad_out)
    _, grad_kernels, _ = conv2d_backward(batch, kernels, spec, grad_meas)
    grad_phi = grad_kernels.reshape(phi.n_b, phi.n_B)

    for name, param in recon.named_arrays():
        sgd_update(param, recon_grads[name], opt.buffers[name], gamma,
                   cfg.momentum, cfg.weight_decay)

    sampling.raw_weights = saved
    sampling.cached_constrained = None
    modulated = grad_phi * gradient_modulation(sampling)
    sgd_update(sampling.raw_weights, modulated, opt.buffers["sampling"],
               gamma, cfg.momentum, cfg.sampling_decay)
    return loss


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    epoch: int
    lr: float
    loss: float


def train(dataset, cfg, checkpoint_dir=None, log_every=0):
    """Full training loop.

    Returns ``(sampling, recon, history)``.  With a ``checkpoint_dir`` a
    container is written every 10 epochs and at the end.
    """
    init_rng = stream(cfg.seed, "init")
    sampling = SamplingLayerState.initialize(cfg.n_b, cfg.block_size,
                                             cfg.alpha, init_rng)
    recon = ReconstructionParams.initialize(cfg.n_b, cfg.block_size, init_rng)
    opt = OptimizerState.initialize(sampling, recon)
    history: List[LossRecord] = []

    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        gamma = lr_at(epoch, cfg.lr_schedule)
        for it in range(1, cfg.iters_per_epoch + 1):
            iteration += 1
            batch = dataset.batch(epoch, it, cfg.batch_size)
            loss = train_step(batch, sampling, recon, opt, gamma, cfg)
            history.append(LossRecord(iteration=iteration, epoch=epoch,
                                      lr=gamma, loss=loss))
            if log_every and iteration % log_every == 0:
                print(f"iter {iteration} epoch {epoch} lr {gamma:g} "
                      f"loss {loss:.6f}")
        if checkpoint_dir is not None and (epoch % 10 == 0
                                           or epoch == cfg.epochs):
            from .checkpoint import save_checkpoint
            import os
            path = os.path.join(checkpoint_dir, f"epoch{epoch:04d}.dsmn")
            save_checkpoint(path, sampling, recon, epoch=epoch)
    return sampling, recon, history


def write_loss_csv(path, history):
    """Write the loss log; identical runs produce identical bytes."""
    import os
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write("iteration,epoch,lr,loss\n")
        for rec in history:
            fh.write(f"{rec.iteration},{rec.epoch},{rec.lr!r},{rec.loss!r}\n")
    os.replace(tmp, path)
