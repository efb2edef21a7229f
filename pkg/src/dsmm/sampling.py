"""Constrained block sampling layer.

The measurement matrix is stored as unconstrained weights; the constrained
view applies, in order, a global magnitude-rank sparsification and a per-row
L2 normalization. Rows of the constrained matrix double as the kernels of a
stride-B convolution that produces per-block measurements.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .seeding import stream
from .tensor_ops import ConvSpec, as_tensor, conv2d_forward

# Row squared-norm below this is treated as a dead (fully zeroed) row:
# the row is passed through unflattened rather than divided by ~0, and its
# gradient modulation is forced to 1 so training can revive it.
DEAD_ROW_EPS = 1e-12

PROVENANCES = ("learned", "gaussian", "imported")


@dataclass
class MeasurementMatrix:
    """A measurements-per-block x pixels-per-block sampling operator."""

    n_b: int
    n_B: int
    block_size: int
    sparsity_degree: float
    entries: np.ndarray          # [n_b, n_B], row-major
    provenance: str = "imported"

    def __post_init__(self):
        self.entries = as_tensor(self.entries)
        if self.entries.shape != (self.n_b, self.n_B):
            raise ShapeError("entries",
                             f"entries are {self.entries.shape}, expected ({self.n_b}, {self.n_B})")
        if self.block_size ** 2 != self.n_B:
            raise ValidationError(
                f"n_B={self.n_B} is not block_size^2={self.block_size ** 2}")
        if not 0.0 <= self.sparsity_degree <= 1.0:
            raise ValidationError(f"sparsity_degree {self.sparsity_degree} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    def nonzero_count(self):
        return int(np.count_nonzero(self.entries))

    def validate_norms(self, tol=1e-9):
        """Check the unit-row property: every nonzero row has L2 norm ~ 1."""
        norms = np.sqrt(np.sum(self.entries ** 2, axis=1))
        live = norms > 0.0
        return bool(np.all(np.abs(norms[live] - 1.0) <= tol))

    def as_kernels(self):
        """Rows reshaped to stride-B convolution kernels [n_b, 1, B, B]."""
        return self.entries.reshape(self.n_b, 1, self.block_size, self.block_size)


@dataclass
class SamplingLayerState:
    """Unconstrained sampling weights plus the cached constrained view."""

    raw_weights: np.ndarray      # [n_b, n_B]
    sparsity_degree: float
    cached_constrained: MeasurementMatrix | None = None
    zero_row_flags: np.ndarray | None = None

    def __post_init__(self):
        self.raw_weights = as_tensor(self.raw_weights)
        if self.raw_weights.ndim != 2:
            raise ShapeError("raw_weights",
                             f"expected 2-D weights, got shape {self.raw_weights.shape}")
        if not 0.0 <= self.sparsity_degree <= 1.0:
            raise ValidationError(f"sparsity_degree {self.sparsity_degree} outside [0, 1]")

    @property
    def n_b(self):
        return self.raw_weights.shape[0]

    @property
    def n_B(self):
        return self.raw_weights.shape[1]

    @property
    def block_size(self):
        b = math.isqrt(self.n_B)
        if b * b != self.n_B:
            raise ValidationError(f"weight column count {self.n_B} is not a perfect square")
        return b

    @classmethod
    def initialize(cls, n_b, block_size, sparsity_degree, rng):
        """Fresh state with i.i.d. N(0, 1/n_B) weights (rows near unit norm)."""
        n_pix = block_size * block_size
        raw = rng.standard_normal((n_b, n_pix)) / math.sqrt(n_pix)
        return cls(raw_weights=raw, sparsity_degree=sparsity_degree)


def sparsity_constraint(weights, sparsity_degree):
    """Zero the smallest-magnitude (1 - degree) fraction of all entries.

    Exactly z = round((1 - degree) * size) entries are zeroed, ranked by
    magnitude with ties broken toward the lowest flat index; survivors pass
    through unchanged. Returns (sparsified, threshold) where threshold is the
    magnitude of the largest zeroed entry (0 when nothing is zeroed).
    """
    if not 0.0 <= sparsity_degree <= 1.0:
        raise ValidationError(f"sparsity_degree {sparsity_degree} outside [0, 1]")
    weights = as_tensor(weights)
    size = weights.size
    z = int(round((1.0 - sparsity_degree) * size))
    z = min(max(z, 0), size)
    if z == 0:
        return weights.copy(), 0.0
    mags = np.abs(weights).reshape(-1)
    order = np.argsort(mags, kind="stable")
    out = weights.copy()
    out.reshape(-1)[order[:z]] = 0.0
    return out, float(mags[order[z - 1]])


def normalize_row(row):
    """Scale a row to unit L2 norm.

    Dead rows (squared norm below DEAD_ROW_EPS) come back unchanged with
    flagged=True instead of being divided by ~0.
    Returns (normalized_row, flagged).
    """
    row = as_tensor(row)
    omega = float(np.sum(row * row))
    if omega < DEAD_ROW_EPS:
        return row.copy(), True
    return row / math.sqrt(omega), False


def normalization_derivative(row):
    """Per-coordinate gradient modulation of the row normalization.

    Computed as (sqrt(w) - s^2/sqrt(w)) / sqrt(w) with w the row's squared
    norm; algebraically 1 - s^2/w, so zeroed coordinates get exactly 1.
    Dead rows get an all-ones modulation so gradient flow can revive them.
    """
    row = as_tensor(row)
    omega = float(np.sum(row * row))
    if omega < DEAD_ROW_EPS:
        return np.ones_like(row)
    root = math.sqrt(omega)
    return (root - (row * row) / root) / root


def constrained_matrix(state):
    """The constrained view: sparsify globally, then normalize each row.

    Caches the result (and per-row dead flags) on the state and returns it.
    """
    sparse, _ = sparsity_constraint(state.raw_weights, state.sparsity_degree)
    entries = np.empty_like(sparse)
    flags = np.zeros(state.n_b, dtype=bool)
    for k in range(state.n_b):
        entries[k], flags[k] = normalize_row(sparse[k])
    matrix = MeasurementMatrix(
        n_b=state.n_b,
        n_B=state.n_B,
        block_size=state.block_size,
        sparsity_degree=state.sparsity_degree,
        entries=entries,
        provenance="learned",
    )
    state.cached_constrained = matrix
    state.zero_row_flags = flags
    return matrix


def gradient_modulation(state):
    """Row-stacked normalization derivatives evaluated on the sparsified
    (pre-normalization) weights; this is the factor the trainer multiplies
    into the sampling-weight gradient."""
    sparse, _ = sparsity_constraint(state.raw_weights, state.sparsity_degree)
    return np.stack([normalization_derivative(sparse[k]) for k in range(state.n_b)])


def measurement_dim(sampling_ratio, block_size):
    """Measurements per block: floor(ratio * B^2)."""
    if not 0.0 < sampling_ratio <= 1.0:
        raise ValidationError(f"sampling ratio {sampling_ratio} outside (0, 1]")
    if block_size < 1:
        raise ValidationError(f"block size {block_size} must be >= 1")
    n_b = int(math.floor(sampling_ratio * block_size * block_size))
    if n_b == 0:
        raise ValidationError(
            f"ratio {sampling_ratio} too small for block size {block_size}")
    return n_b


def sample_image(image, phi, noise_sigma=0.0, rng_seed=None):
    """Block measurements of an image: each B x B block, vectorized row-major,
    is multiplied by the matrix; implemented as a stride-B convolution whose
    kernels are the matrix rows.

    image is [N, 1, H, W] with H and W multiples of B. Optional i.i.d.
    Gaussian noise of standard deviation noise_sigma is added, drawn
    deterministically from rng_seed.
    """
    image = as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError("channels", f"expected [N,1,H,W] image, got {image.shape}")
    b = phi.block_size
    if image.shape[2] % b != 0:
        raise ValidationError(f"image height {image.shape[2]} is not a multiple of {b}")
    if image.shape[3] % b != 0:
        raise ValidationError(f"image width {image.shape[3]} is not a multiple of {b}")
    if noise_sigma < 0:
        raise ValidationError(f"noise sigma {noise_sigma} must be >= 0")

    spec = ConvSpec(kernel_size=(b, b), stride=(b, b), out_channels=phi.n_b)
    y = conv2d_forward(image, phi.as_kernels(), None, spec)
    if noise_sigma > 0.0:
        if isinstance(rng_seed, np.random.Generator):
            rng = rng_seed
        else:
            rng = stream(0 if rng_seed is None else rng_seed, "noise")
        y = y + noise_sigma * rng.standard_normal(y.shape)
    return y
