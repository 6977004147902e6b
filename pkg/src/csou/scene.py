"""Scene description and forward imaging model.

A scene is a handful of point targets living in the continuous coordinate
frame of an M1 x M2 observed patch (x along columns, y along rows, intensity
s).  Imaging happens on a super-resolved grid with c x c sub-pixel cells per
observed pixel:

    1. each target's intensity is dropped into its sub-pixel cell
       (``embed_scene``),
    2. the grid is blurred with a sampled Gaussian point-spread function
       (``apply_psf``),
    3. each observed pixel reads the average of its c x c block
       (``measure``), and
    4. sensor noise is added (``add_noise``).

The high-resolution grid is an (c*M1, c*M2) float array, the measurement an
(M1, M2) float array.  ``reproject`` maps grid cells back to observed-pixel
indices, ``cell_to_position`` back to continuous coordinates.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend


class OutOfBoundsError(ValueError):
    """A target lies outside the patch."""


class CellCollisionError(ValueError):
    """Two targets fell into the same sub-pixel cell."""


@dataclass
class SceneConfig:
    m1: int = 11  # observed patch height, pixels
    m2: int = 11  # observed patch width, pixels
    c: int = 3  # sub-pixel cells per observed pixel, per axis
    sigma_psf: float = 0.75  # Gaussian blur sigma, observed-pixel units
    kernel_radius: int | None = None  # taps half-width in cells; None -> ceil(4*c*sigma_psf)

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1 or self.c < 1:
            raise ValueError("m1, m2 and c must be positive")
        if self.sigma_psf <= 0:
            raise ValueError("sigma_psf must be positive")

    @property
    def n1(self):
        return self.c * self.m1

    @property
    def n2(self):
        return self.c * self.m2

    @property
    def radius(self):
        if self.kernel_radius is not None:
            return self.kernel_radius
        return math.ceil(4.0 * self.c * self.sigma_psf)


@dataclass
class SparseScene:
    """Point targets: x (column coord), y (row coord), s (intensity)."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        self.s = np.atleast_1d(np.asarray(self.s, dtype=np.float64))
        if not (self.x.shape == self.y.shape == self.s.shape):
            raise ValueError("x, y, s must have matching shapes")

    @property
    def k(self):
        return self.x.size


@dataclass
class PSFKernel:
    taps: np.ndarray  # (2r+1, 2r+1), sums to 1
    radius: int


def _gaussian_taps(sigma, radius):
    # amplitude 1/(2*pi*sigma^2), sampled at integer tap offsets
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    dx2 = offs[None, :] ** 2 + offs[:, None] ** 2
    return np.exp(-dx2 / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)


def make_psf_kernel(sigma, radius):
    """Sampled, unit-sum Gaussian kernel with the given sigma (in tap units)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    taps = _gaussian_taps(float(sigma), int(radius))
    taps /= taps.sum()
    return PSFKernel(taps=taps, radius=int(radius))


def scene_kernel(cfg: SceneConfig) -> PSFKernel:
    """PSF kernel on the sub-pixel grid: sigma_psf pixels = c*sigma_psf cells."""
    return make_psf_kernel(cfg.c * cfg.sigma_psf, cfg.radius)


def embed_cell(xv, yv, c):
    """Sub-pixel cell (row, col) of a continuous position; ties round half-up."""
    col = int(math.floor(c * xv + (c - 1) / 2.0 + 0.5))
    row = int(math.floor(c * yv + (c - 1) / 2.0 + 0.5))
    return row, col


def embed_scene(scene: SparseScene, cfg: SceneConfig) -> np.ndarray:
    """Place each target's intensity in its sub-pixel cell; zeros elsewhere."""
    grid = np.zeros((cfg.n1, cfg.n2), dtype=np.float64)
    occupied = set()
    for i in range(scene.k):
        xv, yv = float(scene.x[i]), float(scene.y[i])
        if not (0.0 <= xv < cfg.m2 and 0.0 <= yv < cfg.m1):
            raise OutOfBoundsError(
                "target %d at (x=%g, y=%g) outside %dx%d patch" % (i, xv, yv, cfg.m1, cfg.m2)
            )
        row, col = embed_cell(xv, yv, cfg.c)
        row = min(max(row, 0), cfg.n1 - 1)
        col = min(max(col, 0), cfg.n2 - 1)
        if (row, col) in occupied:
            raise CellCollisionError("targets share sub-pixel cell (%d, %d)" % (row, col))
        occupied.add((row, col))
        grid[row, col] = float(scene.s[i])
    return grid


def apply_psf(grid, kernel: PSFKernel):
    """Blur a high-res grid (zero padding outside the patch)."""
    g = np.asarray(grid, dtype=np.float64)
    x = g[None, None]
    w = kernel.taps[None, None]
    out = backend.conv2d_fwd(x, w, None, kernel.radius)
    return out[0, 0]


def measure(grid, c):
    """Block-average the grid down to the observed pixel resolution."""
    g = np.asarray(grid)
    if g.shape[-2] % c or g.shape[-1] % c:
        raise ValueError("grid shape %s not divisible by c=%d" % (g.shape, c))
    return backend.block_mean(g, c)


def add_noise(y, noise_sigma, rng):
    """Add iid Gaussian sensor noise drawn from ``rng``."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    if noise_sigma == 0:
        return y.copy()
    return y + noise_sigma * rng.standard_normal(y.shape)


def simulate(scene: SparseScene, cfg: SceneConfig, noise_sigma=0.0, rng=None):
    """Full forward pass: embed, blur, downsample, optional noise."""
    y = measure(apply_psf(embed_scene(scene, cfg), scene_kernel(cfg)), cfg.c)
    if noise_sigma:
        y = add_noise(y, noise_sigma, rng)
    return y


def reproject(row, col, c):
    """Observed-pixel index of a sub-pixel cell (inverse of ``embed_cell``)."""
    half = math.floor((c - 1) / 2.0)
    r = max(0, math.floor((row - half) / c))
    q = max(0, math.floor((col - half) / c))
    return int(r), int(q)


def cell_to_position(row, col, c):
    """Continuous (x, y) of a sub-pixel cell's center, clamped into the patch."""
    xv = max(0.0, (col - (c - 1) / 2.0) / c)
    yv = max(0.0, (row - (c - 1) / 2.0) / c)
    return xv, yv
