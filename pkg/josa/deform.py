"""Stationary velocity field deformations on the parameterized sphere.

Fields are arrays of shape (height, width, 2) holding (Δrow, Δcol) in grid
units. Sampling is bilinear; longitude wraps, and a corner that falls past a
pole is reflected back in latitude and shifted half a turn in longitude.
When the sampled array is itself a field, such a corner also has its Δrow
negated.

Every forward operation used by the objective has an ``*_adjoint`` companion
that applies the transposed Jacobian to an incoming gradient.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .sphere_grid import AreaWeights, GridSpec, ShapeMismatchError, area_weights

logger = logging.getLogger("josa.deform")

DEFAULT_STEPS = 7
# Floor on sin(θ) when converting longitude displacements near the poles.
MIN_SIN_THETA = 0.2


class NonFiniteError(ValueError):
    pass


@dataclass
class VelocityField:
    v: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        _check_vector_field(self.v, self.grid, "velocity")

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VelocityField":
        return cls(np.zeros(grid.shape + (2,)), grid)

    def __neg__(self) -> "VelocityField":
        return VelocityField(-self.v, self.grid)


@dataclass
class DeformationField:
    """φ = Id + u. Keeps the velocity it was integrated from, if any."""

    u: np.ndarray
    grid: GridSpec
    velocity: Optional[VelocityField] = None
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        _check_vector_field(self.u, self.grid, "displacement")

    @classmethod
    def identity(cls, grid: GridSpec) -> "DeformationField":
        return cls(np.zeros(grid.shape + (2,)), grid, VelocityField.zeros(grid))

    def inverse(self) -> "DeformationField":
        if self.velocity is None:
            raise ValueError("Only fields integrated from a velocity can be inverted")
        return invert(self.velocity, self.steps)

    def max_displacement(self) -> float:
        return float(np.max(np.linalg.norm(self.u, axis=-1)))


def _check_vector_field(array, grid, what):
    if array.shape != grid.shape + (2,):
        raise ShapeMismatchError(
            f"{what} has shape {array.shape}, expected {grid.shape + (2,)}"
        )


def _check_same_grid(a: DeformationField, b: DeformationField):
    if a.grid != b.grid:
        raise ShapeMismatchError(f"Fields live on different grids {a.grid}, {b.grid}")


@lru_cache(maxsize=16)
def _identity_coords(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(
        np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij"
    )
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def _coords(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = _identity_coords(u.shape[0], u.shape[1])
    return rows + u[..., 0], cols + u[..., 1]


def _fold(rows, cols, height, width):
    north = rows < 0
    south = rows >= height
    rows = np.where(north, -1 - rows, np.where(south, 2 * height - 1 - rows, rows))
    cols = np.where(north | south, cols + width // 2, cols)
    return rows, np.mod(cols, width), north | south


@dataclass
class _Stencil:
    index: List[np.ndarray]  # flat indices of corners 00, 01, 10, 11
    weights: List[np.ndarray]
    flipped: List[np.ndarray]  # corner taken across a pole
    frac_rows: np.ndarray
    frac_cols: np.ndarray
    inside: np.ndarray


def _stencil(rows, cols, height, width) -> _Stencil:
    # One reflection at most; corners stay inside the folded range.
    clipped = np.clip(rows, 1 - height, 2 * height - 2)
    r0 = np.floor(clipped)
    c0 = np.floor(cols)
    fr = clipped - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    index = []
    flipped = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc, crossed = _fold(r0 + dr, c0 + dc, height, width)
        index.append(rr * width + cc)
        flipped.append(crossed)
    weights = [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc]
    return _Stencil(index, weights, flipped, fr, fc, clipped == rows)


def _corner_signs(st: _Stencil, channels: int, vector: bool) -> List[np.ndarray]:
    """Per-corner channel factors. Past a pole the row axis points the other
    way, so the Δrow component of a vector field changes sign there."""
    if not vector:
        return [np.ones(channels)] * 4
    signs = []
    for crossed in st.flipped:
        s = np.ones(crossed.shape + (2,))
        s[..., 0] = np.where(crossed, -1.0, 1.0)
        signs.append(s)
    return signs


def _check_vector_channels(image, vector):
    if vector and image.shape[-1] != 2:
        raise ShapeMismatchError(
            f"Vector sampling needs 2 components, got {image.shape[-1]}"
        )


def _sample(image: np.ndarray, rows, cols, vector=False) -> np.ndarray:
    height, width, channels = image.shape
    _check_vector_channels(image, vector)
    st = _stencil(rows, cols, height, width)
    flat = image.reshape(-1, channels)
    out = np.zeros(rows.shape + (channels,))
    for idx, w, s in zip(st.index, st.weights, _corner_signs(st, channels, vector)):
        out += w[..., None] * s * flat[idx]
    return out


def _sample_adjoint(image, rows, cols, grad_out, image_grad=True, vector=False):
    """Returns (grad_image, grad_rows, grad_cols) of Σ grad_out·sample."""
    height, width, channels = image.shape
    _check_vector_channels(image, vector)
    st = _stencil(rows, cols, height, width)
    flat = image.reshape(-1, channels)
    signs = _corner_signs(st, channels, vector)

    grad_image = None
    if image_grad:
        g = grad_out.reshape(-1, channels)
        idx = np.concatenate([i.ravel() for i in st.index])
        grad_image = np.empty((height * width, channels))
        for ch in range(channels):
            contrib = np.concatenate(
                [
                    w.ravel() * np.broadcast_to(s[..., ch], w.shape).ravel() * g[:, ch]
                    for w, s in zip(st.weights, signs)
                ]
            )
            grad_image[:, ch] = np.bincount(idx, weights=contrib, minlength=height * width)
        grad_image = grad_image.reshape(image.shape)

    v00, v01, v10, v11 = (s * flat[i] for i, s in zip(st.index, signs))
    fr = st.frac_rows[..., None]
    fc = st.frac_cols[..., None]
    d_rows = (1 - fc) * (v10 - v00) + fc * (v11 - v01)
    d_cols = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
    grad_rows = np.sum(grad_out * d_rows, axis=-1) * st.inside
    grad_cols = np.sum(grad_out * d_cols, axis=-1)
    return grad_image, grad_rows, grad_cols


def _as_channels(image: np.ndarray):
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image[..., None], True
    return image, False


def warp(image: np.ndarray, phi: DeformationField) -> np.ndarray:
    """output(p) = image(p + u(p))."""
    if image.shape[:2] != phi.grid.shape:
        raise ShapeMismatchError(
            f"Image shape {image.shape} does not match grid {phi.grid.shape}"
        )
    img, squeeze = _as_channels(image)
    out = _sample(img, *_coords(phi.u))
    return out[..., 0] if squeeze else out


def warp_adjoint(image, phi: DeformationField, grad_out, image_grad=True):
    """Returns (grad_image, grad_u) for the warp of ``image`` by ``phi``."""
    img, squeeze = _as_channels(image)
    g, _ = _as_channels(grad_out)
    grad_image, grad_rows, grad_cols = _sample_adjoint(
        img, *_coords(phi.u), g, image_grad=image_grad
    )
    if grad_image is not None and squeeze:
        grad_image = grad_image[..., 0]
    return grad_image, np.stack([grad_rows, grad_cols], axis=-1)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """ψ = outer ∘ inner, u_ψ(p) = u_inner(p) + u_outer(p + u_inner(p))."""
    _check_same_grid(outer, inner)
    u = inner.u + _sample(outer.u, *_coords(inner.u), vector=True)
    return DeformationField(u, inner.grid, steps=inner.steps)


def compose_adjoint(outer: DeformationField, inner: DeformationField, grad_u):
    """Returns (grad_outer_u, grad_inner_u) for ``compose(outer, inner)``."""
    grad_outer, grad_rows, grad_cols = _sample_adjoint(
        outer.u, *_coords(inner.u), grad_u, vector=True
    )
    return grad_outer, grad_u + np.stack([grad_rows, grad_cols], axis=-1)


class Flow:
    """Scaling-and-squaring exponential of a velocity, taped for reverse mode."""

    def __init__(self, velocity: VelocityField, steps: int = DEFAULT_STEPS):
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if not np.all(np.isfinite(velocity.v)):
            raise NonFiniteError("Velocity field contains non-finite values")
        self.velocity = velocity
        self.steps = steps
        self._stages = []
        u = velocity.v / 2.0 ** steps
        for _ in range(steps):
            self._stages.append(u)
            u = u + _sample(u, *_coords(u), vector=True)
        self.field = DeformationField(u, velocity.grid, velocity, steps)

    def backward(self, grad_u: np.ndarray) -> np.ndarray:
        g = grad_u
        for u in reversed(self._stages):
            grad_image, grad_rows, grad_cols = _sample_adjoint(
                u, *_coords(u), g, vector=True
            )
            g = g + grad_image + np.stack([grad_rows, grad_cols], axis=-1)
        return g / 2.0 ** self.steps


def integrate(v: VelocityField, steps: int = DEFAULT_STEPS) -> DeformationField:
    return Flow(v, steps).field


def invert(v: VelocityField, steps: int = DEFAULT_STEPS) -> DeformationField:
    return integrate(-v, steps)


def spatial_gradient(field: np.ndarray) -> np.ndarray:
    """First partials along (row, col), appended as a trailing axis of size 2.

    Central differences; longitude is periodic, the first and last latitude
    rows use one-sided differences.
    """
    f = np.asarray(field, dtype=float)
    d_row = np.empty_like(f)
    d_row[1:-1] = (f[2:] - f[:-2]) / 2
    d_row[0] = f[1] - f[0]
    d_row[-1] = f[-1] - f[-2]
    d_col = (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / 2
    return np.stack([d_row, d_col], axis=-1)


def spatial_gradient_adjoint(grad: np.ndarray) -> np.ndarray:
    g_row = grad[..., 0]
    g_col = grad[..., 1]
    out = (np.roll(g_col, 1, axis=1) - np.roll(g_col, -1, axis=1)) / 2
    out[2:] += g_row[1:-1] / 2
    out[:-2] -= g_row[1:-1] / 2
    out[1] += g_row[0]
    out[0] -= g_row[0]
    out[-1] += g_row[-1]
    out[-2] -= g_row[-1]
    return out


def jacobian_determinant(phi: DeformationField) -> np.ndarray:
    g = spatial_gradient(phi.u)
    return (1 + g[..., 0, 0]) * (1 + g[..., 1, 1]) - g[..., 0, 1] * g[..., 1, 0]


def jacobian_negative_fraction(phi: DeformationField) -> float:
    return float(np.mean(jacobian_determinant(phi) <= 0))


def displacement_rms(u: np.ndarray, weights: AreaWeights) -> float:
    """Area-weighted RMS of a displacement, per component."""
    w = weights.w[..., None]
    return float(np.sqrt(np.sum(w * np.square(u)) / (np.sum(weights.w) * u.shape[-1])))


def smooth_on_sphere(
    field: np.ndarray, sigma: float, vector: bool = False
) -> np.ndarray:
    """Gaussian smoothing that treats each meridian and its antipode as one
    great circle, so the result is continuous across both poles.

    The grid is unrolled into a (2 * height)-periodic strip: the second half
    is the first reversed in latitude and shifted half a turn. With
    ``vector`` the second half carries negated Δrow.
    """
    f = np.asarray(field, dtype=float)
    height, width = f.shape[:2]
    across = np.roll(f[::-1], -(width // 2), axis=1)
    if vector:
        across = across.copy()
        across[..., 0] *= -1
    strip = np.concatenate([f, across], axis=0)
    sigmas = (sigma, sigma) + (0,) * (f.ndim - 2)
    return ndimage.gaussian_filter(strip, sigma=sigmas, mode="wrap")[:height]


def longitude_scale(grid: GridSpec) -> np.ndarray:
    """sin(θ) per row, clipped away from zero near the poles."""
    return np.maximum(np.sin(grid.theta), MIN_SIN_THETA)


def to_physical(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Displacement in equator pixels: Δcol shrinks by sin(θ)."""
    out = np.array(u, dtype=float)
    out[..., 1] *= longitude_scale(grid)[:, None]
    return out


def random_velocity(
    grid: GridSpec,
    rng: np.random.Generator,
    rms: float,
    smooth_px: float,
    steps: int = DEFAULT_STEPS,
    calibration_rounds: int = 2,
    physical: bool = False,
) -> VelocityField:
    """Smoothed white-noise velocity whose integrated displacement has the
    requested area-weighted RMS.

    With ``physical`` the longitude component is stretched by 1/sin(θ) so the
    displacement is isotropic on the sphere rather than on the grid, and the
    RMS is measured on the physical displacement.
    """
    if rms <= 0:
        return VelocityField.zeros(grid)
    noise = rng.standard_normal(grid.shape + (2,))
    v = smooth_on_sphere(noise, smooth_px, vector=True)

    def measure(u):
        return to_physical(u, grid) if physical else u

    if physical:
        v[..., 1] /= longitude_scale(grid)[:, None]
    weights = area_weights(grid)
    v *= rms / displacement_rms(measure(v), weights)
    for _ in range(calibration_rounds):
        u = integrate(VelocityField(v, grid), steps).u
        v *= rms / displacement_rms(measure(u), weights)
    return VelocityField(v, grid)
