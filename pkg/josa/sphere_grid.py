"""Equirectangular parameterization of the sphere.

Rows sample the elevation θ at cell centers strictly inside (0, π) and columns
sample the azimuth φ periodically. Every squared norm in the objective is
weighted by sin(θ) to undo the area distortion of the mapping.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np


class GridDimensionError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.height * self.width

    @property
    def d_theta(self) -> float:
        return np.pi / self.height

    @property
    def d_phi(self) -> float:
        return 2 * np.pi / self.width

    @property
    def theta(self) -> np.ndarray:
        return (np.arange(self.height) + 0.5) * self.d_theta

    @property
    def phi(self) -> np.ndarray:
        return np.arange(self.width) * self.d_phi

    @property
    def cell_area(self) -> float:
        return self.d_theta * self.d_phi

    def to_dict(self):
        return {"height": self.height, "width": self.width}


@dataclass(frozen=True)
class AreaWeights:
    w: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.w.shape


def make_grid(height: int, width: int) -> GridSpec:
    if height < 4 or width < 8:
        raise GridDimensionError(
            f"Grid {height}x{width} too small, need height >= 4 and width >= 8"
        )
    if width % 2:
        raise GridDimensionError(f"Grid width must be even, got {width}")
    return GridSpec(int(height), int(width))


def parse_grid(text: str) -> GridSpec:
    """Parse an ``HxW`` string such as ``64x128``."""
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise GridDimensionError(f'Grid must look like "64x128", got "{text}"')
    return make_grid(height, width)


def area_weights(grid: GridSpec) -> AreaWeights:
    w = np.repeat(np.sin(grid.theta)[:, None], grid.width, axis=1)
    w.setflags(write=False)
    return AreaWeights(w)


def check_shape(image: np.ndarray, shape: Tuple[int, int], what="image"):
    if image.shape[:2] != tuple(shape):
        raise ShapeMismatchError(
            f"{what} has shape {image.shape}, expected leading shape {tuple(shape)}"
        )


def broadcast_weights(weights: AreaWeights, image: np.ndarray) -> np.ndarray:
    check_shape(image, weights.shape)
    return weights.w.reshape(weights.shape + (1,) * (image.ndim - 2))


def weighted_norm_sq(image: np.ndarray, weights: AreaWeights) -> float:
    """Σ w·image² over pixels, summed over any trailing component axes."""
    w = broadcast_weights(weights, image)
    return float(np.sum(w * np.square(image)))


def total_area(grid: GridSpec) -> float:
    return float(area_weights(grid).w.sum() * grid.cell_area)
