"""Rectangular scalar fields and the 4-neighbour difference operator D = I - B.

Fields are numpy arrays whose last two axes are (height, width); any leading
axes (channels) are carried through untouched.  Out-of-bounds neighbours
contribute zero, which keeps D non-singular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEIGHBOR_WEIGHT = 0.25


@dataclass
class ImageGrid:
    """A single-channel image with explicit dimensions, stored row-major."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or 0 in self.data.shape:
            raise ValueError(f"ImageGrid needs a non-empty 2-D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ImageGrid entries must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "ImageGrid":
        values = np.asarray(values, dtype=float)
        if values.size != width * height:
            raise ValueError(f"expected {width * height} values, got {values.size}")
        return cls(values.reshape(height, width))


@dataclass(frozen=True)
class StencilOperator:
    height: int
    width: int
    neighbor_weight: float = NEIGHBOR_WEIGHT
    boundary: str = "zero_pad"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if self.boundary != "zero_pad":
            raise ValueError(f"unsupported boundary rule {self.boundary!r}")

    @classmethod
    def for_shape(cls, shape) -> "StencilOperator":
        return cls(int(shape[-2]), int(shape[-1]))

    @property
    def size(self) -> int:
        return self.height * self.width

    def check(self, f: np.ndarray) -> None:
        if f.shape[-2:] != (self.height, self.width):
            raise ValueError(
                f"field of shape {f.shape[-2:]} does not match operator grid "
                f"{(self.height, self.width)}"
            )

    def dense(self) -> np.ndarray:
        """Materialize D as a (size, size) matrix.  Only sensible for tiny grids."""
        n = self.size
        mat = np.eye(n)
        for r in range(self.height):
            for c in range(self.width):
                i = r * self.width + c
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < self.height and 0 <= cc < self.width:
                        mat[i, rr * self.width + cc] -= self.neighbor_weight
        return mat


def _neighbor_sum(f: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    out[..., 1:, :] += f[..., :-1, :]
    out[..., :-1, :] += f[..., 1:, :]
    out[..., :, 1:] += f[..., :, :-1]
    out[..., :, :-1] += f[..., :, 1:]
    return out


def _as_array(f):
    if isinstance(f, ImageGrid):
        return f.data, True
    return np.asarray(f, dtype=float), False


def apply_D(op: StencilOperator, f):
    """out[i] = f[i] - 0.25 * sum of the in-bounds 4-neighbours of i."""
    arr, wrapped = _as_array(f)
    op.check(arr)
    out = arr - op.neighbor_weight * _neighbor_sum(arr)
    return ImageGrid(out) if wrapped else out


def apply_D_transpose(op: StencilOperator, g):
    """Adjoint of apply_D.

    Each pixel j collects -0.25 * g[i] from every pixel i that has j as a
    neighbour.  Neighbourhoods are symmetric, so this coincides with
    apply_D; it is written as a scatter so the adjoint stays correct if
    the stencil ever stops being symmetric.
    """
    arr, wrapped = _as_array(g)
    op.check(arr)
    w = op.neighbor_weight
    out = arr.copy()
    out[..., :-1, :] -= w * arr[..., 1:, :]   # i below j
    out[..., 1:, :] -= w * arr[..., :-1, :]   # i above j
    out[..., :, :-1] -= w * arr[..., :, 1:]
    out[..., :, 1:] -= w * arr[..., :, :-1]
    return ImageGrid(out) if wrapped else out


def row_squared_apply(op: StencilOperator, v):
    """out[i] = sum_j D[i, j]**2 * v[j] for a non-negative (variance) field v."""
    arr, wrapped = _as_array(v)
    op.check(arr)
    if np.any(arr < 0):
        raise ValueError("row_squared_apply expects a non-negative field")
    out = arr + op.neighbor_weight ** 2 * _neighbor_sum(arr)
    return ImageGrid(out) if wrapped else out


def col_squared_apply(op: StencilOperator, v):
    """out[j] = sum_i D[i, j]**2 * v[i]; the transpose of row_squared_apply."""
    # D is symmetric under zero padding, so the squared stencil is too.
    return row_squared_apply(op, v)
