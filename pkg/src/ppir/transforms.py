"""Affine and cubic B-spline (free-form deformation) transformation models.

Both models map sampling coordinates of the fixed image into the moving
image (pull-back).  Parameter vectors are flat float arrays so the optimizer
can treat every model uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import grid_coords


# ---------------------------------------------------------------------------
# Uniform B-spline basis

def bspline(order: int, eps):
    """Centered uniform B-spline basis function of order 0, 1, 2 or 3."""
    e = np.abs(np.asarray(eps, dtype=np.float64))
    if order == 0:
        x = np.asarray(eps, dtype=np.float64)
        return ((x >= -0.5) & (x < 0.5)).astype(np.float64)
    if order == 1:
        return np.where(e < 1, 1 - e, 0.0)
    if order == 2:
        return np.where(e < 0.5, 0.75 - e ** 2,
                        np.where(e < 1.5, 0.5 * (1.5 - e) ** 2, 0.0))
    if order == 3:
        return np.where(e < 1, (4 - 6 * e ** 2 + 3 * e ** 3) / 6,
                        np.where(e < 2, (2 - e) ** 3 / 6, 0.0))
    raise ValueError(f"unsupported B-spline order {order}")


def bspline3_derivative(eps):
    # derivative of the cubic via the difference of two quadratics
    eps = np.asarray(eps, dtype=np.float64)
    return bspline(2, eps + 0.5) - bspline(2, eps - 0.5)


def cubic_weights(t):
    """Weights of the four cubic B-spline taps at fractional offset ``t``
    (taps at floor-1 .. floor+2).  Shape (..., 4)."""
    t = np.asarray(t, dtype=np.float64)
    t2, t3 = t * t, t * t * t
    return np.stack([
        (1 - t) ** 3 / 6,
        (3 * t3 - 6 * t2 + 4) / 6,
        (-3 * t3 + 3 * t2 + 3 * t + 1) / 6,
        t3 / 6,
    ], axis=-1)


# ---------------------------------------------------------------------------
# Affine

@dataclass(frozen=True)
class AffineTransform:
    """``W(x) = A x + t``; ``theta`` is the row-major flattening of the
    d x (d+1) matrix ``[A | t]``."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size not in (6, 12):
            raise ValueError(f"affine parameter vector must have 6 or 12 entries, got {theta.size}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def identity(cls, ndim: int) -> "AffineTransform":
        return cls(np.hstack([np.eye(ndim), np.zeros((ndim, 1))]).ravel())

    @classmethod
    def from_matrix(cls, A, t) -> "AffineTransform":
        A = np.asarray(A, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return cls(np.hstack([A, t]).ravel())

    @property
    def ndim(self) -> int:
        return 2 if self.theta.size == 6 else 3

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def matrix(self) -> np.ndarray:
        return self.theta.reshape(self.ndim, self.ndim + 1)[:, :-1]

    @property
    def translation(self) -> np.ndarray:
        return self.theta.reshape(self.ndim, self.ndim + 1)[:, -1]

    def with_params(self, theta) -> "AffineTransform":
        return AffineTransform(theta)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """``self ∘ inner``."""
        A = self.matrix @ inner.matrix
        t = self.matrix @ inner.translation + self.translation
        return AffineTransform.from_matrix(A, t)

    def apply(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points @ self.matrix.T + self.translation

    def jacobian_rows(self, points, grads) -> np.ndarray:
        """Rows ``grad(x)ᵀ ∂W(x)/∂θ`` for each point, shape (n, n_params)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
        n, d = points.shape
        homog = np.hstack([points, np.ones((n, 1))])
        return (grads[:, :, None] * homog[:, None, :]).reshape(n, d * (d + 1))


# ---------------------------------------------------------------------------
# Cubic B-spline free-form deformation

def bspline_grid_dims(dims, control_spacing) -> tuple[int, ...]:
    return tuple(math.ceil(n / s) + 3 for n, s in zip(dims, control_spacing))


@dataclass(frozen=True)
class BSplineTransform:
    """Displacement field ``u(x) = Σ_j Π_a β³(x_a / s_a + 1 - j_a) c_j``.

    Control point ``j`` sits at ``(j - 1) * s`` so every voxel of ``dims`` has
    its full 4^d support inside the grid.  ``theta`` stores the coefficients
    component by component: all axis-0 displacements, then axis-1, ...
    """

    dims: tuple[int, ...]
    control_spacing: tuple[float, ...]
    theta: np.ndarray = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = self.control_spacing
        if np.isscalar(spacing):
            spacing = (spacing,) * len(dims)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != len(dims) or any(s <= 0 for s in spacing):
            raise ValueError(f"invalid control spacing {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "control_spacing", spacing)
        n = len(dims) * math.prod(self.grid_dims)
        theta = np.zeros(n) if self.theta is None else np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != n:
            raise ValueError(f"expected {n} coefficients, got {theta.size}")
        object.__setattr__(self, "theta", theta)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def grid_dims(self) -> tuple[int, ...]:
        return bspline_grid_dims(self.dims, self.control_spacing)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def coefficients(self) -> np.ndarray:
        return self.theta.reshape((self.ndim,) + self.grid_dims)

    def with_params(self, theta) -> "BSplineTransform":
        return BSplineTransform(self.dims, self.control_spacing, theta)

    def _taps(self, points):
        """Flat control-point indices (n, 4^d) and tensor weights (n, 4^d)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n, d = points.shape
        grid = self.grid_dims
        idx = np.zeros((n, 1), dtype=np.int64)
        w = np.ones((n, 1))
        for a in range(d):
            u = points[:, a] / self.control_spacing[a] + 1.0
            base = np.clip(np.floor(u).astype(np.int64) - 1, 0, grid[a] - 4)
            wa = cubic_weights(u - base - 1)
            ia = base[:, None] + np.arange(4)
            idx = (idx[:, :, None] * grid[a] + ia[:, None, :]).reshape(n, -1)
            w = (w[:, :, None] * wa[:, None, :]).reshape(n, -1)
        return idx, w

    def displacement(self, points) -> np.ndarray:
        idx, w = self._taps(points)
        coef = self.theta.reshape(self.ndim, -1)
        return np.stack([(w * coef[a][idx]).sum(axis=1) for a in range(self.ndim)], axis=1)

    def apply(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points + self.displacement(points)

    def jacobian_rows(self, points, grads) -> np.ndarray:
        idx, w = self._taps(points)
        grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
        n = idx.shape[0]
        ncp = math.prod(self.grid_dims)
        rows = np.zeros((n, self.n_params))
        r = np.arange(n)[:, None]
        for a in range(self.ndim):
            # taps of one point never repeat, so plain fancy assignment is safe
            rows[r, a * ncp + idx] = w * grads[:, a:a + 1]
        return rows


Transform = AffineTransform | BSplineTransform


def apply_transform(params: Transform, x) -> np.ndarray:
    out = params.apply(np.asarray(x, dtype=np.float64).reshape(1, -1))
    return out[0]


def transform_jacobian(params: Transform, x, grad_I) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    g = np.asarray(grad_I, dtype=np.float64).reshape(1, -1)
    return params.jacobian_rows(x, g)[0]


def displacement_field(params: Transform, dims) -> np.ndarray:
    """``W(x) - x`` at every voxel, shape (*dims, d)."""
    pts = grid_coords(dims)
    return (params.apply(pts) - pts).reshape(tuple(dims) + (len(dims),))


def displacement_rmse(a: Transform, b: Transform, dims, spacing=None) -> float:
    """Root mean square distance between two transforms' displacement fields."""
    diff = displacement_field(a, dims) - displacement_field(b, dims)
    if spacing is not None:
        diff = diff * np.asarray(spacing)
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=-1))))
