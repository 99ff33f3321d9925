"""Sum-of-squared-differences cost and its Gauss-Newton terms.

The only quantity that mixes both images is ``R = Sᵀ J``; everything else in
``G`` and ``H`` is local to the party holding the moving image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import Image, gradient, sample


def ssd_value(warped, target) -> float:
    warped = np.asarray(warped, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if warped.shape != target.shape:
        raise ValueError(f"length mismatch: {warped.shape} vs {target.shape}")
    r = warped - target
    return float(r @ r)


@dataclass(frozen=True)
class SteepestDescentMatrix:
    data: np.ndarray  # (n_samples, n_params)
    coords: np.ndarray  # (n_samples, d), coordinates at the current level

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SsdGaussNewtonTerms:
    G: np.ndarray
    H: np.ndarray
    value: float


class MovingImage:
    """Moving image at one pyramid level, with cached index-space gradients.

    Transforms live in the full-resolution voxel frame.  A level downsampled
    by ``scale`` maps its voxel ``x`` to ``scale * x + (scale - 1) / 2`` in
    that frame, so parameters carry over between levels unchanged.
    """

    def __init__(self, image: Image, scale: int = 1):
        self.image = image
        self.scale = int(scale)
        self.offset = (self.scale - 1) / 2.0
        # derivative per voxel step, independent of the physical spacing
        self.grads = [g.data * s for g, s in zip(gradient(image), image.spacing)]

    def to_full(self, coords) -> np.ndarray:
        return self.scale * np.asarray(coords, dtype=np.float64) + self.offset

    def to_level(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.offset) / self.scale

    def warp_points(self, params, coords) -> np.ndarray:
        return self.to_level(params.apply(self.to_full(coords)))

    def warped(self, params, coords) -> np.ndarray:
        return sample(self.image.data, self.warp_points(params, coords))

    def warped_gradient(self, params, coords) -> np.ndarray:
        pts = self.warp_points(params, coords)
        return np.stack([sample(g, pts) for g in self.grads], axis=1)

    def steepest_descent(self, params, coords) -> tuple[np.ndarray, SteepestDescentMatrix]:
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        if coords.shape[0] == 0:
            raise ValueError("empty coordinate set")
        pts = self.warp_points(params, coords)
        warped = sample(self.image.data, pts)
        grads = np.stack([sample(g, pts) for g in self.grads], axis=1)
        # chain rule through the level mapping contributes 1/scale
        rows = params.jacobian_rows(self.to_full(coords), grads / self.scale)
        return warped, SteepestDescentMatrix(rows, coords)


def build_steepest_descent(I: Image, params, coords, scale: int = 1) -> SteepestDescentMatrix:
    """Rows ``∇I(W(x))ᵀ ∂W(x)/∂θ`` for each sampled coordinate."""
    return MovingImage(I, scale).steepest_descent(params, coords)[1]


def ssd_terms_clear(S: SteepestDescentMatrix | np.ndarray, warped, target) -> SsdGaussNewtonTerms:
    """Cleartext Gauss-Newton terms.

    ``G = Sᵀ warped - Sᵀ target`` is the gradient of ``SSD / 2``; the
    optimizer steps along ``-(H + λI)⁻¹ G``.
    """
    S = S.data if isinstance(S, SteepestDescentMatrix) else np.asarray(S, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if S.shape[0] != warped.shape[0] or warped.shape != target.shape:
        raise ValueError(f"shape mismatch: S {S.shape}, warped {warped.shape}, target {target.shape}")
    R = S.T @ target
    G = S.T @ warped - R
    H = S.T @ S
    return SsdGaussNewtonTerms(G, 0.5 * (H + H.T), ssd_value(warped, target))


def ssd_terms_secure(S: SteepestDescentMatrix | np.ndarray, warped, session, indices) -> SsdGaussNewtonTerms:
    """Gauss-Newton terms with ``R = Sᵀ J`` computed jointly with the party
    holding ``J``.

    The warped intensities ride along as one extra row so the same product
    also yields ``warped · J`` for the cost value; ``Σ J²`` over the sample
    set is the one scalar the peer discloses.
    """
    S = S.data if isinstance(S, SteepestDescentMatrix) else np.asarray(S, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    rows = np.vstack([S.T, warped[None, :]])
    out = session.matvec(rows, indices)
    R, cross = out[:-1], out[-1]
    G = S.T @ warped - R
    H = S.T @ S
    value = float(warped @ warped - 2.0 * cross + session.target_energy(indices))
    return SsdGaussNewtonTerms(G, 0.5 * (H + H.T), value)
