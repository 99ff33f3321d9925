"""Deterministic synthetic fixtures with known ground truth.

Images are sums of Gaussian blobs evaluated analytically, so the fixed
image is the exact pull-back ``J(x) = f(W*(x))`` of the moving image's
intensity function ``f`` and carries no interpolation error.

* ``blob2d``: 128x128, mild affine misalignment, light noise.
* ``warped-pair``: 64x64, cubic B-spline deformation on a spacing-5 grid.
* ``mi-pair-3d``: 32^3, two different monotone remappings of one volume
  plus an affine misalignment (a multimodal surrogate).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import Image, grid_coords, load_image, save_image
from .transforms import AffineTransform, BSplineTransform

KINDS = ("blob2d", "warped-pair", "mi-pair-3d")


@dataclass(frozen=True)
class BlobField:
    centers: np.ndarray  # (k, d)
    sigmas: np.ndarray  # (k,)
    amplitudes: np.ndarray  # (k,)
    background: float = 20.0
    dims: tuple = None
    taper: float = 0.0

    def window(self, points) -> np.ndarray:
        """Raised-cosine taper reaching 0 on the grid border, so the field
        agrees with the zero value read outside the domain."""
        w = np.ones(points.shape[0])
        if not self.taper or self.dims is None:
            return w
        for a, n in enumerate(self.dims):
            dist = np.minimum(points[:, a], n - 1 - points[:, a])
            t = np.clip(dist / self.taper, 0.0, 1.0)
            w *= 0.5 - 0.5 * np.cos(np.pi * t)
        return w

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.full(points.shape[0], self.background)
        for c, s, a in zip(self.centers, self.sigmas, self.amplitudes):
            d2 = np.sum((points - c) ** 2, axis=1)
            out += a * np.exp(-0.5 * d2 / (s * s))
        return out * self.window(points)

    @classmethod
    def random(cls, rng, dims, count, sigma_range, amp_range, background=20.0, margin=0.1, taper=0.0):
        dims_f = np.asarray(dims, dtype=np.float64)
        lo, hi = margin * dims_f, (1 - margin) * dims_f - 1
        centers = rng.uniform(lo, hi, size=(count, len(dims)))
        sigmas = rng.uniform(*sigma_range, size=count)
        amps = rng.uniform(*amp_range, size=count) * rng.choice([-0.4, 1.0], size=count, p=[0.25, 0.75])
        return cls(centers, sigmas, amps, background, tuple(dims), taper)


@dataclass
class Fixture:
    kind: str
    moving: Image  # I, party 1
    fixed: Image  # J, party 2
    truth: AffineTransform | BSplineTransform
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.fixed.dims


def _affine_about_center(dims, angle_deg, translation, scale=1.0, axes=(0, 1)) -> AffineTransform:
    """Rotation in the ``axes`` plane about the grid center, then translation."""
    d = len(dims)
    A = np.eye(d) * scale
    t = math.radians(angle_deg)
    i, j = axes
    R = np.eye(d)
    R[i, i], R[i, j], R[j, i], R[j, j] = math.cos(t), -math.sin(t), math.sin(t), math.cos(t)
    A = R @ A
    c = (np.asarray(dims, dtype=np.float64) - 1) / 2
    return AffineTransform.from_matrix(A, c - A @ c + np.asarray(translation, dtype=np.float64))


def blob2d(seed: int = 0, dims=(128, 128), translation=(3.0, -2.0), angle_deg: float = 2.0,
           noise: float = 2.0, blobs: int = 14) -> Fixture:
    rng = np.random.default_rng(seed)
    f = BlobField.random(rng, dims, blobs, (5.0, 11.0), (60.0, 140.0), taper=12.0)
    truth = _affine_about_center(dims, angle_deg, translation)
    pts = grid_coords(dims)
    I = f(pts).reshape(dims) + noise * rng.standard_normal(dims)
    J = f(truth.apply(pts)).reshape(dims) + noise * rng.standard_normal(dims)
    return Fixture("blob2d", Image(I), Image(J), truth,
                   {"seed": seed, "noise": noise, "angle_deg": angle_deg, "translation": list(translation)})


def warped_pair(seed: int = 0, dims=(64, 64), control_spacing: float = 5.0, amplitude: float = 1.5,
                blobs: int = 40) -> Fixture:
    rng = np.random.default_rng(seed)
    f = BlobField.random(rng, dims, blobs, (3.0, 6.0), (60.0, 140.0), margin=0.05, taper=6.0)
    truth = BSplineTransform(dims, control_spacing)
    theta = rng.normal(0.0, amplitude, size=truth.n_params)
    truth = truth.with_params(theta)
    pts = grid_coords(dims)
    I = f(pts).reshape(dims)
    J = f(truth.apply(pts)).reshape(dims)
    return Fixture("warped-pair", Image(I), Image(J), truth,
                   {"seed": seed, "control_spacing": control_spacing, "amplitude": amplitude})


def mi_pair_3d(seed: int = 0, dims=(32, 32, 32), translation=(1.5, -1.0, 1.0), angle_deg: float = 3.0,
               blobs: int = 10) -> Fixture:
    rng = np.random.default_rng(seed)
    f = BlobField.random(rng, dims, blobs, (3.5, 6.0), (0.6, 1.0), background=0.1, taper=4.0)
    truth = _affine_about_center(dims, angle_deg, translation)
    pts = grid_coords(dims)
    v_moving = f(pts)
    v_fixed = f(truth.apply(pts))
    # increasing remap for I, decreasing for J: large SSD, strong dependence
    I = 200.0 * np.sqrt(np.clip(v_moving, 0, None))
    J = 220.0 * np.exp(-1.5 * np.clip(v_fixed, 0, None)) + 10.0
    return Fixture("mi-pair-3d", Image(I.reshape(dims)), Image(J.reshape(dims)), truth,
                   {"seed": seed, "angle_deg": angle_deg, "translation": list(translation)})


def make_fixture(kind: str, seed: int = 0, **params) -> Fixture:
    builders = {"blob2d": blob2d, "warped-pair": warped_pair, "mi-pair-3d": mi_pair_3d}
    if kind not in builders:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    return builders[kind](seed=seed, **params)


def write_fixture(fx: Fixture, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(fx.moving, out / "moving.raw")
    save_image(fx.fixed, out / "fixed.raw")
    truth = {"kind": fx.kind, "dims": list(fx.dims), "meta": fx.meta}
    if isinstance(fx.truth, AffineTransform):
        truth["model"] = "affine"
    else:
        truth["model"] = "bspline"
        truth["control_spacing"] = list(fx.truth.control_spacing)
    truth["theta"] = [float(v) for v in fx.truth.theta]
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return out


def read_truth(path) -> AffineTransform | BSplineTransform:
    info = json.loads(Path(path).read_text())
    if info["model"] == "affine":
        return AffineTransform(info["theta"])
    return BSplineTransform(tuple(info["dims"]), tuple(info["control_spacing"]), info["theta"])


def load_fixture(path) -> Fixture:
    path = Path(path)
    info = json.loads((path / "truth.json").read_text())
    return Fixture(info["kind"], load_image(path / "moving.raw"), load_image(path / "fixed.raw"),
                   read_truth(path / "truth.json"), info.get("meta", {}))
