"""Scalar images on regular grids: I/O, pyramids, smoothing, gradients and
multilinear sampling.

Coordinates are expressed in voxel-index units along the array axes
(axis 0 first).  ``spacing`` is carried as physical metadata and only used
where a physical derivative is requested.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class ImageFormatError(ValueError):
    """Malformed image file or header."""


class ImageIntegrityError(ValueError):
    """Header and payload disagree."""


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    spacing: tuple[float, ...] = None
    intensity_range: tuple[float, float] = field(init=False, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim not in (1, 2, 3) or data.size == 0:
            raise ValueError(f"image must be 1-3 dimensional and non-empty, got shape {data.shape}")
        data.setflags(write=False)
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * data.ndim
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != data.ndim or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing {spacing} invalid for shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_range", (float(data.min()), float(data.max())))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, self.spacing)


@dataclass(frozen=True)
class PyramidLevel:
    image: Image
    scale_factor: int
    blur_sigma: float


# ---------------------------------------------------------------------------
# I/O

def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def _read_pgm(path: Path) -> Image:
    buf = path.read_bytes()
    tokens, offset = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"magic: expected P5, got {tokens[0]!r}")
    values = {}
    for name, tok in zip(("width", "height", "maxval"), tokens[1:]):
        try:
            values[name] = int(tok)
        except ValueError:
            raise ImageFormatError(f"{name}: not an integer ({tok!r})") from None
        if values[name] <= 0:
            raise ImageFormatError(f"{name}: must be positive, got {values[name]}")
    if values["maxval"] > 65535:
        raise ImageFormatError(f"maxval: {values['maxval']} exceeds 65535")
    w, h = values["width"], values["height"]
    dtype = np.dtype(">u2") if values["maxval"] > 255 else np.dtype("u1")
    raster = buf[offset:]
    expected = w * h * dtype.itemsize
    if len(raster) != expected:
        raise ImageIntegrityError(f"PGM raster has {len(raster)} bytes, header implies {expected}")
    data = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return Image(data.astype(np.float64))


def _write_pgm(img: Image, path: Path, maxval: int | None = None) -> None:
    if img.ndim != 2:
        raise ValueError("PGM holds 2D images only")
    data = img.data
    if maxval is None:
        maxval = 255 if data.max() <= 255 else 65535
    if data.min() < 0 or data.max() > maxval:
        raise ValueError(f"intensities outside [0, {maxval}]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = data.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + np.rint(data).astype(dtype).tobytes())


def _parse_meta(path: Path) -> tuple[tuple[int, ...], tuple[float, ...]]:
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ImageFormatError(f"{path.name}:{lineno}: expected key=value")
        fields[key.strip()] = value.strip()
    for key in ("dims", "spacing"):
        if key not in fields:
            raise ImageFormatError(f"{key}: missing from {path.name}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split(","))
    except ValueError:
        raise ImageFormatError(f"dims: malformed ({fields['dims']!r})") from None
    try:
        spacing = tuple(float(v) for v in fields["spacing"].split(","))
    except ValueError:
        raise ImageFormatError(f"spacing: malformed ({fields['spacing']!r})") from None
    if not 2 <= len(dims) <= 3 or any(d < 1 for d in dims):
        raise ImageFormatError(f"dims: invalid {dims}")
    if len(spacing) != len(dims) or any(s <= 0 for s in spacing):
        raise ImageFormatError(f"spacing: invalid {spacing} for dims {dims}")
    return dims, spacing


def _raw_paths(path: Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".meta") else path
    return stem.with_suffix(".raw"), stem.with_suffix(".meta")


def load_image(path, format: str | None = None) -> Image:
    """Load a P5 PGM (2D) or a raw little-endian float32 volume with a
    ``.meta`` sidecar."""
    path = Path(path)
    if format is None:
        format = "pgm" if path.suffix.lower() == ".pgm" else "raw-volume"
    if format == "pgm":
        return _read_pgm(path)
    if format != "raw-volume":
        raise ValueError(f"unknown image format {format!r}")
    raw, meta = _raw_paths(path)
    dims, spacing = _parse_meta(meta)
    payload = raw.read_bytes()
    expected = math.prod(dims) * 4
    if len(payload) != expected:
        raise ImageIntegrityError(f"{raw.name} has {len(payload)} bytes, dims {dims} imply {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Image(data.astype(np.float64), spacing)


def save_image(img: Image, path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "pgm" if path.suffix.lower() == ".pgm" else "raw-volume"
    if format == "pgm":
        _write_pgm(img, path)
        return
    raw, meta = _raw_paths(path)
    raw.write_bytes(img.data.astype("<f4").tobytes())
    meta.write_text(
        "dims=" + ",".join(str(d) for d in img.dims) + "\n"
        + "spacing=" + ",".join(repr(s) for s in img.spacing) + "\n"
    )


# ---------------------------------------------------------------------------
# Filtering

def downsample(img: Image, m: int) -> Image:
    """Block-mean downsampling by an integer factor; partial edge blocks are
    averaged over the voxels they contain."""
    if int(m) != m or m < 1:
        raise ValueError(f"downsampling factor must be an integer >= 1, got {m}")
    m = int(m)
    if m == 1:
        return img
    data = img.data
    out = data
    for axis, n in enumerate(data.shape):
        starts = np.arange(0, n, m)
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = np.minimum(starts + m, n) - starts
        shape = [1] * data.ndim
        shape[axis] = len(starts)
        out = sums / counts.reshape(shape)
    return Image(out, tuple(s * m for s in img.spacing))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    k = gaussian_kernel(sigma)
    out = img.data
    for axis in range(img.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return img.with_data(out)


def gradient(img: Image) -> list[Image]:
    """Per-axis derivative: central differences inside, one-sided at the
    borders, divided by the axis spacing."""
    if any(n < 2 for n in img.dims):
        raise ValueError(f"gradient needs at least 2 voxels per axis, got {img.dims}")
    grads = np.gradient(img.data, *img.spacing, edge_order=1)
    if img.ndim == 1:
        grads = [grads]
    return [img.with_data(g) for g in grads]


def pyramid(img: Image, levels) -> list[PyramidLevel]:
    """Build one level per ``(scale_factor, blur_sigma)`` pair.  The blur is
    applied at the level's own resolution."""
    out = []
    for m, sigma in levels:
        level = gaussian_blur(downsample(img, m), sigma)
        out.append(PyramidLevel(level, int(m), float(sigma)))
    return out


# ---------------------------------------------------------------------------
# Sampling

def sample(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``data`` at ``points`` (shape (n, d)).

    Points outside ``[0, n_axis - 1]`` on any axis evaluate to 0.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if np.isnan(points).any():
        raise ValueError("NaN coordinate")
    dims = np.array(data.shape)
    d = data.ndim
    inside = np.all((points >= 0) & (points <= dims - 1), axis=1)
    p = np.where(inside[:, None], points, 0.0)
    base = np.minimum(np.floor(p).astype(np.int64), np.maximum(dims - 2, 0))
    frac = p - base
    out = np.zeros(len(p))
    for corner in range(1 << d):
        w = np.ones(len(p))
        idx = []
        for axis in range(d):
            bit = (corner >> axis) & 1
            if bit:
                w = w * frac[:, axis]
                idx.append(np.minimum(base[:, axis] + 1, dims[axis] - 1))
            else:
                w = w * (1.0 - frac[:, axis])
                idx.append(base[:, axis])
        out += w * data[tuple(idx)]
    return np.where(inside, out, 0.0)


def interpolate(img: Image, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (img.ndim,):
        raise ValueError(f"coordinate must have {img.ndim} components")
    return float(sample(img.data, x[None, :])[0])


def grid_coords(dims) -> np.ndarray:
    """All voxel coordinates in row-major order, shape (prod(dims), d)."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
