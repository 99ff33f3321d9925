"""Mutual information with B-spline Parzen windows, in matrix form.

``A`` (cubic window on the warped moving intensities) belongs to the party
holding the moving image, ``B`` (box window on the fixed intensities) to the
party holding the fixed image.  The joint density and its parameter
derivative are the two products that need both:

    P  = Aᵀ B / N
    P' = -Bᵀ C / N      (one (N_t, N_r) slice per parameter)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transforms import bspline, bspline3_derivative

PDF_FLOOR = 1e-12


class ParzenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ParzenAxis:
    """Maps intensity ``v`` to the continuous bin coordinate ``(v - origin) / width``."""

    bins: int
    width: float
    origin: float

    def __post_init__(self):
        if self.bins < 2:
            raise ParzenConfigError(f"need at least 2 bins, got {self.bins}")
        if not self.width > 0:
            raise ParzenConfigError(f"bin width must be positive, got {self.width}")

    @classmethod
    def cubic(cls, lo: float, hi: float, bins: int) -> "ParzenAxis":
        # values land in [1, bins - 2] so the cubic support stays inside the histogram
        if bins < 4:
            raise ParzenConfigError(f"cubic window needs at least 4 bins, got {bins}")
        width = (hi - lo) / (bins - 3)
        return cls(bins, width, lo - width)

    @classmethod
    def box(cls, lo: float, hi: float, bins: int) -> "ParzenAxis":
        return cls(bins, (hi - lo) / (bins - 1), lo)

    def position(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.origin) / self.width


@dataclass(frozen=True)
class ParzenConfig:
    r: ParzenAxis  # moving image, cubic window
    t: ParzenAxis  # fixed image, zero-order window

    @classmethod
    def from_ranges(cls, moving_range, fixed_range, bins_r: int = 32, bins_t: int = 32) -> "ParzenConfig":
        return cls(ParzenAxis.cubic(*moving_range, bins_r), ParzenAxis.box(*fixed_range, bins_t))

    bins_r = property(lambda self: self.r.bins)
    bins_t = property(lambda self: self.t.bins)
    bin_width_r = property(lambda self: self.r.width)
    bin_width_t = property(lambda self: self.t.width)
    min_r = property(lambda self: self.r.origin)
    min_t = property(lambda self: self.t.origin)


def parzen_window(order: int, eps):
    if order not in (0, 2, 3):
        raise ValueError(f"Parzen window order must be 0, 2 or 3, got {order}")
    return bspline(order, eps)


def _eps(values, axis: ParzenAxis) -> np.ndarray:
    return np.arange(axis.bins)[None, :] - axis.position(values)[:, None]


def histogram_matrix_a(warped, axis: ParzenAxis) -> np.ndarray:
    return bspline(3, _eps(warped, axis))


def histogram_matrix_b(target, axis: ParzenAxis) -> np.ndarray:
    return bspline(0, _eps(target, axis))


def build_histogram_matrices(warped, target, cfg: ParzenConfig) -> tuple[np.ndarray, np.ndarray]:
    warped = np.asarray(warped, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if warped.shape != target.shape:
        raise ValueError("warped and target sample counts differ")
    return histogram_matrix_a(warped, cfg.r), histogram_matrix_b(target, cfg.t)


@dataclass(frozen=True)
class JointPdf:
    P: np.ndarray  # (N_r, N_t)

    @property
    def p_r(self) -> np.ndarray:
        return self.P.sum(axis=1)

    @property
    def p_t(self) -> np.ndarray:
        return self.P.sum(axis=0)


def joint_pdf(A, B) -> JointPdf:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    if A.shape[0] == 0:
        raise ValueError("no samples")
    return JointPdf(A.T @ B / A.shape[0])


def derivative_tensor(warped, S, axis: ParzenAxis) -> np.ndarray:
    """``C[k, r, p] = β³'(ε_kr) · (-1/Δb_r) · S[k, p]``."""
    S = np.asarray(S, dtype=np.float64)
    dpsi = bspline3_derivative(_eps(warped, axis)) * (-1.0 / axis.width)
    return dpsi[:, :, None] * S[:, None, :]


def build_derivative_tensor(I, params, coords, cfg: ParzenConfig, scale: int = 1) -> np.ndarray:
    from .ssd import MovingImage

    warped, S = MovingImage(I, scale).steepest_descent(params, coords)
    return derivative_tensor(warped, S.data, cfg.r)


def joint_pdf_derivative(B, C) -> np.ndarray:
    """``P'[t, r, p] = -(1/N) Σ_k B[k, t] C[k, r, p]``."""
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if B.shape[0] != C.shape[0]:
        raise ValueError(f"row counts differ: {B.shape[0]} vs {C.shape[0]}")
    n, nr, npar = C.shape
    out = -(B.T @ C.reshape(n, nr * npar)) / n
    return out.reshape(B.shape[1], nr, npar)


def mi_value(pdf: JointPdf | np.ndarray) -> float:
    P = pdf.P if isinstance(pdf, JointPdf) else np.asarray(pdf, dtype=np.float64)
    pr, pt = P.sum(axis=1), P.sum(axis=0)
    denom = np.outer(pr, pt)
    # the marginal product can underflow when P has subnormal entries
    mask = (P > 0) & (denom > 0)
    return float(np.sum(P[mask] * np.log(P[mask] / denom[mask])))


def mi_gauss_newton_terms(pdf: JointPdf | np.ndarray, dP, floor: float = PDF_FLOOR):
    """Gradient and linearized Hessian of ``-MI``.

    With ``P'`` carrying the leading minus above, ``G`` is the derivative of
    the cost ``-MI``; the ``p(t)`` marginal drops out because ``Σ_r P' = 0``.
    """
    P = pdf.P if isinstance(pdf, JointPdf) else np.asarray(pdf, dtype=np.float64)
    pr = P.sum(axis=1)
    dP = np.asarray(dP, dtype=np.float64).transpose(1, 0, 2)  # (N_r, N_t, n_params)
    mask = (P > floor) & (pr[:, None] > floor)
    safe_P = np.where(mask, P, 1.0)
    safe_pr = np.where(pr > floor, pr, 1.0)[:, None]
    log_term = np.where(mask, np.log(safe_P / safe_pr), 0.0)
    weight = np.where(mask, 1.0 / safe_P - 1.0 / safe_pr, 0.0)
    G = np.einsum("rtp,rt->p", dP, log_term)
    M = dP.reshape(-1, dP.shape[2])
    H = (M * weight.reshape(-1, 1)).T @ M
    return G, 0.5 * (H + H.T)
