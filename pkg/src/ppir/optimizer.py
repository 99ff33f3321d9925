"""Multiresolution Gauss-Newton registration with optional voxel sampling.

The loop only ever talks to the fixed image through a session object (see
:mod:`ppir.protocols`), so the clear and secure backends share this code.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .image import Image, downsample, gaussian_blur, grid_coords
from .mi import ParzenAxis, derivative_tensor, histogram_matrix_a, mi_gauss_newton_terms, mi_value
from .ssd import MovingImage, ssd_terms_secure
from .transforms import AffineTransform, BSplineTransform, displacement_field

log = logging.getLogger(__name__)


class StepFailure(ArithmeticError):
    """The damped system could not be solved."""


class NumericFailure(ArithmeticError):
    """The cost became non-finite."""


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon: float = 1e-3
    max_iters: int = 50
    levels: tuple = ((1, 0.0),)
    sampling: str = "full"  # full | urs | gms
    sample_fraction: float = 0.1
    backend: str = "clear"
    seed: int = 0
    step_damping: float = 1.0
    ridge: float = 1e-6
    max_halvings: int = 5
    mi_bins: tuple = (32, 32)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.levels:
            raise ValueError("at least one pyramid level is required")
        scales = [int(m) for m, _ in self.levels]
        if any(m < 1 for m in scales) or any(a < b for a, b in zip(scales, scales[1:])):
            raise ValueError(f"level scales must be >= 1 and non-increasing, got {scales}")
        if self.sampling not in ("full", "urs", "gms"):
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError(f"sample fraction must lie in (0, 1], got {self.sample_fraction}")
        if not 0 < self.step_damping <= 1:
            raise ValueError(f"step damping must lie in (0, 1], got {self.step_damping}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class IterationRecord:
    level: int
    cost: float
    step_norm: float
    halvings: int
    accepted: bool
    samples: int
    cpu_party1: float
    cpu_party2: float
    bytes_party1: int
    bytes_party2: int


@dataclass
class RegistrationResult:
    params: AffineTransform | BSplineTransform
    iterations: list = field(default_factory=list)  # per level
    cost_trace: list = field(default_factory=list)  # per level, cost before each step
    records: list = field(default_factory=list)
    error: str | None = None
    wall_seconds: float = 0.0

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @property
    def total_iterations(self) -> int:
        return len(self.records)

    def displacement(self, dims) -> np.ndarray:
        return displacement_field(self.params, dims)

    def per_iteration(self, attr: str) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([getattr(r, attr) for r in self.records]))


# ---------------------------------------------------------------------------
# Steps and sampling

def gauss_newton_step(G, H, damping: float = 1.0, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(H + λI) Δθ = -G`` with ``λ = ridge · trace(H) / |θ|``.

    ``G`` is the cost gradient, so the returned step decreases the cost.
    """
    G = np.asarray(G, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (G.size, G.size):
        raise ValueError(f"H shape {H.shape} does not match |θ| = {G.size}")
    if not np.allclose(H, H.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(H).max())):
        raise ValueError("H must be symmetric")
    lam = ridge * np.trace(H) / G.size
    A = H + lam * np.eye(G.size)
    try:
        factor = linalg.cho_factor(A)
    except linalg.LinAlgError:
        raise StepFailure("damped Hessian is not positive definite") from None
    step = -linalg.cho_solve(factor, G)
    if not np.all(np.isfinite(step)):
        raise StepFailure("non-finite step")
    return damping * step


def sample_indices(strategy: str, n: int, count: int, rng: np.random.Generator, weights=None) -> np.ndarray:
    """Sorted flat voxel indices.

    ``gms`` draws without replacement with probability proportional to
    ``weights``, renormalized after each draw.
    """
    if strategy == "full":
        return np.arange(n)
    if not 1 <= count <= n:
        raise ValueError(f"sample count {count} must lie in [1, {n}]")
    if strategy == "urs":
        return np.sort(rng.choice(n, size=count, replace=False))
    if strategy != "gms":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != n:
        raise ValueError(f"need {n} weights, got {w.size}")
    w = np.where(np.isfinite(w) & (w > 0), w, 0.0)
    positive = np.flatnonzero(w)
    if positive.size == 0:
        log.warning("gradient magnitude is zero everywhere; falling back to uniform sampling")
        return np.sort(rng.choice(n, size=count, replace=False))
    if positive.size <= count:
        # every voxel with gradient is taken; the rest is filled uniformly
        rest = np.setdiff1d(np.arange(n), positive)
        extra = rng.choice(rest, size=count - positive.size, replace=False) if count > positive.size else []
        return np.sort(np.concatenate([positive, extra]).astype(np.int64))
    return np.sort(rng.choice(n, size=count, replace=False, p=w / w.sum()))


def sample_coords(strategy: str, I: Image, count: int, rng: np.random.Generator) -> np.ndarray:
    """Voxel coordinates of ``I`` drawn by ``strategy`` (GMS uses ``‖∇I‖``)."""
    weights = None
    if strategy == "gms":
        from .image import gradient

        weights = np.sqrt(sum(g.data ** 2 for g in gradient(I)))
    idx = sample_indices(strategy, I.size, count, rng, weights)
    return grid_coords(I.dims)[idx]


# ---------------------------------------------------------------------------
# Cost models

@dataclass(frozen=True)
class SsdCost:
    name: str = "ssd"

    def prepare(self, moving: MovingImage, session):
        pass

    def terms(self, moving, params, coords, idx, session):
        warped, S = moving.steepest_descent(params, coords)
        t = ssd_terms_secure(S, warped, session, idx)
        return t.value, t.G, t.H

    def value(self, moving, params, coords, idx, session, cache):
        w = moving.warped(params, coords)
        cross = float(session.matvec(w[None, :], idx)[0])
        return float(w @ w - 2.0 * cross + cache["energy"])


@dataclass(frozen=True)
class MiCost:
    """Negative mutual information; ``G`` and ``H`` from the joint PDF."""

    bins_r: int = 32
    bins_t: int = 32
    name: str = "mi"

    def prepare(self, moving: MovingImage, session):
        lo, hi = moving.image.intensity_range
        # warped samples that leave the image read as 0, so the axis must cover 0
        lo, hi = min(0.0, lo), max(0.0, hi)
        if hi <= lo:
            hi = lo + 1.0
        object.__setattr__(self, "_axis", ParzenAxis.cubic(lo, hi, self.bins_r))

    def terms(self, moving, params, coords, idx, session):
        warped, S = moving.steepest_descent(params, coords)
        A = histogram_matrix_a(warped, self._axis)
        C = derivative_tensor(warped, S.data, self._axis)
        P = session.joint_pdf(A, idx, self.bins_t)
        dP = session.joint_pdf_derivative(C, idx, self.bins_t)
        G, H = mi_gauss_newton_terms(P, dP)
        return -mi_value(P), G, H

    def value(self, moving, params, coords, idx, session, cache):
        A = histogram_matrix_a(moving.warped(params, coords), self._axis)
        return -mi_value(session.joint_pdf(A, idx, self.bins_t))


def make_cost(name: str, bins=(32, 32)):
    if name == "ssd":
        return SsdCost()
    if name == "mi":
        return MiCost(*bins)
    raise ValueError(f"unknown cost {name!r}")


# ---------------------------------------------------------------------------
# Driver

def _party_stats(session):
    ep = getattr(session, "ep", None)
    if ep is None:
        return 0.0, 0, 0
    server = session.server
    return (server.ep.cpu_seconds if server else 0.0, ep.ledger.bytes("sent"),
            server.ep.ledger.bytes("sent") if server else 0)


def register(I: Image, J_dims, model, cost, config: OptimizerConfig, session) -> RegistrationResult:
    """Register moving image ``I`` to the fixed image behind ``session``.

    ``model`` is an initial transform (its parameters are the starting
    point); ``cost`` is ``"ssd"``, ``"mi"`` or a cost object.  Parameters
    live in the full-resolution voxel frame, so nothing is transferred
    between levels.
    """
    if isinstance(cost, str):
        cost = make_cost(cost, config.mi_bins)
    rng = np.random.default_rng(config.seed)
    params = model
    result = RegistrationResult(params)
    t_start = time.monotonic()
    try:
        for level_no, (m, sigma) in enumerate(config.levels):
            moving = MovingImage(gaussian_blur(downsample(I, m), sigma), m)
            dims = tuple(math.ceil(d / m) for d in J_dims)
            session.set_level(m, sigma, dims)
            cost.prepare(moving, session)
            coords_all = grid_coords(dims)
            n = coords_all.shape[0]
            count = n if config.sampling == "full" else max(1, int(round(config.sample_fraction * n)))
            trace, iters = [], 0
            for _ in range(config.max_iters):
                cpu1 = time.thread_time()
                cpu2, b1, b2 = _party_stats(session)
                weights = None
                if config.sampling == "gms":
                    g = moving.warped_gradient(params, coords_all)
                    weights = np.linalg.norm(g, axis=1)
                idx = sample_indices(config.sampling, n, count, rng, weights)
                coords = coords_all[idx]
                sent_idx = None if config.sampling == "full" else idx
                cache = {}
                value, G, H = cost.terms(moving, params, coords, sent_idx, session)
                if not np.isfinite(value) or not np.all(np.isfinite(G)):
                    raise NumericFailure(f"non-finite cost at level {level_no}, iteration {iters}")
                trace.append(value)
                step = gauss_newton_step(G, H, config.step_damping, config.ridge)
                accepted, halvings = False, 0
                if isinstance(cost, SsdCost):
                    cache["energy"] = session.target_energy(sent_idx)
                while halvings <= config.max_halvings:
                    trial = params.with_params(params.theta + step)
                    new_value = cost.value(moving, trial, coords, sent_idx, session, cache)
                    if np.isfinite(new_value) and new_value <= value:
                        accepted = True
                        break
                    step = step / 2
                    halvings += 1
                norm = float(np.linalg.norm(step))
                if accepted:
                    params = trial
                iters += 1
                cpu2_after, b1_after, b2_after = _party_stats(session)
                result.records.append(IterationRecord(
                    level_no, value, norm, halvings, accepted, len(idx),
                    time.thread_time() - cpu1, cpu2_after - cpu2, b1_after - b1, b2_after - b2))
                if not accepted:
                    # no decrease along the damped direction: this level has converged
                    # unless fresh samples may still help
                    if config.sampling == "full":
                        break
                    continue
                if norm <= config.epsilon:
                    break
            result.iterations.append(iters)
            result.cost_trace.append(trace)
    except Exception as exc:
        if not _is_protocol_failure(exc):
            raise
        result.error = f"{type(exc).__name__}: {exc}"
        log.error("registration aborted: %s", result.error)
    result.params = params
    result.wall_seconds = time.monotonic() - t_start
    return result


def _is_protocol_failure(exc) -> bool:
    from .errors import ProtocolError, TransportError

    return isinstance(exc, (ProtocolError, TransportError))


def intensity_error(I: Image, J: Image, params) -> float:
    """Mean squared intensity difference between ``J`` and the warped ``I``
    over the full-resolution grid."""
    moving = MovingImage(I, 1)
    coords = grid_coords(J.dims)
    r = moving.warped(params, coords) - J.data.ravel()
    return float(r @ r / r.size)
