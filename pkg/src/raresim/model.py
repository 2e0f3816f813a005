"""Chain-of-subsystems diffusion model, domain and terminal functional.

State vectors have length ``n * d`` and are laid out block by block:
``x[..., (i-1)*d : i*d]`` is subsystem ``i``.  Noise acts on block 1 only.

All callables are vectorised: they receive ``t`` (scalar) and ``x`` with
shape ``(..., n*d)`` and must broadcast over the leading axes.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EllipticityError, ModelEvaluationError

__all__ = [
    "ChainSystem",
    "DomainSpec",
    "TerminalFunctional",
    "EllipticityWarning",
    "full_drift",
    "noise_injection",
    "diffusion_matrix",
    "check_ellipticity",
    "check_dependency_pattern",
    "box_domain",
    "ball_domain",
]

DriftBlock = Callable[[float, np.ndarray], np.ndarray]


class EllipticityWarning(RuntimeWarning):
    """Observed min eigenvalue of sigma sigma^T is below ``lambda_floor``."""


@dataclass(frozen=True)
class ChainSystem:
    """Drift blocks ``f_1..f_n``, diffusion ``sigma`` and ellipticity floor.

    ``f_i`` for ``i >= 3`` may only read blocks ``i-1..n``; see
    :func:`check_dependency_pattern`.
    """

    n: int
    d: int
    drift_blocks: tuple
    sigma: Callable[[float, np.ndarray], np.ndarray]
    lambda_floor: float
    name: str = "custom"
    autonomous: bool = False  # drift and sigma ignore t; lets solvers cache coefficients

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if len(self.drift_blocks) != self.n:
            raise ValueError(f"expected {self.n} drift blocks, got {len(self.drift_blocks)}")
        if not self.lambda_floor > 0:
            raise ValueError("lambda_floor must be positive")
        object.__setattr__(self, "drift_blocks", tuple(self.drift_blocks))

    @property
    def dim(self) -> int:
        return self.n * self.d

    def block(self, x: np.ndarray, i: int) -> np.ndarray:
        """Block ``i`` (1-based) of ``x``."""
        return x[..., (i - 1) * self.d : i * self.d]

    def drift_block(self, i: int, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        val = np.asarray(self.drift_blocks[i - 1](t, x), dtype=float)
        val = np.broadcast_to(val, x.shape[:-1] + (self.d,))
        if not np.all(np.isfinite(val)):
            raise ModelEvaluationError(f"drift block f_{i} is not finite at t={t}", block=i)
        return val

    def sigma_at(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = np.asarray(self.sigma(t, x), dtype=float)
        s = np.broadcast_to(s, x.shape[:-1] + (self.d, self.d))
        if not np.all(np.isfinite(s)):
            raise ModelEvaluationError(f"sigma is not finite at t={t}")
        return s


def full_drift(system: ChainSystem, t: float, x) -> np.ndarray:
    """Concatenate ``f_1(t, x), ..., f_n(t, x)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != system.dim:
        raise ValueError(f"state has length {x.shape[-1]}, expected {system.dim}")
    return np.concatenate([system.drift_block(i, t, x) for i in range(1, system.n + 1)], axis=-1)


def noise_injection(system: ChainSystem, t: float, x, xi) -> np.ndarray:
    """``b sigma(t, x) xi``: the noise term placed in block 1, zeros elsewhere.

    The ``sqrt(eps)`` factor is left to the caller.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != system.d:
        raise ValueError(f"xi has length {xi.shape[-1]}, expected {system.d}")
    s = system.sigma_at(t, x)
    head = np.einsum("...ij,...j->...i", s, xi)
    out = np.zeros(np.broadcast_shapes(x.shape, head.shape[:-1] + (system.dim,)))
    out[..., : system.d] = head
    return out


def diffusion_matrix(system: ChainSystem, t: float, x) -> np.ndarray:
    """``a = sigma sigma^T`` with shape ``(..., d, d)``."""
    s = system.sigma_at(t, x)
    return s @ np.swapaxes(s, -1, -2)


def check_ellipticity(system: ChainSystem, samples, strict: bool = False) -> float:
    """Minimum eigenvalue of ``sigma sigma^T`` over ``(t, x)`` samples.

    Below ``lambda_floor`` this warns (simulation) or raises
    :class:`EllipticityError` when ``strict`` (PDE solves).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("check_ellipticity needs at least one (t, x) sample")
    lo = math.inf
    for t, x in samples:
        eig = np.linalg.eigvalsh(diffusion_matrix(system, t, x))
        lo = min(lo, float(np.min(eig)))
    if lo < system.lambda_floor:
        msg = f"min eigenvalue of sigma sigma^T is {lo:.6g} < lambda_floor={system.lambda_floor:.6g}"
        if strict:
            raise EllipticityError(msg)
        warnings.warn(msg, EllipticityWarning, stacklevel=2)
    return lo


def check_dependency_pattern(system: ChainSystem, t: float, x, rng=None, trials: int = 16) -> bool:
    """Verify ``f_i`` (``i >= 3``) ignores blocks ``1..i-2``.

    Perturbs those blocks at random and requires bit-identical output.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, dtype=float)
    d = system.d
    for i in range(3, system.n + 1):
        ref = system.drift_block(i, t, x)
        for _ in range(trials):
            y = x.copy()
            y[..., : (i - 2) * d] += rng.normal(scale=10.0, size=y[..., : (i - 2) * d].shape)
            if not np.array_equal(system.drift_block(i, t, y), ref):
                return False
    return True


@dataclass(frozen=True)
class DomainSpec:
    """Bounded domain via a signed distance (negative inside), horizon, box.

    ``start`` is the initial state ``x_s`` at time ``s = time_window[0]``.
    """

    signed_distance: Callable[[np.ndarray], np.ndarray]
    time_window: tuple
    bounding_box: tuple
    start: np.ndarray = field(default=None)
    name: str = "custom"

    def __post_init__(self):
        s, T = self.time_window
        if not (0 <= s < T):
            raise ValueError(f"time window must satisfy 0 <= s < T, got {self.time_window}")
        box = tuple((float(lo), float(hi)) for lo, hi in self.bounding_box)
        if any(not lo < hi for lo, hi in box):
            raise ValueError("bounding box intervals must be non-empty")
        object.__setattr__(self, "bounding_box", box)
        if len(box) <= 12:
            corners = np.array(list(itertools.product(*box)))
            if np.any(np.asarray(self.signed_distance(corners)) <= 0):
                raise ValueError("bounding box must strictly enclose the domain")
        if self.start is not None:
            start = np.asarray(self.start, dtype=float)
            if start.shape != (len(box),):
                raise ValueError("start must be a state vector matching the bounding box")
            if not float(self.signed_distance(start)) < 0:
                raise ValueError("start must lie strictly inside the domain")
            object.__setattr__(self, "start", start)

    @property
    def s(self) -> float:
        return float(self.time_window[0])

    @property
    def T(self) -> float:
        return float(self.time_window[1])

    @property
    def diameter(self) -> float:
        """Bounding-box diagonal, an upper bound on the domain diameter."""
        return float(math.hypot(*(hi - lo for lo, hi in self.bounding_box)))

    def inside(self, x) -> np.ndarray:
        return np.asarray(self.signed_distance(np.asarray(x, dtype=float))) < 0

    def with_start(self, start) -> "DomainSpec":
        return DomainSpec(self.signed_distance, self.time_window, self.bounding_box, start, self.name)


def box_domain(half_widths: Sequence[float], time_window=(0.0, 1.0), start=None,
               pad: float = 0.25) -> DomainSpec:
    """Open box ``prod (-h_k, h_k)`` with the bounding box padded by ``pad * h_k``."""
    h = np.asarray(half_widths, dtype=float)

    def sd(x):
        x = np.asarray(x, dtype=float)
        return np.max(np.abs(x) - h, axis=-1)

    box = tuple((-(1 + pad) * hk, (1 + pad) * hk) for hk in h)
    return DomainSpec(sd, tuple(time_window), box, start, name=f"box{len(h)}")


def ball_domain(center: Sequence[float], radius: float, time_window=(0.0, 1.0), start=None,
                pad: float = 0.25) -> DomainSpec:
    c = np.asarray(center, dtype=float)

    def sd(x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - c, axis=-1) - radius

    box = tuple((ck - (1 + pad) * radius, ck + (1 + pad) * radius) for ck in c)
    return DomainSpec(sd, tuple(time_window), box, start, name=f"ball{len(c)}")


@dataclass(frozen=True)
class TerminalFunctional:
    """Cost ``Phi(theta, x_theta)`` charged at the stopping datum.

    ``kind="exit_indicator"`` means ``Phi = 0`` on lateral exit before ``T``
    and ``+inf`` otherwise, so ``exp(-Phi/eps)`` is the exit indicator.
    For ``kind="bounded_lipschitz"`` ``phi(t, x)`` is evaluated at the
    stopping datum whether or not the path exited.
    """

    kind: str
    phi: Callable = None
    bound: float = math.inf

    def __post_init__(self):
        if self.kind not in ("bounded_lipschitz", "exit_indicator"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        if self.kind == "bounded_lipschitz" and self.phi is None:
            raise ValueError("bounded_lipschitz terminal needs a phi callable")

    @classmethod
    def exit_indicator(cls) -> "TerminalFunctional":
        return cls("exit_indicator")

    @classmethod
    def constant(cls, c: float) -> "TerminalFunctional":
        c = float(c)
        if c < 0:
            raise ValueError("terminal cost must be nonnegative")
        return cls("bounded_lipschitz", lambda t, x: np.full(np.shape(x)[:-1], c), bound=c)

    def evaluate(self, theta, x, exited) -> np.ndarray:
        exited = np.asarray(exited, dtype=bool)
        if self.kind == "exit_indicator":
            return np.where(exited, 0.0, np.inf)
        theta = np.broadcast_to(np.asarray(theta, dtype=float), exited.shape)
        x = np.asarray(x, dtype=float)
        if theta.ndim == 0:
            return np.asarray(self.phi(float(theta), x), dtype=float)
        out = np.empty(exited.shape)
        for t in np.unique(theta):
            sel = theta == t
            out[sel] = self.phi(float(t), x[sel])
        return out

    def weight(self, theta, x, exited, eps: float) -> np.ndarray:
        """``exp(-Phi/eps)``; ``Phi = +inf`` maps to exactly 0."""
        phi = self.evaluate(theta, x, exited)
        if np.any(phi < 0):
            raise ValueError("terminal cost must be nonnegative")
        out = np.zeros(np.shape(phi))
        finite = np.isfinite(phi)
        out[finite] = np.exp(-phi[finite] / eps)
        return out

    def lateral_value(self, t: float, x) -> np.ndarray:
        """Boundary data on lateral (exit) nodes."""
        x = np.asarray(x, dtype=float)
        if self.kind == "exit_indicator":
            return np.zeros(x.shape[:-1])
        return np.asarray(self.phi(t, x), dtype=float)

    def terminal_value(self, T: float, x) -> np.ndarray:
        """Boundary data on the terminal slice (may be ``+inf``)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "exit_indicator":
            return np.full(x.shape[:-1], np.inf)
        return np.asarray(self.phi(T, x), dtype=float)
