"""Explicit finite-difference solvers for the exit problem and its log transform.

Two backward-in-time solves share one grid:

* ``solve_exit_bvp``: the linear equation ``q_t + L q = 0`` with ``q = 1`` on
  lateral boundary nodes and ``q = 0`` on the terminal slice, giving the exit
  probability.
* ``solve_hjb``: the value function ``J = -eps log E[exp(-Phi/eps)]``, which
  solves

      J_t + eps/2 tr(a J_11) + sum_{j>=2} <f_j, J_j> + H(t, x, J_1) = 0,
      H(t, x, p) = <f_1, p> - 1/2 p^T a p,

  with ``J = Phi`` on the lateral boundary and the terminal slice.  Block-1
  transport lives inside ``H``; writing it again in the sum would count
  ``f_1`` twice and break ``J = -eps log g``.

Second differences act on block-1 axes only, so the operator stays
degenerate exactly as the model is.  Transport along blocks 2..n is
upwinded, and ``H`` is evaluated in its control form ``min_u {L(u) + <u, p>}``
with one-sided differences chosen by the sign of ``u`` (the Godunov flux when
``d == 1``).  Under the CFL bound checked by :func:`check_stability` the
scheme is monotone, which gives the discrete maximum principle
(``0 <= q <= 1``, ``J`` within its boundary data).

An infinite terminal cost (exit indicator) is replaced by a finite penalty
``M`` on the terminal slice; ``exp(-M/eps)`` is then the only discrepancy
with the exact transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError, StabilityError
from .model import ChainSystem, DomainSpec, TerminalFunctional, check_ellipticity, diffusion_matrix, full_drift

__all__ = [
    "GridSpec",
    "ValueField",
    "ControlField",
    "hamiltonian",
    "running_cost",
    "duality_check",
    "check_stability",
    "default_penalty",
    "solve_hjb",
    "solve_exit_bvp",
    "extract_control",
    "MAX_GRID_DIM",
]

MAX_GRID_DIM = 3


# ---------------------------------------------------------------- pointwise

def _f1_and_a(system, t, x):
    x = np.asarray(x, dtype=float)
    return system.drift_block(1, t, x), diffusion_matrix(system, t, x)


def hamiltonian(system: ChainSystem, t: float, x, p) -> np.ndarray:
    """``<f_1, p> - 1/2 p^T a p`` for a block-1 gradient ``p``."""
    f1, a = _f1_and_a(system, t, x)
    p = np.asarray(p, dtype=float)
    return np.einsum("...i,...i->...", f1, p) - 0.5 * np.einsum("...i,...ij,...j->...", p, a, p)


def running_cost(system: ChainSystem, t: float, x, u) -> np.ndarray:
    """``1/2 (f_1 - u)^T a^{-1} (f_1 - u)``."""
    f1, a = _f1_and_a(system, t, x)
    r = f1 - np.asarray(u, dtype=float)
    try:
        w = np.linalg.solve(a, r[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        from .errors import EllipticityError
        raise EllipticityError(f"diffusion matrix is singular at t={t}") from exc
    return 0.5 * np.einsum("...i,...i->...", r, w)


def duality_check(system: ChainSystem, t: float, x, p, candidate_us) -> float:
    """``|min_u {L(u) + <p, u>} - H(p)|`` over the supplied candidates."""
    us = np.atleast_2d(np.asarray(candidate_us, dtype=float))
    x = np.asarray(x, dtype=float)
    vals = running_cost(system, t, np.broadcast_to(x, (len(us),) + x.shape), us) + us @ np.asarray(p, dtype=float)
    return float(abs(np.min(vals) - hamiltonian(system, t, x, p)))


# ---------------------------------------------------------------- grid

@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over the bounding box plus ``n_steps`` uniform time steps.

    Stability depends on the model, so it is verified by
    :func:`check_stability` (called by the solvers); :meth:`for_problem`
    picks the smallest stable ``n_steps``.
    """

    intervals: tuple
    points: tuple
    n_steps: int
    n_store: int = 101

    def __post_init__(self):
        if len(self.intervals) != len(self.points):
            raise ValueError("intervals and points must have the same length")
        if any(p < 3 for p in self.points):
            raise ValueError("need at least 3 points per axis")
        if self.n_steps < 1 or self.n_store < 2:
            raise ValueError("n_steps must be >= 1 and n_store >= 2")
        object.__setattr__(self, "intervals", tuple((float(a), float(b)) for a, b in self.intervals))
        object.__setattr__(self, "points", tuple(int(p) for p in self.points))

    @property
    def ndim(self) -> int:
        return len(self.points)

    @property
    def axes(self) -> list:
        return [np.linspace(a, b, p) for (a, b), p in zip(self.intervals, self.points)]

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(b - a) / (p - 1) for (a, b), p in zip(self.intervals, self.points)])

    def nodes(self) -> np.ndarray:
        """All nodes, shape ``(*points, ndim)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def store_indices(self) -> np.ndarray:
        """Time-step indices (0 = start) kept in solved fields."""
        stride = max(1, math.ceil(self.n_steps / (self.n_store - 1)))
        idx = np.arange(0, self.n_steps + 1, stride)
        if idx[-1] != self.n_steps:
            idx = np.append(idx, self.n_steps)
        return idx

    def with_steps(self, n_steps: int) -> "GridSpec":
        return GridSpec(self.intervals, self.points, n_steps, self.n_store)

    @classmethod
    def from_domain(cls, domain: DomainSpec, points, n_steps: int = 1, n_store: int = 101) -> "GridSpec":
        if np.isscalar(points):
            points = [int(points)] * len(domain.bounding_box)
        return cls(domain.bounding_box, tuple(points), n_steps, n_store)

    @classmethod
    def for_problem(cls, system, domain, eps, points, terminal=None, nonlinear=True, safety=0.9,
                    n_store=101, penalty=None) -> "GridSpec":
        g = cls.from_domain(domain, points, 1, n_store)
        rate, _ = _cfl_rate(g, system, domain, eps, terminal, nonlinear, penalty)
        T = domain.T - domain.s
        return g.with_steps(max(1, math.ceil(T * rate / safety)))


def _time_samples(domain):
    return (domain.s, 0.5 * (domain.s + domain.T), domain.T)


def default_penalty(system: ChainSystem, domain: DomainSpec, eps: float, grid: GridSpec) -> float:
    """Finite stand-in for an infinite terminal cost.

    ``20 eps`` makes ``exp(-M/eps)`` ~ 2e-9; the second term exceeds the
    action of a straight exit from the innermost node with no drift help.
    """
    x = grid.nodes().reshape(-1, grid.ndim)
    depth = float(np.max(-np.asarray(domain.signed_distance(x)), initial=0.0))
    return 20.0 * eps + 2.0 * depth ** 2 / (system.lambda_floor * (domain.T - domain.s))


def _boundary_data_range(system, domain, terminal, eps, grid, penalty):
    if terminal is None:
        return 1.0
    x = grid.nodes().reshape(-1, grid.ndim)
    vals = [terminal.lateral_value(t, x) for t in _time_samples(domain)]
    term = terminal.terminal_value(domain.T, x)
    if not np.all(np.isfinite(term)):
        term = np.where(np.isfinite(term), term, penalty)
    vals.append(term)
    v = np.concatenate([np.ravel(a) for a in vals])
    return float(np.max(v) - np.min(v))


def _cfl_rate(grid, system, domain, eps, terminal, nonlinear, penalty):
    """Largest per-unit-time outflow coefficient and the axis term that dominates it."""
    if grid.ndim != system.dim:
        raise ValueError(f"grid has {grid.ndim} axes, model has dimension {system.dim}")
    x = grid.nodes().reshape(-1, grid.ndim)
    inside = np.asarray(domain.signed_distance(x)) < 0
    xi = x[inside]
    d = system.d
    dx = grid.spacing
    fmax = np.zeros(grid.ndim)
    amax = np.zeros((d, d))
    for t in _time_samples(domain):
        fmax = np.maximum(fmax, np.max(np.abs(full_drift(system, t, xi)), axis=0))
        amax = np.maximum(amax, np.max(np.abs(diffusion_matrix(system, t, xi)), axis=0))
    pmax = 0.0
    if nonlinear:
        if penalty is None:
            penalty = default_penalty(system, domain, eps, grid)
        pmax = _boundary_data_range(system, domain, terminal, eps, grid, penalty) / float(np.min(dx[:d]))
    terms = {}
    diff = sum(eps * amax[k, k] / dx[k] ** 2 + eps * sum(amax[k, l] for l in range(d) if l != k) / (2 * dx[k] * dx[k]) for k in range(d))
    terms["diffusion"] = diff
    if nonlinear:
        terms["hamiltonian"] = sum((fmax[k] + amax[k].sum() * pmax) / dx[k] for k in range(d))
    else:
        terms["drift block 1"] = sum(fmax[k] / dx[k] for k in range(d))
    terms["transport blocks 2..n"] = sum(fmax[k] / dx[k] for k in range(d, grid.ndim))
    rate = sum(terms.values())
    return rate, max(terms, key=terms.get)


def check_stability(grid: GridSpec, system: ChainSystem, domain: DomainSpec, eps: float,
                    terminal: TerminalFunctional = None, nonlinear: bool = True, penalty=None) -> float:
    """Raise :class:`StabilityError` unless ``dt * rate <= 1``; returns ``dt * rate``."""
    rate, binding = _cfl_rate(grid, system, domain, eps, terminal, nonlinear, penalty)
    dt = (domain.T - domain.s) / grid.n_steps
    cfl = dt * rate
    if cfl > 1.0:
        need = math.ceil((domain.T - domain.s) * rate)
        raise StabilityError(
            f"CFL number {cfl:.3g} > 1 (binding constraint: {binding}); need n_steps >= {need}",
            constraint=binding)
    return cfl


# ---------------------------------------------------------------- fields

@dataclass
class ValueField:
    """Solved field on stored time slices: ``values[k]`` lives at ``times[k]``."""

    values: np.ndarray
    times: np.ndarray
    grid: GridSpec
    eps: float
    scheme: str
    meta: dict = field(default_factory=dict)

    def slice_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.values[k]

    def at(self, t: float, x) -> np.ndarray:
        """Multilinear interpolation on the nearest stored slice."""
        return _interp(self.grid, self.slice_at(t)[..., None], np.asarray(x, dtype=float))[0][..., 0]


@dataclass
class ControlField:
    """Tilting control ``v = -sigma^T grad_1 J`` on stored slices, norm-capped."""

    values: np.ndarray  # (S, *points, d)
    times: np.ndarray
    grid: GridSpec
    cap: float
    clamped: np.ndarray  # (S, *points) bool
    eps: float
    meta: dict = field(default_factory=dict)
    interpolation: str = "multilinear"

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def zeros(cls, grid: GridSpec, d: int, eps: float, times=None, cap: float = math.inf) -> "ControlField":
        times = np.array([0.0, 1.0]) if times is None else np.asarray(times, dtype=float)
        shape = (len(times),) + grid.points
        return cls(np.zeros(shape + (d,)), times, grid, cap, np.zeros(shape, dtype=bool), eps)

    def slice_index(self, t: float) -> int:
        if len(self.times) == 1:
            return 0
        k = int(np.searchsorted(self.times, t))
        k = min(max(k, 1), len(self.times) - 1)
        return k if abs(self.times[k] - t) < abs(t - self.times[k - 1]) else k - 1

    def evaluate(self, t: float, x):
        """Return ``(v, clamp_hit)`` at states ``x`` (``(..., D)``)."""
        k = self.slice_index(t)
        return _interp(self.grid, self.values[k], np.asarray(x, dtype=float), self.clamped[k])

    @property
    def clamp_fraction(self) -> float:
        return float(np.mean(self.clamped))


def _interp(grid: GridSpec, table: np.ndarray, x: np.ndarray, flags=None):
    """Multilinear interpolation of ``table`` (``(*points, c)``) at ``x``."""
    lead = x.shape[:-1]
    x = x.reshape(-1, grid.ndim)
    lo = np.array([a for a, _ in grid.intervals])
    dx = grid.spacing
    pts = np.array(grid.points)
    pos = np.clip((x - lo) / dx, 0.0, pts - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), pts - 2)
    w = pos - i0
    strides = np.array([int(np.prod(pts[k + 1:])) for k in range(grid.ndim)], dtype=np.int64)
    flat = table.reshape(-1, table.shape[-1])
    flag_flat = None if flags is None else flags.reshape(-1)
    out = np.zeros((len(x), table.shape[-1]))
    hit = np.zeros(len(x), dtype=bool)
    for corner in range(1 << grid.ndim):
        bits = np.array([(corner >> k) & 1 for k in range(grid.ndim)])
        wc = np.prod(np.where(bits, w, 1.0 - w), axis=1)
        idx = (i0 + bits) @ strides
        out += wc[:, None] * flat[idx]
        if flag_flat is not None:
            hit |= flag_flat[idx] & (wc > 0)
    return out.reshape(lead + (table.shape[-1],)), hit.reshape(lead)


# ---------------------------------------------------------------- solvers

class _Operator:
    """Node-wise coefficients and stencils shared by both solves."""

    def __init__(self, system, domain, grid, eps):
        if grid.ndim > MAX_GRID_DIM:
            raise ValueError(f"grid solvers are limited to n*d <= {MAX_GRID_DIM} (got {grid.ndim})")
        self.system, self.domain, self.grid, self.eps = system, domain, grid, eps
        self.shape = grid.points
        self.x = grid.nodes()
        self.flat = self.x.reshape(-1, grid.ndim)
        sd = np.asarray(domain.signed_distance(self.flat)).reshape(self.shape)
        self.dirichlet = sd >= 0
        self.interior = ~self.dirichlet
        edge = np.zeros(self.shape, dtype=bool)
        for k in range(grid.ndim):
            sl = [slice(None)] * grid.ndim
            sl[k] = 0
            edge[tuple(sl)] = True
            sl[k] = -1
            edge[tuple(sl)] = True
        if np.any(edge & self.interior):
            raise ValueError("grid edge nodes must lie outside the domain")
        self.dx = grid.spacing
        self.d = system.d
        self._cache = None
        check_ellipticity(system, [(t, self.flat[self.interior.ravel()]) for t in _time_samples(domain)],
                          strict=True) if self.interior.any() else None

    def characteristic_nodes(self, t) -> int:
        """Dirichlet nodes next to the interior where the drift is tangent to the boundary."""
        near = np.zeros(self.shape, dtype=bool)
        for k in range(self.grid.ndim):
            near |= np.roll(self.interior, 1, axis=k) | np.roll(self.interior, -1, axis=k)
        near &= self.dirichlet
        x = self.flat[near.ravel()]
        if len(x) == 0:
            return 0
        h = 1e-6 * float(np.min(self.dx))
        normal = np.empty_like(x)
        for k in range(self.grid.ndim):
            e = np.zeros(self.grid.ndim)
            e[k] = h
            normal[:, k] = (np.asarray(self.domain.signed_distance(x + e)) -
                            np.asarray(self.domain.signed_distance(x - e))) / (2 * h)
        f = full_drift(self.system, t, x)
        flux = np.abs(np.einsum("mi,mi->m", f, normal))
        return int(np.sum(flux <= 1e-9 * (1.0 + np.linalg.norm(f, axis=-1))))

    def coeffs(self, t):
        if self._cache is not None and getattr(self.system, "autonomous", False):
            return self._cache
        f = full_drift(self.system, t, self.flat).reshape(self.shape + (self.grid.ndim,))
        a = diffusion_matrix(self.system, t, self.flat).reshape(self.shape + (self.d, self.d))
        ainv = np.linalg.inv(a)
        self._cache = (f, a, ainv)
        return self._cache

    def diffs(self, J, k):
        h = self.dx[k]
        fwd = (np.roll(J, -1, axis=k) - J) / h
        bwd = (J - np.roll(J, 1, axis=k)) / h
        return fwd, bwd

    def second(self, J, k, l):
        if k == l:
            return (np.roll(J, -1, axis=k) - 2 * J + np.roll(J, 1, axis=k)) / self.dx[k] ** 2
        pp = np.roll(np.roll(J, -1, axis=k), -1, axis=l)
        pm = np.roll(np.roll(J, -1, axis=k), 1, axis=l)
        mp = np.roll(np.roll(J, 1, axis=k), -1, axis=l)
        mm = np.roll(np.roll(J, 1, axis=k), 1, axis=l)
        return (pp - pm - mp + mm) / (4 * self.dx[k] * self.dx[l])

    def diffusion(self, J, a):
        out = np.zeros_like(J)
        for k in range(self.d):
            for l in range(self.d):
                out += a[..., k, l] * self.second(J, k, l)
        return 0.5 * self.eps * out

    def transport(self, J, f, axes):
        out = np.zeros_like(J)
        for k in axes:
            fwd, bwd = self.diffs(J, k)
            fk = f[..., k]
            out += np.where(fk > 0, fk * fwd, fk * bwd)
        return out

    def hamiltonian(self, J, f, a, ainv):
        """Upwind ``min_u {L(u) + <u, p>}``: forward differences where ``u_k >= 0``.

        Each sign pattern of ``u`` picks one-sided differences; the
        unconstrained minimiser for that pattern is clipped to it.  For
        ``d == 1`` (or diagonal ``a``) this is the exact Godunov flux.
        """
        d = self.d
        fw, bw = zip(*(self.diffs(J, k) for k in range(d)))
        f1 = f[..., :d]
        best = None
        for pattern in range(1 << d):
            pos = [(pattern >> k) & 1 == 1 for k in range(d)]
            p = np.stack([fw[k] if pos[k] else bw[k] for k in range(d)], axis=-1)
            u = f1 - np.einsum("...ij,...j->...i", a, p)
            for k in range(d):
                u[..., k] = np.maximum(u[..., k], 0.0) if pos[k] else np.minimum(u[..., k], 0.0)
            r = f1 - u
            val = 0.5 * np.einsum("...i,...ij,...j->...", r, ainv, r) + np.einsum("...i,...i->...", u, p)
            best = val if best is None else np.minimum(best, val)
        return best


def _march(op, grid, domain, data_at, rhs, label):
    """Backward explicit sweep; ``data_at(t)`` gives Dirichlet values."""
    s, T = domain.s, domain.T
    dt = (T - s) / grid.n_steps
    store = grid.store_indices()
    keep = {int(k): i for i, k in enumerate(store)}
    out = np.empty((len(store),) + grid.points)
    J = data_at(T, terminal=True)
    out[keep[grid.n_steps]] = J
    for k in range(grid.n_steps - 1, -1, -1):
        t_next = s + (k + 1) * dt
        upd = J + dt * rhs(J, t_next)
        J = np.where(op.interior, upd, data_at(s + k * dt, terminal=False))
        if not np.all(np.isfinite(J)):
            node = tuple(int(i) for i in np.argwhere(~np.isfinite(J))[0])
            raise SolverError(f"{label}: non-finite value at time index {k}, node {node}", t_index=k, node=node)
        if k in keep:
            out[keep[k]] = J
    return out, s + store * dt


def solve_hjb(system: ChainSystem, domain: DomainSpec, terminal: TerminalFunctional, eps: float,
              grid: GridSpec, penalty: float = None) -> ValueField:
    """Backward sweep for ``J``; see the module docstring for the scheme."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    op = _Operator(system, domain, grid, eps)
    if penalty is None:
        penalty = default_penalty(system, domain, eps, grid)
    cfl = check_stability(grid, system, domain, eps, terminal, True, penalty)
    nodes = op.flat

    def data_at(t, terminal_slice):
        lateral = terminal.lateral_value(t, nodes).reshape(grid.points)
        if not terminal_slice:
            return lateral
        term = terminal.terminal_value(t, nodes).reshape(grid.points)
        term = np.where(np.isfinite(term), term, penalty)
        return np.where(op.dirichlet, lateral, term)

    d = system.d

    def rhs(J, t):
        f, a, ainv = op.coeffs(t)
        return op.diffusion(J, a) + op.transport(J, f, range(d, grid.ndim)) + op.hamiltonian(J, f, a, ainv)

    values, times = _march(op, grid, domain, lambda t, terminal: data_at(t, terminal), rhs, "solve_hjb")
    meta = {"penalty": penalty, "cfl": cfl, "kind": terminal.kind,
            "characteristic_nodes": op.characteristic_nodes(domain.s)}
    return ValueField(values, times, grid, eps, "explicit-upwind-godunov", meta)


def solve_exit_bvp(system: ChainSystem, domain: DomainSpec, eps: float, grid: GridSpec) -> ValueField:
    """Exit probability ``q(t, x) = P(tau <= T)`` on the grid."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    op = _Operator(system, domain, grid, eps)
    cfl = check_stability(grid, system, domain, eps, None, False)
    lateral = op.dirichlet.astype(float)

    def data_at(t, terminal):
        return lateral

    def rhs(q, t):
        f, a, _ = op.coeffs(t)
        return op.diffusion(q, a) + op.transport(q, f, range(grid.ndim))

    values, times = _march(op, grid, domain, data_at, rhs, "solve_exit_bvp")
    meta = {"cfl": cfl, "kind": "exit_probability", "characteristic_nodes": op.characteristic_nodes(domain.s)}
    return ValueField(values, times, grid, eps, "explicit-upwind", meta)


def extract_control(J: ValueField, system: ChainSystem, cap: float = None) -> ControlField:
    """``v = -sigma^T grad_1 J`` by centred differences, norm-clamped at ``cap``.

    The default cap is ten times the largest ``|f_1|`` over in-domain nodes
    (ten, if the block-1 drift vanishes there).
    """
    grid = J.grid
    d = system.d
    x = grid.nodes().reshape(-1, grid.ndim)
    if cap is None:
        fmax = 0.0
        for t in (J.times[0], J.times[-1]):
            fmax = max(fmax, float(np.max(np.linalg.norm(system.drift_block(1, t, x), axis=-1))))
        cap = 10.0 * fmax if fmax > 0 else 10.0
    S = len(J.times)
    v = np.empty((S,) + grid.points + (d,))
    clamped = np.zeros((S,) + grid.points, dtype=bool)
    for k, t in enumerate(J.times):
        grads = np.gradient(J.values[k], *grid.spacing[:d], axis=tuple(range(d)))
        if d == 1:
            grads = [grads]
        g = np.stack(grads, axis=-1).reshape(-1, d)
        sig = system.sigma_at(t, x)
        vk = -np.einsum("mji,mj->mi", sig, g)
        norm = np.linalg.norm(vk, axis=-1)
        hit = norm > cap
        vk[hit] *= (cap / norm[hit])[:, None]
        v[k] = vk.reshape(grid.points + (d,))
        clamped[k] = hit.reshape(grid.points)
    return ControlField(v, J.times.copy(), grid, float(cap), clamped, J.eps, dict(J.meta))
