"""Discrete large-deviation action and its minimisation over exit paths.

Only the block-1 path ``phi`` is free.  Blocks 2..n follow their ODEs
``x_j' = f_j(t, x)`` driven by ``phi`` (RK4 with ``phi`` linear between
knots), and the cost charges the block-1 velocity against the drift:

    L(t, x, u) = 1/2 (u - f_1(t, x))^T a(t, x)^{-1} (u - f_1(t, x)).

Knots are uniform on ``[s, s + theta]``; ``theta`` is optimised together with
the knot values.  The final knot is projected onto the boundary along the
gradient of the signed distance, so every iterate is an exit path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import EllipticityError
from .model import ChainSystem, DomainSpec, diffusion_matrix

__all__ = [
    "DiscretePath",
    "ActionValue",
    "ComparisonRow",
    "action",
    "path_action",
    "integrate_slaved",
    "minimize_action",
    "blowup_probe",
    "asymptotic_comparison",
    "gap_trend",
]


@dataclass
class DiscretePath:
    """Knot times ``t_0 = s < ... < t_K = s + theta`` and full states at the knots."""

    times: np.ndarray
    phi: np.ndarray  # (K+1, d) block-1 values
    states: np.ndarray  # (K+1, n*d), block 1 equal to phi

    @property
    def theta(self) -> float:
        """Exit time (absolute)."""
        return float(self.times[-1])

    @property
    def knots(self) -> int:
        return len(self.times) - 1

    def rows(self):
        """CSV rows ``(t, x_0, ..., x_{D-1})``."""
        for t, x in zip(self.times, self.states):
            yield [repr(float(t))] + [repr(float(v)) for v in x]


@dataclass(frozen=True)
class ActionValue:
    value: float
    grad_norm: float
    converged: bool
    iterations: int = 0
    restart: int = 0


# ---------------------------------------------------------------- evaluation

def _slaved_rhs(system, t, x):
    # derivative of blocks 2..n only
    return np.concatenate([system.drift_block(i, t, x) for i in range(2, system.n + 1)], axis=-1)


def _rk4_interval(system, t, h, x, phi0, phi1):
    """Advance blocks 2..n over one interval with block 1 linear from phi0 to phi1."""
    d = system.d
    if system.n == 1:
        return phi1.copy()
    mid = 0.5 * (phi0 + phi1)

    def state(p, y):
        return np.concatenate([p, y], axis=-1)

    y = x[..., d:]
    k1 = _slaved_rhs(system, t, state(phi0, y))
    k2 = _slaved_rhs(system, t + h / 2, state(mid, y + h / 2 * k1))
    k3 = _slaved_rhs(system, t + h / 2, state(mid, y + h / 2 * k2))
    k4 = _slaved_rhs(system, t + h, state(phi1, y + h * k3))
    return state(phi1, y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))


def integrate_slaved(system: ChainSystem, s: float, theta, phi: np.ndarray, start_tail: np.ndarray) -> np.ndarray:
    """Full states at the knots for batched block-1 knots ``phi`` (``(B, K+1, d)``).

    ``theta`` holds the durations ``(B,)``; ``start_tail`` the initial values
    of blocks 2..n.
    """
    phi = np.asarray(phi, dtype=float)
    B, K = phi.shape[0], phi.shape[1] - 1
    h = (np.asarray(theta, dtype=float) / K)[:, None]
    X = np.empty((B, K + 1, system.dim))
    X[:, 0, : system.d] = phi[:, 0]
    X[:, 0, system.d:] = start_tail
    for k in range(K):
        X[:, k + 1] = _rk4_interval(system, s + k * h, h, X[:, k], phi[:, k], phi[:, k + 1])
    return X


def _lagrangian(system, t, x, u):
    f1 = system.drift_block(1, t, x)
    a = diffusion_matrix(system, t, x)
    r = u - f1
    try:
        w = np.linalg.solve(a, r[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise EllipticityError("diffusion matrix is singular along the path") from exc
    return 0.5 * np.einsum("...i,...i->...", r, w)


def _action_from_states(system, s, theta, phi, X):
    K = phi.shape[1] - 1
    h = np.asarray(theta, dtype=float)[:, None] / K
    vel = np.diff(phi, axis=1) / h[..., None]
    total = np.zeros(len(phi))
    for j in range(K):
        total += _lagrangian(system, s + j * h, X[:, j], vel[:, j])
        total += _lagrangian(system, s + (j + 1) * h, X[:, j + 1], vel[:, j])
    return 0.5 * total * h[:, 0]


def action(path: DiscretePath, system: ChainSystem) -> float:
    """Trapezoidal action of ``path``; blocks 2..n are re-integrated from its start."""
    s = float(path.times[0])
    theta = np.array([path.times[-1] - s])
    phi = path.phi[None]
    X = integrate_slaved(system, s, theta, phi, path.states[0, system.d:])
    return float(_action_from_states(system, s, theta, phi, X)[0])


def path_action(system: ChainSystem, s: float, theta: float, phi, start_tail=None) -> float:
    """Action of block-1 knots ``phi`` spread uniformly over ``[s, s+theta]``."""
    phi = np.asarray(phi, dtype=float)[None]
    theta = np.array([float(theta)])
    tail = np.zeros(system.dim - system.d) if start_tail is None else np.asarray(start_tail, dtype=float)
    X = integrate_slaved(system, s, theta, phi, tail)
    return float(_action_from_states(system, s, theta, phi, X)[0])


# ---------------------------------------------------------------- minimisation

class _Problem:
    """Batched objective ``A(project(z))`` with ``z = (phi_1..phi_K, theta)``."""

    def __init__(self, system, domain, start, K):
        self.system, self.domain, self.K = system, domain, K
        self.d = system.d
        self.s = domain.s
        self.theta_max = domain.T - domain.s
        self.theta_min = 1e-3 * self.theta_max
        self.start = np.asarray(start, dtype=float)
        self.phi0 = self.start[: self.d]
        self.tail = self.start[self.d:]
        self.tol = 1e-12 * domain.diameter

    def unpack(self, z):
        z = np.atleast_2d(z)
        B = len(z)
        phi = np.empty((B, self.K + 1, self.d))
        phi[:, 0] = self.phi0
        phi[:, 1:] = z[:, :-1].reshape(B, self.K, self.d)
        return phi, z[:, -1].copy()

    def pack(self, phi, theta):
        return np.concatenate([phi[:, 1:].reshape(len(phi), -1), theta[:, None]], axis=1)

    def _last(self, X_prev, phi_prev, phi_end, theta):
        h = (theta / self.K)[:, None]
        return _rk4_interval(self.system, self.s + (self.K - 1) * h, h, X_prev, phi_prev, phi_end)

    def project(self, phi, theta, X):
        """Newton on ``sd(X_K) = 0`` moving ``phi_K`` along its gradient."""
        sd = self.domain.signed_distance
        d = self.d
        Xp, pp = X[:, -2], phi[:, -2]
        end = phi[:, -1].copy()
        step = 1e-7 * self.domain.diameter
        for _ in range(50):
            XK = self._last(Xp, pp, end, theta)
            c = np.asarray(sd(XK), dtype=float)
            if np.all(np.abs(c) <= self.tol):
                break
            g = np.empty_like(end)
            for k in range(d):
                e = np.zeros(d)
                e[k] = step
                g[:, k] = (np.asarray(sd(self._last(Xp, pp, end + e, theta))) -
                           np.asarray(sd(self._last(Xp, pp, end - e, theta)))) / (2 * step)
            gg = np.einsum("bi,bi->b", g, g)
            gg = np.where(gg > 0, gg, np.inf)
            end = end - (c / gg)[:, None] * g
        phi = phi.copy()
        phi[:, -1] = end
        X = X.copy()
        X[:, -1] = self._last(Xp, pp, end, theta)
        return phi, X

    def evaluate(self, z):
        """Projected ``z``, action values, and interior feasibility."""
        phi, theta = self.unpack(z)
        X = integrate_slaved(self.system, self.s, theta, phi, self.tail)
        phi, X = self.project(phi, theta, X)
        A = _action_from_states(self.system, self.s, theta, phi, X)
        inside = np.all(np.asarray(self.domain.signed_distance(X[:, :-1])) < 0, axis=1)
        return self.pack(phi, theta), np.asarray(A, dtype=float), inside

    def gradient(self, z):
        n = len(z)
        scale = np.full(n, 1e-6 * self.domain.diameter)
        scale[-1] = 1e-6 * self.theta_max
        E = np.diag(scale)
        zp, zm = z + E, z - E
        # keep theta inside its bounds for the difference
        zp[-1, -1] = min(zp[-1, -1], self.theta_max)
        zm[-1, -1] = max(zm[-1, -1], self.theta_min)
        _, A, _ = self.evaluate(np.vstack([zp, zm]))
        return (A[:n] - A[n:]) / (zp[np.arange(n), np.arange(n)] - zm[np.arange(n), np.arange(n)])

    def precondition(self, g, z):
        """Solve with the free-particle Hessian (tridiagonal in knots), scale theta separately."""
        K, d = self.K, self.d
        h = z[-1] / K
        lam = self.system.lambda_floor
        ab = np.zeros((3, K))
        ab[0, 1:] = -1.0
        ab[1, :] = 2.0
        ab[1, -1] = 1.0  # endpoint is free along the boundary
        ab[2, :-1] = -1.0
        G = g[:-1].reshape(K, d)
        step = solve_banded((1, 1), ab / (h * lam), G).ravel()
        # curvature of the action in theta, from a free-particle estimate
        A_scale = max(float(np.sum(np.diff(np.vstack([self.phi0, z[:-1].reshape(K, d)]), axis=0) ** 2)) / (lam * z[-1]), 1e-8)
        c_theta = 2.0 * A_scale / z[-1] ** 2
        return np.append(step, g[-1] / c_theta)


def _initial_guesses(problem, R, seed):
    """Straight lines from the start towards ``R`` boundary probe points."""
    d = problem.d
    dirs = []
    for k in range(d):
        dirs += [np.eye(d)[k], -np.eye(d)[k]]
    rng = np.random.default_rng(seed)
    while len(dirs) < R:
        v = rng.normal(size=d)
        dirs.append(v / np.linalg.norm(v))
    dirs = dirs[:R]
    sd = problem.domain.signed_distance
    z0 = []
    reach = problem.domain.diameter
    for u in dirs:
        lo, hi = 0.0, reach
        point = problem.start.copy()
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            point[:d] = problem.phi0 + mid * u
            if float(sd(point)) < 0:
                lo = mid
            else:
                hi = mid
        end = problem.phi0 + hi * u
        frac = np.linspace(0.0, 1.0, problem.K + 1)[1:, None]
        phi = problem.phi0 + frac * (end - problem.phi0)
        z0.append(np.append(phi.ravel(), problem.theta_max))
    return z0


def _descend(problem, z, max_iter, tol_rel):
    z, A, ok = problem.evaluate(z)
    z, A = z[0], float(A[0])
    gnorm = math.inf
    for it in range(1, max_iter + 1):
        g = problem.gradient(z)
        gp = g.copy()
        at_top = z[-1] >= problem.theta_max - 1e-12 and g[-1] < 0
        at_bottom = z[-1] <= problem.theta_min + 1e-12 and g[-1] > 0
        if at_top or at_bottom:
            gp[-1] = 0.0
        gnorm = float(np.linalg.norm(gp))
        if gnorm < tol_rel * (1.0 + A):
            return z, A, gnorm, True, it
        direction = -problem.precondition(gp, z)
        slope = float(gp @ direction)
        if slope >= 0:
            direction, slope = -gp, -gnorm ** 2
        alpha = 1.0
        accepted = False
        for _ in range(60):
            trial = z + alpha * direction
            trial[-1] = min(max(trial[-1], problem.theta_min), problem.theta_max)
            zt, At, inside = problem.evaluate(trial)
            if inside[0] and np.isfinite(At[0]) and At[0] <= A + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return z, A, gnorm, False, it
        z, A = zt[0], float(At[0])
    return z, A, gnorm, False, max_iter


def minimize_action(system: ChainSystem, domain: DomainSpec, start=None, knots: int = 32, restarts: int = 2,
                    max_iter: int = 1000, tol: float = 1e-6, seed: int = 0):
    """Minimal exit action from ``start`` with free exit time ``theta <= T - s``.

    Returns ``(DiscretePath, ActionValue)`` for the best restart; ties go to
    the lower restart index.  A restart that cannot find a descent step
    before meeting the gradient tolerance is flagged non-converged.
    """
    start = domain.start if start is None else np.asarray(start, dtype=float)
    if start is None:
        raise ValueError("a start point is required")
    if not float(domain.signed_distance(start)) < 0:
        raise ValueError("start must lie strictly inside the domain")
    if knots < 8 or restarts < 1:
        raise ValueError("need knots >= 8 and restarts >= 1")
    problem = _Problem(system, domain, start, knots)
    best = None
    for r, z0 in enumerate(_initial_guesses(problem, restarts, seed)):
        z, A, gnorm, conv, it = _descend(problem, z0, max_iter, tol)
        if best is None or A < best[1]:
            best = (z, A, gnorm, conv, it, r)
    z, A, gnorm, conv, it, r = best
    phi, theta = problem.unpack(z)
    X = integrate_slaved(system, problem.s, theta, phi, problem.tail)
    X[:, -1] = problem._last(X[:, -2], phi[:, -2], phi[:, -1], theta)
    times = problem.s + np.linspace(0.0, 1.0, knots + 1) * theta[0]
    path = DiscretePath(times, phi[0], X[0])
    return path, ActionValue(max(A, 0.0), gnorm, conv, it, r)


def blowup_probe(system: ChainSystem, domain: DomainSpec, path_fn, horizons, knots_per_unit: int = 256,
                 start=None) -> np.ndarray:
    """Action of ``phi(t) = path_fn(t)`` over ``[s, s + T_i]`` for each horizon.

    ``path_fn`` maps an array of times to block-1 values ``(m, d)``; blocks
    2..n start from ``start`` (default: the domain start).  The caller is
    responsible for the path staying inside the domain.
    """
    start = domain.start if start is None else np.asarray(start, dtype=float)
    tail = np.zeros(system.dim - system.d) if start is None else start[system.d:]
    s = domain.s
    out = []
    for H in horizons:
        K = max(8, int(math.ceil(knots_per_unit * H)))
        t = s + np.linspace(0.0, H, K + 1)
        phi = np.asarray(path_fn(t), dtype=float).reshape(K + 1, system.d)
        out.append(path_action(system, s, H, phi, tail))
    return np.array(out)


@dataclass(frozen=True)
class ComparisonRow:
    eps: float
    log_estimate: float  # -eps log q_hat
    action: float
    gap: float
    se_log: float  # eps * rel_err, the delta-method standard error of log_estimate
    flagged: bool = False


def asymptotic_comparison(sweep, action_value: float) -> list:
    """Rows ``(eps, -eps log q_hat, action, gap, se)`` sorted by decreasing eps.

    ``sweep`` holds estimate reports (or ``(eps, q_hat, rel_err)`` triples).
    Zero estimates are kept with NaN entries and ``flagged=True``.
    """
    rows = []
    for item in sweep:
        if isinstance(item, tuple):
            eps, q, rel = item
        else:
            eps, q, rel = item.eps, item.mean, item.rel_err
        eps, q = float(eps), float(q)
        if not q > 0:
            rows.append(ComparisonRow(eps, math.nan, action_value, math.nan, math.nan, True))
            continue
        le = -eps * math.log(q)
        rows.append(ComparisonRow(eps, le, action_value, abs(le - action_value), eps * float(rel)))
    return sorted(rows, key=lambda r: -r.eps)


def gap_trend(rows, slack: float = 3.0) -> bool:
    """True when each smaller eps has a gap below the larger one's, up to MC slack."""
    rows = [r for r in sorted(rows, key=lambda r: -r.eps)]
    if any(r.flagged for r in rows):
        return False
    return all(b.gap < a.gap + slack * (a.se_log + b.se_log) for a, b in zip(rows, rows[1:]))
