"""Euler-Maruyama simulation of the chain SDE, plain and tilted.

The controlled dynamics add ``b sigma v`` to the drift (an order-one change,
not scaled by ``sqrt(eps)``) and accumulate the log Girsanov weight

    log z = -(1/sqrt(eps)) sum <v, dW> - (1/(2 eps)) sum |v|^2 dt

from the same increments that drive the path, with ``v`` taken at the left
end of each step.  For the Euler chain this is the exact likelihood ratio of
the two discrete transition kernels, so the importance-sampling estimator is
unbiased for the discretised problem whatever ``dt`` is.

Exit handling: a step that lands on or outside the domain is bisected back to
the boundary (:func:`locate_exit`).  A step whose endpoints are both inside
can still have crossed; with ``bridge=True`` such steps are killed with the
half-space Brownian-bridge probability ``exp(-2 d0 d1 / (eps dt g^2))`` where
``d0, d1`` are the endpoint distances and ``g^2`` the noise variance rate of
the signed distance.  The kill probability depends only on the endpoints, so
it is identical under the plain and the tilted measure and the likelihood
ratio is unchanged.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SimulationError
from .model import ChainSystem, DomainSpec, TerminalFunctional, check_ellipticity, full_drift, noise_injection
from .rng import NoiseStream, standard_normals, uniforms

__all__ = [
    "PathSample",
    "BatchResult",
    "FunctionControl",
    "euler_step",
    "locate_exit",
    "simulate",
    "simulate_controlled",
    "simulate_batch",
    "sample_paths",
    "time_grid",
]

DEFAULT_MAX_STEPS = 10_000_000
DEFAULT_CHUNK = 8192


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray
    exited: bool
    theta: float
    exit_state: np.ndarray
    girsanov_log_weight: float = 0.0
    cost: float = math.nan
    clamped_steps: int = 0

    @property
    def weight(self) -> float:
        return math.exp(self.girsanov_log_weight)


@dataclass
class BatchResult:
    """Per-path outcomes for a contiguous block of sample indices."""

    indices: np.ndarray
    exited: np.ndarray
    theta: np.ndarray
    exit_state: np.ndarray
    log_weight: np.ndarray
    steps: np.ndarray
    clamped_steps: np.ndarray
    paths: list = field(default=None, repr=False)
    path_log_weights: list = field(default=None, repr=False)  # running log weight, aligned with paths

    def __len__(self):
        return len(self.indices)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        paths = lw = None
        if all(p.paths is not None for p in parts):
            paths = [q for p in parts for q in p.paths]
            lw = [q for p in parts for q in p.path_log_weights]
        return cls(
            *(np.concatenate([getattr(p, name) for p in parts]) for name in
              ("indices", "exited", "theta", "exit_state", "log_weight", "steps", "clamped_steps")),
            paths=paths, path_log_weights=lw,
        )


class FunctionControl:
    """Wrap a callable ``v(t, x) -> (..., d)`` as a control with a norm cap."""

    def __init__(self, fn, d: int, cap: float = math.inf):
        self.fn = fn
        self.d = d
        self.cap = float(cap)

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        v = np.array(np.broadcast_to(self.fn(t, x), x.shape[:-1] + (self.d,)), dtype=float)
        norm = np.linalg.norm(v, axis=-1)
        hit = norm > self.cap
        if np.any(hit):
            v[hit] *= (self.cap / norm[hit])[:, None]
        return v, hit


def time_grid(s: float, T: float, dt: float) -> np.ndarray:
    """``s, s+dt, ..., T``; the last step may be short."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k = max(1, math.ceil((T - s) / dt - 1e-9))
    t = s + dt * np.arange(k + 1)
    t[-1] = T
    return np.minimum(t, T)


def euler_step(system: ChainSystem, t: float, x, dt: float, eps: float, xi) -> np.ndarray:
    """One Euler-Maruyama step; ``xi`` is the Brownian increment (sd ``sqrt(dt)``)."""
    x = np.asarray(x, dtype=float)
    out = x + full_drift(system, t, x) * dt + math.sqrt(eps) * noise_injection(system, t, x, xi)
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"non-finite state after step at t={t}", t=t)
    return out


def _boundary_tol(domain: DomainSpec) -> float:
    return 1e-10 * domain.diameter


def locate_exit(previous, current, domain: DomainSpec, tol=None):
    """Bisect the segment ``previous -> current`` onto the boundary.

    Works on single states or stacks of states.  Returns ``(fraction,
    exit_state)`` where ``fraction`` is the position along the segment (the
    caller maps it to time by linear interpolation).
    """
    prev = np.asarray(previous, dtype=float)
    cur = np.asarray(current, dtype=float)
    single = prev.ndim == 1
    prev, cur = np.atleast_2d(prev), np.atleast_2d(cur)
    tol = _boundary_tol(domain) if tol is None else tol
    sd = domain.signed_distance
    lo = np.zeros(len(prev))
    hi = np.ones(len(prev))
    frac = np.ones(len(prev))
    done = np.abs(np.asarray(sd(cur), dtype=float)) <= tol
    for _ in range(64):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        mid = 0.5 * (lo[todo] + hi[todo])
        pts = prev[todo] + mid[:, None] * (cur[todo] - prev[todo])
        val = np.asarray(sd(pts), dtype=float)
        ok = np.abs(val) <= tol
        frac[todo[ok]] = mid[ok]
        done[todo[ok]] = True
        inner = ~ok & (val < 0)
        lo[todo[inner]] = mid[inner]
        outer = ~ok & (val > 0)
        hi[todo[outer]] = mid[outer]
    if not np.all(done):
        raise SimulationError("exit bisection did not converge in 64 iterations")
    state = prev + frac[:, None] * (cur - prev)
    if single:
        return float(frac[0]), state[0]
    return frac, state


def _block1_gradient(domain: DomainSpec, x: np.ndarray, d: int) -> np.ndarray:
    h = 1e-7 * domain.diameter
    grad = np.empty(x.shape[:-1] + (d,))
    for k in range(d):
        e = np.zeros(x.shape[-1])
        e[k] = h
        grad[..., k] = (np.asarray(domain.signed_distance(x + e)) - np.asarray(domain.signed_distance(x - e))) / (2 * h)
    return grad


def _push_out(domain: DomainSpec, x: np.ndarray, d: int) -> np.ndarray:
    """A point outside the domain reached from ``x`` along the block-1 gradient."""
    g = _block1_gradient(domain, x, d)
    norm = np.linalg.norm(g, axis=-1)
    g = np.where(norm[:, None] > 0, g / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    g[norm == 0, 0] = 1.0
    step = np.maximum(-np.asarray(domain.signed_distance(x), dtype=float), 1e-12) * 1.5
    out = x.copy()
    pending = np.ones(len(x), dtype=bool)
    for _ in range(200):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        cand = x[idx].copy()
        cand[:, :d] += step[idx, None] * g[idx]
        outside = np.asarray(domain.signed_distance(cand)) >= 0
        out[idx[outside]] = cand[outside]
        pending[idx[outside]] = False
        step[idx[~outside]] *= 2.0
    if np.any(pending):
        raise SimulationError("could not reach the boundary from a bridge exit")
    return out


def simulate_batch(system: ChainSystem, domain: DomainSpec, eps: float, dt: float, seed: int,
                   indices, control=None, *, start=None, bridge: bool = True,
                   max_steps: int = DEFAULT_MAX_STEPS, record: bool = False,
                   step_offset: int = 0) -> BatchResult:
    """Simulate the paths with the given sample indices, vectorised over paths.

    Path ``j`` draws its noise from ``(seed, j, step)`` only, so results are
    independent of how indices are grouped into batches.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if control is not None and eps == 0:
        raise ValueError("a tilting control needs eps > 0")
    indices = np.asarray(indices, dtype=np.int64)
    times = time_grid(domain.s, domain.T, dt)
    n_steps = len(times) - 1
    if n_steps > max_steps:
        raise SimulationError(f"{n_steps} steps exceed max_steps={max_steps}")
    start = domain.start if start is None else np.asarray(start, dtype=float)
    if start is None:
        raise ValueError("no start state given and the domain has none")
    if not float(domain.signed_distance(start)) < 0:
        raise SimulationError("start state is not strictly inside the domain")
    d, D = system.d, system.dim
    m = len(indices)
    sqeps = math.sqrt(eps)
    tol = _boundary_tol(domain)

    X = np.tile(start, (m, 1))
    exited = np.zeros(m, dtype=bool)
    theta = np.full(m, domain.T)
    exit_state = np.zeros((m, D))
    logw = np.zeros(m)
    steps = np.zeros(m, dtype=np.int64)
    clamped = np.zeros(m, dtype=np.int64)
    active = np.ones(m, dtype=bool)
    history = [X.copy()] if record else None
    whistory = [logw.copy()] if record else None

    for k in range(n_steps):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        t, h = float(times[k]), float(times[k + 1] - times[k])
        xa = X[act]
        dW = math.sqrt(h) * standard_normals(seed, indices[act], step_offset + k, d)
        sig = system.sigma_at(t, xa)
        drift = full_drift(system, t, xa)
        if control is not None:
            v, hit = control.evaluate(t, xa)
            drift[:, :d] += np.einsum("mij,mj->mi", sig, v)
            logw[act] += -np.einsum("mi,mi->m", v, dW) / sqeps - np.einsum("mi,mi->m", v, v) * h / (2 * eps)
            clamped[act] += hit
        xn = xa + drift * h
        xn[:, :d] += sqeps * np.einsum("mij,mj->mi", sig, dW)
        steps[act] += 1
        if not np.all(np.isfinite(xn)):
            bad = act[~np.all(np.isfinite(xn), axis=1)]
            raise SimulationError(f"non-finite state for sample(s) {indices[bad][:5].tolist()} at step {k}", step=k, t=t)
        if control is not None and not np.all(np.isfinite(logw[act])):
            raise SimulationError(f"non-finite Girsanov weight at step {k}", step=k, t=t)

        sd_new = np.asarray(domain.signed_distance(xn), dtype=float)
        out = sd_new >= 0
        if np.any(out):
            frac, xe = locate_exit(xa[out], xn[out], domain, tol)
            rows = act[out]
            exited[rows] = True
            theta[rows] = t + frac * h
            exit_state[rows] = xe
            active[rows] = False

        if bridge and eps > 0:
            inn = np.flatnonzero(~out)
            if inn.size:
                d0 = -np.asarray(domain.signed_distance(xa[inn]), dtype=float)
                d1 = -sd_new[inn]
                g = _block1_gradient(domain, xa[inn], d)
                a = sig[inn] @ np.swapaxes(sig[inn], -1, -2)
                g2 = np.einsum("mi,mij,mj->m", g, a, g)
                with np.errstate(divide="ignore", over="ignore"):
                    expo = np.where(g2 > 0, 2.0 * d0 * d1 / (eps * h * np.where(g2 > 0, g2, 1.0)), np.inf)
                cand = np.flatnonzero(expo < 40.0)
                if cand.size:
                    p = np.exp(-expo[cand])
                    u = uniforms(seed, indices[act[inn[cand]]], step_offset + k)
                    hit = cand[u < p]
                    if hit.size:
                        rows = act[inn[hit]]
                        closer = np.where((d0[hit] <= d1[hit])[:, None], xa[inn[hit]], xn[inn[hit]])
                        _, xe = locate_exit(closer, _push_out(domain, closer, d), domain, tol)
                        exited[rows] = True
                        theta[rows] = t + h * d0[hit] / (d0[hit] + d1[hit])
                        exit_state[rows] = xe
                        active[rows] = False
        still = active[act]
        X[act[still]] = xn[still]
        if record:
            snap = history[-1].copy()
            snap[act[still]] = xn[still]
            history.append(snap)
            whistory.append(logw.copy())

    rest = np.flatnonzero(active)
    exit_state[rest] = X[rest]
    paths = lws = None
    if record:
        stack = np.stack(history)
        wstack = np.stack(whistory)
        paths, lws = [], []
        for r in range(m):
            n_in = steps[r] if exited[r] else steps[r] + 1
            ts = np.append(times[:n_in], theta[r]) if exited[r] else times[:n_in]
            xs = np.vstack([stack[:n_in, r], exit_state[r]]) if exited[r] else stack[:n_in, r]
            paths.append((ts, xs))
            # the weight is frozen at theta, so the exit row repeats the last step's value
            w = wstack[: steps[r] + 1, r] if exited[r] else wstack[:n_in, r]
            lws.append(w)
    return BatchResult(indices, exited, theta, exit_state, logw, steps, clamped, paths, lws)


def sample_paths(system: ChainSystem, domain: DomainSpec, eps: float, dt: float, seed: int, n: int,
                 control=None, *, workers: int = 1, chunk_size: int = DEFAULT_CHUNK,
                 first_index: int = 0, **kwargs) -> BatchResult:
    """Simulate sample indices ``first_index .. first_index+n-1``.

    Chunk boundaries are fixed by ``chunk_size`` and results are reassembled
    in index order, so the output does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if domain.start is not None and kwargs.get("start") is None:
        check_ellipticity(system, [(domain.s, domain.start)])
    bounds = [(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]

    def run(b):
        idx = np.arange(first_index + b[0], first_index + b[1], dtype=np.int64)
        return simulate_batch(system, domain, eps, dt, seed, idx, control, **kwargs)

    if workers <= 1 or len(bounds) == 1:
        parts = [run(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    return BatchResult.concatenate(parts)


def _path_sample(res: BatchResult, terminal: TerminalFunctional | None) -> PathSample:
    ts, xs = res.paths[0]
    cost = math.nan
    if terminal is not None:
        cost = float(terminal.evaluate(res.theta[0], res.exit_state[0], res.exited[0]))
    return PathSample(ts, xs, bool(res.exited[0]), float(res.theta[0]), res.exit_state[0].copy(),
                      float(res.log_weight[0]), cost, int(res.clamped_steps[0]))


def simulate(system: ChainSystem, domain: DomainSpec, terminal: TerminalFunctional, eps: float,
             dt: float, stream: NoiseStream, **kwargs) -> PathSample:
    """One uncontrolled path driven by ``stream``; the stream is advanced."""
    res = simulate_batch(system, domain, eps, dt, stream.master_seed, [stream.sample_index],
                         None, record=True, step_offset=stream.step_counter, **kwargs)
    stream.step_counter += int(res.steps[0])
    return _path_sample(res, terminal)


def simulate_controlled(system: ChainSystem, domain: DomainSpec, terminal: TerminalFunctional,
                        eps: float, dt: float, stream: NoiseStream, control, **kwargs) -> PathSample:
    """One tilted path with its Girsanov log weight."""
    if not eps > 0:
        raise ValueError("the Girsanov weight needs eps > 0")
    res = simulate_batch(system, domain, eps, dt, stream.master_seed, [stream.sample_index],
                         control, record=True, step_offset=stream.step_counter, **kwargs)
    stream.step_counter += int(res.steps[0])
    return _path_sample(res, terminal)
