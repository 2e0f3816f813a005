"""Plain and importance-sampled estimators of E[exp(-Phi/eps)] with diagnostics.

Reports carry the plug-in moments ``m1 = mean(Y)`` and ``m2 = mean(Y^2)`` of
the summands ``Y`` and derive everything else from them:

    variance = (m2 - m1^2) / N
    rel_err  = sqrt(variance) / m1
    delta    = m2 / m1^2

so ``rel_err * sqrt(N) == sqrt(delta - 1)`` holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEstimatorError, EstimationError
from .model import ChainSystem, DomainSpec, TerminalFunctional
from .sde import sample_paths

__all__ = [
    "EstimateReport",
    "report_from_samples",
    "plain_mc",
    "importance_sampled",
    "delta_ratio",
    "log_efficiency_metric",
    "varadhan_check",
    "EfficiencyRow",
    "VaradhanRow",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("kind", "eps", "N", "mean", "second_moment", "variance", "rel_err",
                  "delta", "ci_lo", "ci_hi", "seed")

_Z95 = 1.959963984540054


@dataclass
class EstimateReport:
    eps: float
    n_samples: int
    mean: float
    second_moment: float
    variance: float
    rel_err: float
    delta: float
    ci95: tuple
    estimator_kind: str
    seed: int = None
    degenerate: bool = False
    samples: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)
    clamp_fraction: float = 0.0

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance)

    def row(self) -> dict:
        """CSV row in :data:`REPORT_COLUMNS` order, floats at full precision."""
        return {
            "kind": self.estimator_kind,
            "eps": repr(float(self.eps)),
            "N": str(self.n_samples),
            "mean": repr(self.mean),
            "second_moment": repr(self.second_moment),
            "variance": repr(self.variance),
            "rel_err": repr(self.rel_err),
            "delta": repr(self.delta),
            "ci_lo": repr(self.ci95[0]),
            "ci_hi": repr(self.ci95[1]),
            "seed": "" if self.seed is None else str(self.seed),
        }


def report_from_samples(summands, eps: float, kind: str, seed=None, weights=None,
                        keep_samples: bool = True) -> EstimateReport:
    """Build a report from per-sample summands (already including weights)."""
    y = np.asarray(summands, dtype=float)
    n = len(y)
    if n < 2:
        raise ValueError("need N >= 2 samples")
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise EstimationError(f"non-finite summands at sample indices {bad[:10].tolist()}", bad)
    # moments of y / scale keep delta and rel_err meaningful when y underflows
    # once squared; fsum makes the sums exactly rounded and order independent
    scale = float(np.max(np.abs(y))) if n else 0.0
    if scale > 0:
        ys = y / scale
        s1 = math.fsum(ys) / n
        s2 = math.fsum(ys * ys) / n
    else:
        s1 = s2 = 0.0
    m1, m2 = s1 * scale, s2 * scale * scale
    var_s = max(s2 - s1 * s1, 0.0) / n
    var = var_s * scale * scale
    sd = math.sqrt(var_s) * scale
    if s1 > 0:
        delta = s2 / (s1 * s1)
        rel = math.sqrt(var_s) / s1
        degenerate = False
    else:
        delta = rel = math.nan
        degenerate = True
    return EstimateReport(eps, n, m1, m2, var, rel, delta, (m1 - _Z95 * sd, m1 + _Z95 * sd), kind, seed,
                          degenerate, y if keep_samples else None,
                          None if weights is None or not keep_samples else np.asarray(weights))


def plain_mc(system: ChainSystem, domain: DomainSpec, terminal: TerminalFunctional, eps: float, N: int,
             dt: float, master_seed: int, **kwargs) -> EstimateReport:
    """Average ``exp(-Phi/eps)`` over ``N`` uncontrolled paths.

    With an exit-indicator terminal this estimates the exit probability.
    A run with no successes yields a degenerate report (mean 0, delta NaN).
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    res = sample_paths(system, domain, eps, dt, master_seed, N, None, **kwargs)
    y = terminal.weight(res.theta, res.exit_state, res.exited, eps)
    return report_from_samples(y, eps, "plain", master_seed)


def importance_sampled(system: ChainSystem, domain: DomainSpec, terminal: TerminalFunctional, eps: float,
                       N: int, dt: float, master_seed: int, control, **kwargs) -> EstimateReport:
    """Average ``exp(-Phi/eps) * z`` over ``N`` tilted paths."""
    if N < 2:
        raise ValueError("N must be at least 2")
    res = sample_paths(system, domain, eps, dt, master_seed, N, control, **kwargs)
    z = np.exp(res.log_weight)
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise EstimationError(f"non-finite Girsanov weights at sample indices {bad[:10].tolist()}", bad)
    y = terminal.weight(res.theta, res.exit_state, res.exited, eps) * z
    rep = report_from_samples(y, eps, "importance", master_seed, weights=z)
    total = int(res.steps.sum())
    rep.clamp_fraction = float(res.clamped_steps.sum()) / total if total else 0.0
    return rep


def delta_ratio(report: EstimateReport) -> float:
    """Second moment over squared mean; 1 means a zero-variance estimator."""
    if not report.mean > 0:
        raise DegenerateEstimatorError("delta is undefined for a zero mean")
    return report.second_moment / report.mean ** 2


@dataclass(frozen=True)
class EfficiencyRow:
    eps: float
    delta: float
    metric: float  # -eps * log(delta); log-efficient when this -> 0
    rerr_exponent: float  # eps * log(sqrt(N) * Rerr) = (eps/2) log(delta - 1)
    flagged: bool = False


def log_efficiency_metric(sweep) -> list:
    """Map ``(eps, delta)`` pairs to ``(eps, -eps log delta)`` rows.

    Entries with undefined or sub-unit delta are kept but flagged.
    """
    rows = []
    for eps, delta in sweep:
        eps, delta = float(eps), float(delta)
        if not math.isfinite(delta) or delta < 1.0 - 1e-12:
            rows.append(EfficiencyRow(eps, delta, math.nan, math.nan, True))
            continue
        excess = delta - 1.0
        rerr_exp = 0.5 * eps * math.log(excess) if excess > 0 else -math.inf
        rows.append(EfficiencyRow(eps, delta, -eps * math.log(delta), rerr_exp))
    return rows


@dataclass(frozen=True)
class VaradhanRow:
    eps: float
    log_mean: float  # -eps log E[exp(-Phi/eps)]
    log_second: float  # -eps log E[exp(-2 Phi/eps)]
    flagged: bool = False


def varadhan_check(reports) -> list:
    """Log-asymptotic sequences of the first and second moments.

    As ``eps -> 0`` they tend to ``inf(I + Phi)`` and ``inf(I + 2 Phi)``.
    """
    rows = []
    for r in sorted(reports, key=lambda r: -r.eps):
        if not r.mean > 0:
            rows.append(VaradhanRow(r.eps, math.nan, math.nan, True))
            continue
        rows.append(VaradhanRow(r.eps, -r.eps * math.log(r.mean), -r.eps * math.log(r.second_moment)))
    return rows
