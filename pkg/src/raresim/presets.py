"""Named model presets referenced from experiment configs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ChainSystem, DomainSpec, TerminalFunctional, box_domain

__all__ = ["Scenario", "builtin_models", "get_preset", "PRESET_DEFAULTS"]


@dataclass(frozen=True)
class Scenario:
    name: str
    system: ChainSystem
    domain: DomainSpec
    terminal: TerminalFunctional
    params: dict


def _const_sigma(d, scale):
    mat = scale * np.eye(d)

    def sigma(t, x):
        return np.broadcast_to(mat, np.shape(x)[:-1] + (d, d))

    return sigma


def _ou_chain(n: int):
    # f_1 = -x^1, f_i = x^{i-1} - x^i
    blocks = [lambda t, x: -x[..., 0:1]]
    for i in range(1, n):
        blocks.append(lambda t, x, i=i: x[..., i - 1 : i] - x[..., i : i + 1])
    return blocks


def _box_scenario(name, n, blocks, p):
    L, s, T, sig = float(p["L"]), float(p["s"]), float(p["T"]), float(p["sigma"])
    start = p.get("x0")
    start = np.zeros(n) if start is None else np.asarray(start, dtype=float)
    system = ChainSystem(n, 1, tuple(blocks), _const_sigma(1, sig), lambda_floor=sig * sig, name=name,
                         autonomous=True)
    domain = box_domain([L] * n, time_window=(s, T), start=start)
    return Scenario(name, system, domain, TerminalFunctional.exit_indicator(), dict(p))


PRESET_DEFAULTS = {
    "ou-chain-2x1": {"L": 1.0, "s": 0.0, "T": 1.0, "sigma": 1.0, "x0": None},
    "ou-chain-3x1": {"L": 1.0, "s": 0.0, "T": 1.0, "sigma": 1.0, "x0": None},
    "free-bm-1": {"L": 1.0, "s": 0.0, "T": 1.0, "sigma": 1.0, "x0": None},
}

_BUILDERS: dict[str, Callable[[dict], Scenario]] = {
    "ou-chain-2x1": lambda p: _box_scenario("ou-chain-2x1", 2, _ou_chain(2), p),
    "ou-chain-3x1": lambda p: _box_scenario("ou-chain-3x1", 3, _ou_chain(3), p),
    "free-bm-1": lambda p: _box_scenario("free-bm-1", 1, [lambda t, x: np.zeros_like(x[..., 0:1])], p),
}


def builtin_models() -> dict:
    """Catalog of preset names and their default parameters."""
    return {name: dict(defaults) for name, defaults in PRESET_DEFAULTS.items()}


def get_preset(name: str, **overrides) -> Scenario:
    """Build a preset; unknown names raise ``KeyError`` (a ``LookupError``)."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(_BUILDERS)}")
    params = dict(PRESET_DEFAULTS[name])
    unknown = set(overrides) - set(params)
    if unknown:
        raise KeyError(f"unknown parameter(s) for {name}: {sorted(unknown)}")
    params.update({k: v for k, v in overrides.items()})
    return _BUILDERS[name](params)
