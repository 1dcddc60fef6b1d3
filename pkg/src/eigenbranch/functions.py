"""Closed vocabulary of smooth periodic functions with analytic derivatives.

Names accepted by :func:`parse_function`::

    "cos"            cos x
    "sin2"           sin^2 x
    "zero"           0
    "const:c"        c
    "cos_shift:phi"  cos(x - phi)
    "poly_trig:a0,a1,b1,a2"   a0 + a1 cos x + b1 sin x + a2 cos 2x

A mapping ``{"name": ..., "params": [...]}`` is accepted as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_Evaluator = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


class UnknownFunctionError(ValueError):
    pass


@dataclass(frozen=True)
class PeriodicFunction:
    """A named function on the circle together with its first two derivatives."""

    name: str
    params: tuple[float, ...]
    _evaluate: _Evaluator

    def __call__(self, x):
        return self._evaluate(np.asarray(x, dtype=float))

    def __str__(self):
        if not self.params:
            return self.name
        return f"{self.name}:" + ",".join(repr(p) for p in self.params)


def _cos(x):
    return np.cos(x), -np.sin(x), -np.cos(x)


def _sin2(x):
    # sin^2 x = (1 - cos 2x)/2
    return np.sin(x) ** 2, np.sin(2 * x), 2 * np.cos(2 * x)


def _const(c):
    def ev(x):
        return np.full_like(x, c), np.zeros_like(x), np.zeros_like(x)

    return ev


def _cos_shift(phi):
    def ev(x):
        return np.cos(x - phi), -np.sin(x - phi), -np.cos(x - phi)

    return ev


def _poly_trig(a0, a1, b1, a2):
    def ev(x):
        c, s = np.cos(x), np.sin(x)
        c2, s2 = np.cos(2 * x), np.sin(2 * x)
        f = a0 + a1 * c + b1 * s + a2 * c2
        d1 = -a1 * s + b1 * c - 2 * a2 * s2
        d2 = -a1 * c - b1 * s - 4 * a2 * c2
        return f, d1, d2

    return ev


# name -> (parameter count, factory)
_VOCABULARY: dict[str, tuple[int, Callable[..., _Evaluator]]] = {
    "cos": (0, lambda: _cos),
    "sin2": (0, lambda: _sin2),
    "zero": (0, lambda: _const(0.0)),
    "const": (1, _const),
    "cos_shift": (1, _cos_shift),
    "poly_trig": (4, _poly_trig),
}


def known_names() -> list[str]:
    return sorted(_VOCABULARY)


def make_function(name: str, params: Sequence[float] = ()) -> PeriodicFunction:
    if name not in _VOCABULARY:
        raise UnknownFunctionError(
            f"unknown function {name!r}; expected one of {', '.join(known_names())}"
        )
    arity, factory = _VOCABULARY[name]
    params = tuple(float(p) for p in params)
    if len(params) != arity:
        raise UnknownFunctionError(
            f"function {name!r} takes {arity} parameter(s), got {len(params)}"
        )
    return PeriodicFunction(name, params, factory(*params))


def parse_function(spec) -> PeriodicFunction:
    """Parse ``"name"``, ``"name:p1,p2"`` or ``{"name": ..., "params": [...]}``."""
    if isinstance(spec, PeriodicFunction):
        return spec
    if isinstance(spec, dict):
        if "name" not in spec:
            raise UnknownFunctionError("function mapping needs a 'name' entry")
        params = spec.get("params", ())
        if isinstance(params, (int, float)):
            params = (params,)
        return make_function(str(spec["name"]), params)
    if not isinstance(spec, str):
        raise UnknownFunctionError(f"cannot interpret {spec!r} as a function")
    name, _, arg = spec.partition(":")
    name = name.strip()
    params: list[float] = []
    if arg.strip():
        try:
            params = [float(p) for p in arg.split(",")]
        except ValueError:
            raise UnknownFunctionError(f"bad parameters in {spec!r}") from None
    return make_function(name, params)
