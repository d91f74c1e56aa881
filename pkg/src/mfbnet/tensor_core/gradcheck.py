"""Central finite-difference checker for tape gradients."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import ConfigurationError, NumericError
from .tensor import Tape, Tensor, backward, no_tape

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-4

_monitor = threading.local()


def note_kink_inputs(values: np.ndarray, kind: str) -> None:
    """Called by ops with a nondifferentiable point at 0 ("relu", "sqrt")."""
    stack = getattr(_monitor, "stack", None)
    if stack and values.size:
        stack[-1].append((kind, float(np.abs(values).min())))


class kink_distance:
    """Context measuring how close evaluated inputs came to a kink at zero.

        with kink_distance() as kd:
            f(point)
        kd.value        # min |input| over every relu / power-norm call, inf if none
        kd.of("sqrt")   # the same, restricted to one kind
    """

    def __enter__(self):
        self._seen = []
        stack = getattr(_monitor, "stack", None)
        if stack is None:
            stack = _monitor.stack = []
        stack.append(self._seen)
        return self

    def __exit__(self, *exc):
        _monitor.stack.pop()
        return False

    @property
    def value(self) -> float:
        return min((d for _, d in self._seen), default=float("inf"))

    def of(self, kind: str) -> float:
        return min((d for k, d in self._seen if k == kind), default=float("inf"))


@dataclass
class GradCheckReport:
    per_param: dict = field(default_factory=dict)  # name -> max relative error
    worst: dict = field(default_factory=dict)  # name -> flat index of the worst coordinate
    max_rel_err: float = 0.0
    tol: float = DEFAULT_TOL
    passed: bool = True
    kink_distance: float = float("inf")

    def worst_param(self):
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)


def relative_error(g, g_hat) -> np.ndarray:
    g, g_hat = np.asarray(g), np.asarray(g_hat)
    return np.abs(g - g_hat) / np.maximum(np.maximum(np.abs(g), np.abs(g_hat)), 1e-8)


def _evaluate(f, values, name, flat_idx) -> float:
    with no_tape():
        try:
            out = f({k: Tensor._wrap(v) for k, v in values.items()})
        except NumericError as exc:
            raise NumericError(f"non-finite evaluation at {name}[{flat_idx}]: {exc}") from exc
    val = float(out.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericError(f"non-finite evaluation at {name}[{flat_idx}]")
    return val


def central_differences(f, point: Mapping[str, np.ndarray], step: float = DEFAULT_STEP) -> dict:
    """(f(p+h e_i) - f(p-h e_i)) / 2h for every coordinate of every named array."""
    if step <= 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {step}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    out = {}
    for name, base in point.items():
        approx = np.zeros(base.size)
        for i in range(base.size):
            values = dict(point)
            plus = base.copy().reshape(-1)
            plus[i] += step
            values[name] = plus.reshape(base.shape)
            f_plus = _evaluate(f, values, name, i)
            minus = base.copy().reshape(-1)
            minus[i] -= step
            values[name] = minus.reshape(base.shape)
            approx[i] = (f_plus - _evaluate(f, values, name, i)) / (2 * step)
        out[name] = approx.reshape(base.shape)
    return out


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a dict of named tensors and must return a scalar Tensor. It
    is re-evaluated twice per coordinate, so it has to be a pure function of
    its inputs (re-seed any RNG inside it).
    """
    if step <= 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {step}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    with Tape() as tape, kink_distance() as kd:
        tensors = tape.watch_all(point)
        loss = f(tensors)
    grads = backward(tape, loss)
    numeric = central_differences(f, point, step)

    report = GradCheckReport(tol=tol, kink_distance=kd.value)
    for name in point:
        err = relative_error(grads[name].reshape(-1), numeric[name].reshape(-1))
        report.per_param[name] = float(err.max()) if err.size else 0.0
        report.worst[name] = int(err.argmax()) if err.size else -1
    report.max_rel_err = max(report.per_param.values(), default=0.0)
    report.passed = report.max_rel_err <= tol
    return report
