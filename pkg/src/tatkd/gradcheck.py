"""Central-difference gradient auditing."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteError(ArithmeticError):
    """The audited function produced a non-finite value."""


def _scalar(f, *args) -> float:
    with no_grad():
        value = float(f(*args).data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite function value {value}")
    return value


def finite_diff_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-3) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``x`` may be one tensor or a list of tensors; ``f`` is called as
    ``f(*x)`` and must return a scalar.  Perturbations are applied to each
    tensor's ``data`` in place and restored afterwards, so ``f`` may also
    close over parameters passed in ``x``.  Pass float64 tensors when the
    tolerance of interest is near float32 round-off.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None

    _scalar(f, *xs)
    out = f(*xs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f, *xs)
            flat[i] = orig - h
            fm = _scalar(f, *xs)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            worst = max(worst, float(err))

    for t, (rg, g) in zip(xs, saved):
        t.requires_grad = rg
        t.grad = g
    return worst
