from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, no_grad


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is called with ``inputs`` and must return a scalar Tensor.  The error
    for each entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    for t in inputs:
        t.data = np.array(t.data, dtype=np.float64, order="C")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f is not finite at the base point")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        worst = _numeric_pass(f, inputs, analytic, step)
    for t in inputs:
        t.grad = None
    return worst


def _numeric_pass(f, inputs, analytic, step) -> float:
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*inputs).data)
            flat[i] = orig - step
            fm = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: f is not finite at a perturbed point")
            num = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
