"""Finite-difference gradient suites for every training loss and the elementwise ops.

The loss suite runs a tiny float64 model on a 2-pair micro-batch and compares the
backprop gradient of each loss (w.r.t. the input tokens and every parameter)
against central differences.  One perturbed forward pass scores all losses at once.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import TrainConfig
from .diffcore import Tensor, grad_check, no_grad
from .diffcore import ops as T
from .model import InfoGeoModel
from .ocva import distill_loss
from .trainer import step_components, total_loss

LOSSES = ("rec", "cacs", "struct", "align", "distill", "total")
ELEMENTWISE_TOL = 1e-6


def tiny_config(**kw) -> TrainConfig:
    base = dict(n_slots=4, iters=1, slot_dim=6, channels=8, decoder_hidden=8, grid_size=8,
                patch=2, d_depth=4, n_rows=2, r=2, batch_size=2)
    base.update(kw)
    return TrainConfig.desk(**base)


def _losses(model: InfoGeoModel, tok_q: Tensor, tok_g: Tensor) -> dict[str, Tensor]:
    comps, _ = step_components(model, tok_q, tok_g)
    comps["total"], _ = total_loss(comps, model.config)
    return comps


def loss_suite(seed: int = 0, step: float = 1e-5, config: TrainConfig | None = None
               ) -> dict[str, float]:
    """Worst relative error per loss over tokens and all model parameters."""
    cfg = tiny_config() if config is None else config
    rng = np.random.default_rng(seed)
    model = InfoGeoModel(cfg, rng)
    shape = (2, cfg.n_tokens, cfg.channels)
    tok_q = Tensor(rng.normal(size=shape), requires_grad=True)
    tok_g = Tensor(rng.normal(size=shape), requires_grad=True)
    inputs = [tok_q, tok_g] + model.parameters()

    analytic: dict[str, list[np.ndarray]] = {}
    for name in LOSSES:
        for t in inputs:
            t.grad = None
        _losses(model, tok_q, tok_g)[name].backward()
        analytic[name] = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                          for t in inputs]
    for t in inputs:
        t.grad = None

    worst = dict.fromkeys(LOSSES, 0.0)
    with no_grad():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = _losses(model, tok_q, tok_g)
                flat[i] = orig - step
                lo = _losses(model, tok_q, tok_g)
                flat[i] = orig
                for name in LOSSES:
                    num = (float(hi[name].data) - float(lo[name].data)) / (2.0 * step)
                    ana = analytic[name][k].reshape(-1)[i]
                    worst[name] = max(worst[name], abs(ana - num) / max(1.0, abs(num)))
    return worst


def distill_suite(seed: int = 0, batch: int = 3, dim: int = 5, step: float = 1e-5) -> float:
    """Relational distillation on free descriptors, both forms.

    Two samples carry no scale-free relation (the normalized matrix is constant), so
    this check uses a larger batch.  Only the students are perturbed: the teacher is
    held fixed by design and has no analytic gradient.
    """
    rng = np.random.default_rng(seed)
    f_q, f_g = (Tensor(rng.normal(size=(batch, dim))) for _ in range(2))
    ft_q, ft_g = (Tensor(rng.normal(size=(batch, dim))) for _ in range(2))
    return max(grad_check(lambda a, b: distill_loss(a, ft_q, b, ft_g, form), [f_q, f_g], step)
               for form in ("literal", "scaled"))


# (op, input domain); domains keep clear of kinks and singularities
_UNARY: dict[str, tuple[Callable, tuple[float, float]]] = {
    "exp": (T.exp, (-2.0, 2.0)),
    "log": (T.log, (0.5, 3.0)),
    "sqrt": (T.sqrt, (0.5, 3.0)),
    "tanh": (T.tanh, (-2.0, 2.0)),
    "sigmoid": (T.sigmoid, (-3.0, 3.0)),
    "gelu": (T.gelu, (-3.0, 3.0)),
    "neg": (lambda a: -a, (-2.0, 2.0)),
    "square": (lambda a: T.power(a, 2.0), (-2.0, 2.0)),
    "cube": (lambda a: T.power(a, 3.0), (-1.5, 1.5)),
}
_BINARY: dict[str, tuple[Callable, tuple[float, float], tuple[float, float]]] = {
    "add": (T.add, (-2.0, 2.0), (-2.0, 2.0)),
    "sub": (T.sub, (-2.0, 2.0), (-2.0, 2.0)),
    "mul": (T.mul, (-2.0, 2.0), (-2.0, 2.0)),
    "div": (T.div, (-2.0, 2.0), (0.5, 2.0)),
}


def elementwise_suite(trials: int = 1000, seed: int = 0, step: float = 1e-5) -> float:
    """Worst relative error over randomized elementwise-op trials (with broadcasting)."""
    rng = np.random.default_rng(seed)
    names = sorted(_UNARY) + sorted(_BINARY)
    worst = 0.0
    for _ in range(trials):
        name = names[rng.integers(len(names))]
        shape = tuple(int(s) for s in rng.integers(1, 4, size=rng.integers(1, 3)))
        weights = rng.normal(size=shape)
        if name in _UNARY:
            fn, (lo, hi) = _UNARY[name]
            args = [Tensor(rng.uniform(lo, hi, size=shape))]
        else:
            fn, (lo_a, hi_a), (lo_b, hi_b) = _BINARY[name]
            # the second operand sometimes broadcasts along the leading axis
            shape_b = (1,) + shape[1:] if rng.random() < 0.3 else shape
            args = [Tensor(rng.uniform(lo_a, hi_a, size=shape)),
                    Tensor(rng.uniform(lo_b, hi_b, size=shape_b))]
        worst = max(worst, grad_check(lambda *xs: T.tsum(fn(*xs) * weights), args, step))
    return worst


def run_suites(seed: int = 0) -> dict[str, float]:
    """All suites as ``{name: worst relative error}``."""
    results = loss_suite(seed)
    results["distill_b3"] = distill_suite(seed)
    results["elementwise"] = elementwise_suite(seed=seed)
    return results
