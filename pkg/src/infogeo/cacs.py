"""Cross-view adaptive concept selection.

Each slot's decoding map is flattened into one token of width ``H'*W'``.
Tokens of one view attend to the other view's tokens, a linear router turns
each fused token into a weight in (0, 1), and the weights rescale the maps.
"""

from __future__ import annotations

import numpy as np

from .diffcore import LayerNorm, Linear, Module, Tensor, as_tensor
from .diffcore import ops as T
from .errors import ConfigError, ShapeError


class CrossViewFusion(Module):
    """LayerNorm(A_query + MHA(A_query, A_other, A_other)) over slot tokens."""

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 4):
        if dim % heads:
            raise ConfigError(f"token width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)

    def _split(self, x: Tensor) -> Tensor:
        b, k, _ = x.shape
        return T.swapaxes(T.reshape(x, (b, k, self.heads, self.dim // self.heads)), 1, 2)

    def attend(self, queries, keys) -> Tensor:
        q = self._split(self.w_q(queries))
        k = self._split(self.w_k(keys))
        v = self._split(self.w_v(keys))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (self.dim // self.heads) ** -0.5
        ctx = T.matmul(T.softmax(scores, axis=-1), v)            # (B, h, Kq, dh)
        b, _, kq, _ = ctx.shape
        ctx = T.reshape(T.swapaxes(ctx, 1, 2), (b, kq, self.dim))
        return self.w_o(ctx)

    def __call__(self, a_query, a_other) -> Tensor:
        a_query = as_tensor(a_query)
        return self.norm(a_query + self.attend(a_query, a_other))


LOGIT_CLAMP = 30.0


class ConceptRouter(Module):
    """psi: one linear unit per slot token, squashed by a sigmoid.

    Logits are clamped to +-30 so the weight stays strictly inside (0, 1) in
    float64 (sigmoid rounds to exactly 1 beyond ~37).
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.lin = Linear(dim, 1, rng)

    def __call__(self, fused) -> Tensor:
        logits = T.clip(self.lin(fused), -LOGIT_CLAMP, LOGIT_CLAMP)
        return T.sigmoid(logits)                                 # (B, K, 1)


def _flat(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 4:                                              # (B, K, H, W)
        return T.reshape(a, a.shape[:2] + (-1,))
    return a


def cross_view_fuse(a_q, a_g, fusion: CrossViewFusion) -> tuple[Tensor, Tensor]:
    """Fused maps for both directions: (q attends to g, g attends to q)."""
    a_q, a_g = _flat(a_q), _flat(a_g)
    if a_q.shape != a_g.shape:
        raise ShapeError(f"view attention shapes differ: {a_q.shape} vs {a_g.shape}")
    if a_q.shape[-1] % fusion.heads:
        raise ConfigError(f"H'*W'={a_q.shape[-1]} not divisible by {fusion.heads} heads")
    return fusion(a_q, a_g), fusion(a_g, a_q)


def route_concepts(fused, router: ConceptRouter) -> Tensor:
    return router(fused)


def reweight(a_d, w_cv) -> Tensor:
    """Scale each slot map by its routing weight (Hadamard product, broadcast over space).

    ``w_cv`` is ``(..., K)`` or ``(..., K, 1)``; ``a_d`` is ``(..., K, N)`` or
    ``(..., K, H, W)`` with the same leading axes.
    """
    a_d, w_cv = as_tensor(a_d), as_tensor(w_cv)
    if w_cv.ndim >= 2 and w_cv.shape[-1] == 1:
        w_cv = T.reshape(w_cv, w_cv.shape[:-1])
    spatial = a_d.ndim - w_cv.ndim
    if spatial < 1 or a_d.shape[: w_cv.ndim] != w_cv.shape:
        raise ShapeError(f"routing weights {w_cv.shape} do not match maps {a_d.shape}")
    return a_d * T.reshape(w_cv, w_cv.shape + (1,) * spatial)


def selection_penalty(w) -> Tensor:
    """Per-sample mean of w(1-w) minus the variance across slots."""
    w = as_tensor(w)
    if w.ndim >= 2 and w.shape[-1] == 1:
        w = T.reshape(w, w.shape[:-1])
    return T.mean(w * (1.0 - w), axis=-1) - T.var(w, axis=-1)


def cacs_loss(w_q, w_g) -> Tensor:
    """Mean over views (and batch) of the selection penalty."""
    return 0.5 * (T.mean(selection_penalty(w_q)) + T.mean(selection_penalty(w_g)))


def ambiguity(w) -> float:
    """Mean of w(1-w): the polarization statistic (lower = more binary)."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    return float(np.mean(w * (1.0 - w)))
