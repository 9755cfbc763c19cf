"""Object-centric visual augmentation and relational distillation.

Feature maps are handled in token layout ``(..., N, C)``; the aggregator
treats each channel as a row of length ``N`` (MixVPR-style mixing).
"""

from __future__ import annotations

import numpy as np

from .diffcore import LayerNorm, Linear, MLP, Module, Tensor, as_tensor, stop_gradient
from .diffcore import ops as T
from .errors import ConfigError, ShapeError


class AffinityProjector(Module):
    """G: two-layer MLP applied to the attention-pooled feature vector."""

    def __init__(self, channels: int, c_cond: int, n_tokens: int, rng: np.random.Generator):
        self.mlp = MLP(channels, channels, c_cond, rng)
        # the pooled vector is a sum over N cells, so shrink the first layer accordingly
        self.mlp.fc1.weight.data *= 1.0 / n_tokens

    def __call__(self, pooled) -> Tensor:
        return self.mlp(pooled)


class FiLM(Module):
    """P: a single linear map from the affinity vector to per-channel logits."""

    def __init__(self, c_cond: int, channels: int, rng: np.random.Generator):
        self.lin = Linear(c_cond, channels, rng)

    def __call__(self, v_h) -> Tensor:
        return T.sigmoid(self.lin(v_h))


def pool_affinity(a_hat, z_tokens) -> Tensor:
    """Sum_k Sum_i A(k, i) Z(:, i): maps (..., K, N), tokens (..., N, C) -> (..., C)."""
    a_hat, z_tokens = as_tensor(a_hat), as_tensor(z_tokens)
    if a_hat.shape[-1] != z_tokens.shape[-2]:
        raise ShapeError(f"spatial size of maps {a_hat.shape} and features {z_tokens.shape} differ")
    cell_mass = T.tsum(a_hat, axis=-2, keepdims=True)               # (..., 1, N)
    return T.reshape(T.matmul(cell_mass, z_tokens), cell_mass.shape[:-2] + (z_tokens.shape[-1],))


def affinity_vector(a_hat, z_tokens, projector: AffinityProjector) -> Tensor:
    return projector(pool_affinity(a_hat, z_tokens))


def film_modulate(z_tokens, v_h, film: FiLM) -> Tensor:
    """Z * (1 + gamma), gamma = sigmoid(P v_h) broadcast over cells."""
    gamma = film(v_h)
    return as_tensor(z_tokens) * T.expand_dims(1.0 + gamma, -2)


def fuse(z_hat, z, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * as_tensor(z_hat) + (1.0 - alpha) * as_tensor(z)


class MixerBlock(Module):
    def __init__(self, n_tokens: int, rng: np.random.Generator):
        self.norm = LayerNorm(n_tokens)
        self.lin = Linear(n_tokens, n_tokens, rng)

    def __call__(self, rows) -> Tensor:
        return rows + T.gelu(self.lin(self.norm(rows)))


class Aggregator(Module):
    """Feature mixer over channel rows, then depth-wise and row-wise projections."""

    def __init__(self, channels: int, n_tokens: int, d_depth: int, n_rows: int,
                 rng: np.random.Generator, depth: int = 2):
        self.blocks = [MixerBlock(n_tokens, rng) for _ in range(depth)]
        self.depth_proj = Linear(channels, d_depth, rng)
        self.row_proj = Linear(n_tokens, n_rows, rng)
        self.dim = d_depth * n_rows

    def __call__(self, z_tokens) -> Tensor:
        rows = T.swapaxes(as_tensor(z_tokens), -1, -2)             # (..., C, N)
        for block in self.blocks:
            rows = block(rows)
        x = self.depth_proj(T.swapaxes(rows, -1, -2))               # (..., N, d_depth)
        x = self.row_proj(T.swapaxes(x, -1, -2))                    # (..., d_depth, n_rows)
        return T.normalize(T.reshape(x, x.shape[:-2] + (self.dim,)), axis=-1)


def aggregate(z_tokens, aggregator: Aggregator) -> Tensor:
    return aggregator(z_tokens)


def relation_matrix(f) -> Tensor:
    """Pairwise Euclidean distances between the rows of an N x D batch."""
    f = as_tensor(f)
    if f.shape[0] < 2:
        raise ConfigError("relation matrix needs at least two descriptors")
    diff = T.expand_dims(f, 1) - T.expand_dims(f, 0)
    return T.l2_norm(diff, axis=-1)


RD_FORMS = ("literal", "scaled")


def _scale_free(rel: Tensor, eps: float = 1e-8) -> Tensor:
    # divide by the mean off-diagonal distance so a uniform shrink of the batch costs nothing
    n = rel.shape[0]
    return rel / (rel.sum() * (1.0 / (n * (n - 1))) + eps)


def distill_loss(f_q, ft_q, f_g, ft_g, form: str = "literal") -> Tensor:
    """Relational distillation from (frozen) teacher ``ft`` into student ``f``.

    ``literal``: half the summed Frobenius gap between the distance matrices.
    ``scaled``: each matrix is divided by its mean off-diagonal distance and the gap
    is a mean square, so only the shape of the batch geometry is matched and the
    pull fades as it is matched.  Training uses ``scaled`` by default because the
    literal form, through an aggregator shared by both paths, rewards shrinking
    every descriptor distance and collapses retrieval.
    """
    if form not in RD_FORMS:
        raise ConfigError(f"form must be one of {RD_FORMS}, got {form!r}")
    if as_tensor(f_q).shape[0] != as_tensor(ft_q).shape[0] or \
            as_tensor(f_g).shape[0] != as_tensor(ft_g).shape[0]:
        raise ShapeError("student and teacher batches differ in size")
    total = None
    for student, teacher in ((f_q, ft_q), (f_g, ft_g)):
        rs, rt = relation_matrix(student), stop_gradient(relation_matrix(teacher))
        if form == "scaled":
            gap = _scale_free(rs) - _scale_free(rt)
            term = (gap * gap).sum() * (1.0 / gap.shape[0] ** 2)
        else:
            gap = rs - rt
            term = T.l2_norm(T.reshape(gap, (-1,)), axis=0)
        total = term if total is None else total + term
    return 0.5 * total
