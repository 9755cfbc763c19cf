"""Concept structural relational reasoning.

Slot maps -> cosine-similarity concept graph -> normalized Laplacian ->
smallest non-trivial eigenvectors -> orthogonal Procrustes alignment across
the two views.  All functions accept a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, jacobi_svd, sym_eig
from .diffcore import ops as T
from .errors import ConfigError, NumericError, ShapeError

DEGREE_FLOOR = 1e-8
TRIVIAL_TOL = 1e-6


@dataclass
class ConceptGraph:
    G: Tensor          # (..., K, K)
    degrees: Tensor    # (..., K)


@dataclass
class SpectralEmbedding:
    U: Tensor                  # (..., K, r)
    eigenvalues: Tensor        # (..., r)
    degenerate: np.ndarray     # (...,) bool


def concept_graph(a_hat) -> ConceptGraph:
    """Similarity graph over slots from maps shaped (K, N), (B, K, N) or (B, K, H, W)."""
    a = as_tensor(a_hat)
    if a.ndim == 4:
        a = T.reshape(a, a.shape[:2] + (-1,))
    k = a.shape[-2]
    if k < 2:
        raise ConfigError("concept graph needs at least two slots")
    norms = T.l2_norm(a, axis=-1, keepdims=True)
    unit = a / T.maximum(norms, 1e-300)
    zero = norms.data <= 0
    unit = unit * (~zero)
    cos = T.matmul(unit, T.swapaxes(unit, -1, -2))
    eye = np.eye(k)
    cos = cos * (1.0 - eye) + eye
    g = T.clip((cos + 1.0) * 0.5, 0.0, 1.0)
    g = 0.5 * (g + T.swapaxes(g, -1, -2))
    deg = T.maximum(T.tsum(g, axis=-1), DEGREE_FLOOR)
    return ConceptGraph(g, deg)


def normalized_laplacian(graph: ConceptGraph) -> Tensor:
    d = graph.degrees
    if np.any(d.data <= 0):
        raise NumericError("zero degree in concept graph")
    inv = T.power(d, -0.5)
    k = graph.G.shape[-1]
    scaled = graph.G * T.reshape(inv, inv.shape + (1,)) * T.reshape(inv, inv.shape[:-1] + (1, k))
    lap = np.eye(k) - scaled
    return 0.5 * (lap + T.swapaxes(lap, -1, -2))


def spectral_embed(lap, r: int, tol: float = TRIVIAL_TOL) -> SpectralEmbedding:
    """Eigenvectors of the ``r`` smallest non-trivial eigenvalues, ascending.

    Missing columns (fewer than ``r`` eigenvalues above ``tol``) are zero and
    the sample is flagged degenerate.
    """
    lap = as_tensor(lap)
    k = lap.shape[-1]
    if not 1 <= r <= k - 1:
        raise ConfigError(f"r={r} must lie in [1, K-1={k - 1}]")
    squeeze = lap.ndim == 2
    if squeeze:
        lap = T.reshape(lap, (1, k, k))
    w, v = sym_eig(lap)
    b = w.shape[0]
    idx = np.zeros((b, r), dtype=int)
    keep = np.zeros((b, r), dtype=bool)
    for i in range(b):
        nz = np.flatnonzero(w.data[i] >= tol)[:r]
        idx[i, : len(nz)] = nz
        keep[i, : len(nz)] = True
    u = T.take_along_axis(v, np.broadcast_to(idx[:, None, :], (b, k, r)), axis=-1) * keep[:, None, :]
    lam = T.take_along_axis(w, idx, axis=-1) * keep
    degenerate = ~keep.all(axis=-1)
    if squeeze:
        return SpectralEmbedding(u[0], lam[0], degenerate[0])
    return SpectralEmbedding(u, lam, degenerate)


def procrustes_align(u_q, u_g) -> tuple[np.ndarray, Tensor]:
    """Closed-form min over orthogonal Q of ||U_q - U_g Q||_F^2.

    Q* = A B^T from the SVD U_g^T U_q = A S B^T, held constant for backward.
    """
    u_q, u_g = as_tensor(u_q), as_tensor(u_g)
    if u_q.shape != u_g.shape:
        raise ShapeError(f"embedding shapes differ: {u_q.shape} vs {u_g.shape}")
    m = np.swapaxes(u_g.data, -1, -2) @ u_q.data
    a, _, bt = jacobi_svd(m)
    q = a @ bt
    resid = u_q - T.matmul(u_g, Tensor(q))
    return q, T.tsum(resid * resid, axis=(-2, -1))


def struct_loss(a_hat_q, a_hat_g, r: int = 4, return_details: bool = False):
    """Mean Procrustes loss over pairs; degenerate pairs contribute zero."""
    emb_q = spectral_embed(normalized_laplacian(concept_graph(a_hat_q)), r)
    emb_g = spectral_embed(normalized_laplacian(concept_graph(a_hat_g)), r)
    _, per_pair = procrustes_align(emb_q.U, emb_g.U)
    valid = ~(np.asarray(emb_q.degenerate) | np.asarray(emb_g.degenerate))
    loss = T.mean(per_pair * valid.astype(np.float64))
    if return_details:
        return loss, {"degenerate": ~valid, "per_pair": per_pair.data.copy(),
                      "emb_q": emb_q, "emb_g": emb_g}
    return loss
