"""Cyclic Jacobi eigensolver and one-sided Jacobi SVD for small dense matrices.

Both solvers work on stacks of matrices (``(..., n, n)``): every (p, q)
rotation is applied to the whole batch at once, with a per-matrix mask so
converged members are left untouched.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor, _result, as_tensor

SYM_TOL = 1e-8
EIG_GAP_CLAMP = 1e-4
_MAX_SWEEPS = 100


def _check_square(a: np.ndarray) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"expected square matrices, got shape {a.shape}")


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(vecs), axis=-2)[..., None, :]
    pivots = np.take_along_axis(vecs, idx, axis=-2)
    return vecs * np.where(pivots < 0, -1.0, 1.0)


def jacobi_eigh(m: np.ndarray, max_sweeps: int = _MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of symmetric matrices.

    Returns ascending eigenvalues ``w`` (``(..., n)``) and column eigenvectors
    ``v`` (``(..., n, n)``), sign-normalized by :func:`_fix_signs`.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_square(m)
    batch = m.shape[:-2]
    n = m.shape[-1]
    a = m.reshape(-1, n, n)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite entries in eigensolver input")
    scale = np.sqrt((a * a).sum(axis=(-1, -2)))
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (a[:, iu[0], iu[1]] ** 2).sum(axis=-1))
        if np.all(off <= 1e-15 * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                big = np.abs(theta) > 1e150
                th = np.where(big, 0.0, theta)
                t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                             np.where(th >= 0, 1.0, -1.0) / (np.abs(th) + np.sqrt(th * th + 1.0)))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                cp, cq = a[:, :, p].copy(), a[:, :, q].copy()
                a[:, :, p] = c * cp - s * cq
                a[:, :, q] = s * cp + c * cq
                rp, rq = a[:, p, :].copy(), a[:, q, :].copy()
                a[:, p, :] = c * rp - s * rq
                a[:, q, :] = s * rp + c * rq
                a[active, p, q] = 0.0
                a[active, q, p] = 0.0
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p] = c * vp - s * vq
                v[:, :, q] = s * vp + c * vq
    else:
        raise NumericError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    w = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    v = _fix_signs(v)
    return w.reshape(batch + (n,)), v.reshape(batch + (n, n))


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` where ``keep`` is False by an orthonormal completion."""
    n = u.shape[0]
    u = u.copy()
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    for j in range(u.shape[1]):
        if keep[j]:
            continue
        best, best_norm = None, -1.0
        for e in np.eye(n):
            r = e.copy()
            for b in basis:
                r -= (b @ r) * b
            for b in basis:  # second pass for stability
                r -= (b @ r) * b
            nr = np.linalg.norm(r)
            if nr > best_norm:
                best, best_norm = r, nr
        u[:, j] = best / best_norm
        basis.append(u[:, j])
    return u


def jacobi_svd(m: np.ndarray, max_sweeps: int = _MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi SVD of square matrices.

    Returns ``U, S, Vt`` with ``S`` non-negative and descending.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_square(m)
    batch = m.shape[:-2]
    n = m.shape[-1]
    u = m.reshape(-1, n, n).copy()
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite entries in SVD input")
    v = np.broadcast_to(np.eye(n), u.shape).copy()
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = u[:, :, p], u[:, :, q]
                alpha = (up * up).sum(-1)
                beta = (uq * uq).sum(-1)
                gamma = (up * uq).sum(-1)
                active = np.abs(gamma) > 1e-15 * np.sqrt(alpha * beta)
                active &= np.abs(gamma) > 1e-300
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                big = np.abs(zeta) > 1e150
                z = np.where(big, 0.0, zeta)
                t = np.where(big, 0.5 / np.where(big, zeta, 1.0),
                             np.where(z >= 0, 1.0, -1.0) / (np.abs(z) + np.sqrt(1.0 + z * z)))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                up, uq = up.copy(), uq.copy()
                u[:, :, p] = c * up - s * uq
                u[:, :, q] = s * up + c * uq
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p] = c * vp - s * vq
                v[:, :, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sig = np.sqrt((u * u).sum(axis=-2))
    order = np.argsort(-sig, axis=-1, kind="stable")
    sig = np.take_along_axis(sig, order, axis=-1)
    u = np.take_along_axis(u, order[:, None, :], axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    out_u = np.empty_like(u)
    for b in range(u.shape[0]):
        smax = sig[b, 0] if n else 0.0
        keep = sig[b] > max(1e-12 * smax, 1e-300)
        ub = u[b] / np.where(keep, sig[b], 1.0)
        out_u[b] = ub if keep.all() else _complete_basis(ub, keep)
    return (out_u.reshape(batch + (n, n)), sig.reshape(batch + (n,)),
            np.swapaxes(v, -1, -2).reshape(batch + (n, n)))


def _clamped_inverse_gaps(w: np.ndarray, squared: bool = False) -> np.ndarray:
    """F[i, j] = 1 / (w_j - w_i) off the diagonal, |denominator| >= EIG_GAP_CLAMP."""
    ww = w * w if squared else w
    d = ww[..., None, :] - ww[..., :, None]
    sign = np.where(d >= 0, 1.0, -1.0)
    d = sign * np.maximum(np.abs(d), EIG_GAP_CLAMP)
    f = 1.0 / d
    n = w.shape[-1]
    f[..., np.arange(n), np.arange(n)] = 0.0
    return f


def sym_eig(m) -> tuple[Tensor, Tensor]:
    """Differentiable symmetric eigen-decomposition (ascending, sign-fixed).

    The input is symmetrized as (M + M^T)/2 first; asymmetry beyond
    ``SYM_TOL`` is rejected.
    """
    m = as_tensor(m)
    _check_square(m.data)
    asym = np.abs(m.data - np.swapaxes(m.data, -1, -2)).max() if m.size else 0.0
    if asym > SYM_TOL * max(1.0, np.abs(m.data).max()):
        raise ShapeError(f"sym_eig input not symmetric (max asymmetry {asym:.3g})")
    w, v = jacobi_eigh(m.data)
    def accumulate(gw, gv):
        vt = np.swapaxes(v, -1, -2)
        inner = np.zeros(v.shape)
        if gw is not None:
            n = w.shape[-1]
            inner[..., np.arange(n), np.arange(n)] += gw
        if gv is not None:
            inner += _clamped_inverse_gaps(w) * (vt @ gv)
        ga = v @ inner @ vt
        return 0.5 * (ga + np.swapaxes(ga, -1, -2))

    # eigenvalues and eigenvectors come out as two graph nodes; gradients
    # arriving at either are folded into one adjoint at the input.
    def bw_w(g):
        return (accumulate(g, None),)

    def bw_v(g):
        return (accumulate(None, g),)

    w_t = _result(w, (m,), bw_w, "sym_eig.values")
    v_t = _result(v, (m,), bw_v, "sym_eig.vectors")
    return w_t, v_t


def svd_small(m) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable SVD of square matrices up to 16x16 (full rank for backward)."""
    m = as_tensor(m)
    _check_square(m.data)
    if m.shape[-1] > 16:
        raise ShapeError("svd_small supports at most 16x16 matrices")
    u, s, vt = jacobi_svd(m.data)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    n = s.shape[-1]
    eye = np.eye(n)

    def core(inner):
        return u @ inner @ vt

    def bw_u(g):
        f = _clamped_inverse_gaps(s, squared=True)
        j = ut @ g
        inner = (f * (j - np.swapaxes(j, -1, -2))) * s[..., None, :]
        # square full-rank case: no extra projector term
        return (core(inner),)

    def bw_s(g):
        return (core(eye * g[..., None, :]),)

    def bw_vt(g):
        gv = np.swapaxes(g, -1, -2)
        f = _clamped_inverse_gaps(s, squared=True)
        k = np.swapaxes(v, -1, -2) @ gv
        inner = s[..., :, None] * (f * (k - np.swapaxes(k, -1, -2)))
        return (core(inner),)

    return (_result(u, (m,), bw_u, "svd.U"), _result(s, (m,), bw_s, "svd.S"),
            _result(vt, (m,), bw_vt, "svd.Vt"))
