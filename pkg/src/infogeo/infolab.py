"""Exact and estimated mutual information.

Discrete tables give exact values; the KSG k-nearest-neighbour estimator
handles continuous features.  Everything is in nats.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .diffcore import Tensor, no_grad
from .errors import ConfigError, InputError

MAX_ALPHABET = 64
TABLE_TOL = 1e-12


# -- exact quantities ------------------------------------------------------
def validate_joint(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (2, 3):
        raise InputError(f"joint table must have 2 or 3 axes, got {p.ndim}")
    if max(p.shape) > MAX_ALPHABET:
        raise InputError(f"alphabet sizes must be <= {MAX_ALPHABET}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError("joint table has negative or non-finite entries")
    if abs(p.sum() - 1.0) > TABLE_TOL:
        raise InputError(f"joint table sums to {p.sum()!r}, not 1")
    return p


def _plogp_ratio(p: np.ndarray, denom: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / denom[mask])))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def exact_mi(joint, variables: tuple[int, int] = (0, 1)) -> float:
    """I(X_a; X_b) from a joint table, marginalising any remaining axis."""
    p = validate_joint(joint)
    a, b = variables
    if a == b or not (0 <= a < p.ndim and 0 <= b < p.ndim):
        raise InputError(f"invalid variable pair {variables}")
    other = tuple(ax for ax in range(p.ndim) if ax not in (a, b))
    pab = p.sum(axis=other) if other else p
    if a > b:
        pab = pab.T
    px = pab.sum(axis=1, keepdims=True)
    py = pab.sum(axis=0, keepdims=True)
    return _plogp_ratio(pab, px * py)


def exact_cond_mi(joint, condition: int = 2) -> float:
    """I(X; Y | Z) for a three-axis table, Z being axis ``condition``."""
    p = validate_joint(joint)
    if p.ndim != 3:
        raise InputError("conditional MI needs a three-axis table")
    p = np.moveaxis(p, condition, 2)
    pz = p.sum(axis=(0, 1), keepdims=True)
    pxz = p.sum(axis=1, keepdims=True)
    pyz = p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = pxz * pyz / pz
    return max(0.0, _plogp_ratio(p, np.broadcast_to(denom, p.shape)))


# -- Markov chains ---------------------------------------------------------
@dataclass
class ChainSpec:
    head: np.ndarray
    transitions: list[np.ndarray]

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=np.float64)
        self.transitions = [np.asarray(t, dtype=np.float64) for t in self.transitions]
        if np.any(self.head < 0) or abs(self.head.sum() - 1.0) > TABLE_TOL:
            raise InputError("head marginal is not a distribution")
        prev = len(self.head)
        for i, t in enumerate(self.transitions):
            if t.ndim != 2 or t.shape[0] != prev:
                raise InputError(f"transition {i} has shape {t.shape}, expected ({prev}, *)")
            if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > TABLE_TOL:
                raise InputError(f"transition {i} is not row-stochastic")
            prev = t.shape[1]

    def joint_with(self, depth: int) -> np.ndarray:
        """Joint table of (head, variable after ``depth`` transitions)."""
        m = np.eye(len(self.head))
        for t in self.transitions[:depth]:
            m = m @ t
        return self.head[:, None] * m


@dataclass
class DpiReport:
    mi_head_mid: float
    mi_head_tail: float
    holds: bool
    slack: float
    mi_by_depth: list[float] = field(default_factory=list)


def dpi_check(chain: ChainSpec, tol: float = 1e-12) -> DpiReport:
    if len(chain.transitions) < 2:
        raise InputError("a chain needs at least two transitions")
    mis = [exact_mi(_renormalise(chain.joint_with(d))) for d in range(1, len(chain.transitions) + 1)]
    slack = mis[0] - mis[-1]
    holds = all(mis[i + 1] <= mis[i] + tol for i in range(len(mis) - 1))
    return DpiReport(mis[0], mis[-1], holds, slack, mis)


def _renormalise(p: np.ndarray) -> np.ndarray:
    # chain products drift from 1 by rounding; keep validate_joint's tolerance meaningful
    return p / p.sum()


def binary_symmetric(flip: float) -> np.ndarray:
    return np.array([[1.0 - flip, flip], [flip, 1.0 - flip]])


def random_chain(rng: np.random.Generator, states: int = 4, transitions: int = 2) -> ChainSpec:
    head = rng.dirichlet(np.ones(states))
    mats = [rng.dirichlet(np.ones(states), size=states) for _ in range(transitions)]
    return ChainSpec(head, mats)


# -- KSG estimator ---------------------------------------------------------
def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _ksg(x: np.ndarray, y: np.ndarray, k: int) -> float:
    n = len(x)
    joint = np.hstack([x, y])
    # k+1 because each point is its own nearest neighbour
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = np.nextafter(dist[:, -1], 0.0)
    nx = cKDTree(x).query_ball_point(x, eps, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, eps, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def knn_mi(x, y, k: int = 3, labels=None) -> float:
    """KSG estimate of I(X;Y), or of I(X;Y|L) by label-stratified averaging."""
    x, y = _as_samples(x), _as_samples(y)
    if len(x) != len(y):
        raise InputError("x and y need the same number of samples")
    if k < 1:
        raise ConfigError("k must be positive")
    if labels is None:
        if len(x) < k + 1:
            raise InputError(f"need at least k+1={k + 1} samples, got {len(x)}")
        return _ksg(x, y, k)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise InputError("labels must align with the samples")
    total = 0.0
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if len(idx) < k + 1:
            raise InputError(f"stratum {lab!r} has {len(idx)} samples, need at least {k + 1}")
        total += len(idx) / len(x) * _ksg(x[idx], y[idx], k)
    return total


def gaussian_mi(rho: float) -> float:
    return -0.5 * np.log1p(-rho * rho)


# -- InfoNCE bound ---------------------------------------------------------
@dataclass
class NceBoundReport:
    rho: float
    batch_size: int
    n_batches: int
    critic: str
    bound: float
    exact_mi: float
    log_n: float
    tolerance: float
    passed: bool


def _critic_scores(x: np.ndarray, y: np.ndarray, rho: float, critic: str, tau: float) -> np.ndarray:
    if critic == "bilinear":
        return np.outer(x, y) / tau
    if critic == "optimal":
        # log p(y|x) - log p(y) for a unit bivariate Gaussian
        var = 1.0 - rho * rho
        return (-(y[None, :] - rho * x[:, None]) ** 2 / (2 * var) - 0.5 * np.log(var)
                + 0.5 * y[None, :] ** 2)
    raise ConfigError(f"unknown critic {critic!r}")


def nce_bound_check(rho: float, batch_size: int = 32, n_batches: int = 200, tau: float = 1.0,
                    critic: str = "optimal", seed: int = 0, tolerance: float = 0.05
                    ) -> NceBoundReport:
    """Average log N - InfoNCE over batches and compare with the exact Gaussian MI."""
    from .trainer import info_nce_from_similarity

    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    if not -1.0 < rho < 1.0:
        raise ConfigError("rho must lie in (-1, 1)")
    rng = np.random.default_rng(seed)
    cov = np.array([[1.0, rho], [rho, 1.0]])
    log_n = float(np.log(batch_size))
    bounds = []
    with no_grad():
        for _ in range(n_batches):
            xy = rng.multivariate_normal(np.zeros(2), cov, size=batch_size)
            scores = _critic_scores(xy[:, 0], xy[:, 1], rho, critic, tau)
            loss = info_nce_from_similarity(Tensor(scores), 1.0, symmetric=False)
            bounds.append(log_n - float(loss.data))
    bound = float(np.mean(bounds))
    mi = float(gaussian_mi(rho))
    passed = bound <= mi + tolerance and bound <= log_n
    return NceBoundReport(rho, batch_size, n_batches, critic, bound, mi, log_n, tolerance, passed)


# -- probe on a trained model ----------------------------------------------
@dataclass
class MiReport:
    mi_z: float              # I(Z_q; Z_g)
    cmi_z: float             # I(Z_q; Z_g | Y)
    mi_zhat: float           # I(Zhat_q; Zhat_g)
    cmi_zhat: float          # I(Zhat_q; Zhat_g | Y)
    estimator: str
    samples: int
    dims: int
    variants: int

    def to_json(self) -> bytes:
        return (json.dumps(asdict(self), sort_keys=True, indent=1) + "\n").encode("utf-8")


def probe_features(model, dataset, split: str = "train", variants: int = 8,
                   distractor_rate: float = 0.4, occlusion_rate: float = 0.2
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pooled frozen and fused features of re-rendered nuisance variants per location."""
    from dataclasses import replace

    from .synthgen import render_pair

    ids = dataset.split(split)
    man = dataset.manifest
    spec = replace(man.spec, distractor_rate=max(man.spec.distractor_rate, distractor_rate),
                   occlusion_rate=max(man.spec.occlusion_rate, occlusion_rate))
    raw_q, raw_g, labels = [], [], []
    for loc in ids:
        for v in range(variants):
            pair = render_pair(spec, man.seed, int(loc), man.n_locations, variant=v)
            raw_q.append(pair.raw_q)
            raw_g.append(pair.raw_g)
            labels.append(int(loc))
    tok_q = model.features(np.stack(raw_q))
    tok_g = model.features(np.stack(raw_g))
    with no_grad():
        obj_q, obj_g = model.objects(tok_q), model.objects(tok_g)
        aug = model.augment(tok_q, obj_q.attn_dec.data, tok_g, obj_g.attn_dec.data)
    return (tok_q.mean(axis=1), tok_g.mean(axis=1), aug.z_hat_q.data.mean(axis=1),
            aug.z_hat_g.data.mean(axis=1), np.asarray(labels))


def mi_probe(model, dataset, split: str = "train", variants: int = 8, dims: int = 8, k: int = 3,
             seed: int = 0) -> MiReport:
    zq, zg, hq, hg, labels = probe_features(model, dataset, split, variants)
    proj = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(dims), size=(zq.shape[1], dims))

    def red(a):
        return a @ proj

    return MiReport(
        mi_z=knn_mi(red(zq), red(zg), k), cmi_z=knn_mi(red(zq), red(zg), k, labels),
        mi_zhat=knn_mi(red(hq), red(hg), k), cmi_zhat=knn_mi(red(hq), red(hg), k, labels),
        estimator=f"ksg1-maxnorm-k{k}", samples=len(labels), dims=dims, variants=variants)


def dpi_table(reports: Sequence[DpiReport]) -> str:
    lines = ["chain,mi_head_mid,mi_head_tail,slack,holds"]
    for i, r in enumerate(reports):
        lines.append(f"{i},{r.mi_head_mid:.12g},{r.mi_head_tail:.12g},{r.slack:.6g},{int(r.holds)}")
    return "\n".join(lines) + "\n"
