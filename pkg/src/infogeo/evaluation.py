"""Retrieval, metrics and the evaluation driver for both inference paths."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cacs
from .diffcore import no_grad
from .errors import ConfigError, InputError
from .model import InfoGeoModel
from .synthgen import CELL_METERS, Dataset

log = logging.getLogger(__name__)

MODES = ("vanilla", "augmented")
REPORT_KEYS = ("r_at_1", "r_at_5", "r_at_10", "ap", "sdm_at_3", "dis_at_1_m", "mode",
               "fingerprint", "seed")


@dataclass
class RetrievalIndex:
    descriptors: np.ndarray     # (N_g, D), unit rows
    ids: np.ndarray             # (N_g,)
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.ids = np.asarray(self.ids)
        if len(self.descriptors) == 0:
            raise InputError("empty retrieval index")
        if len(np.unique(self.ids)) != len(self.ids) or len(self.ids) != len(self.descriptors):
            raise InputError("gallery ids must be unique, one per descriptor")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InputError("gallery descriptors must be L2-normalized")


def rank_scores(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Order each row by descending score, ties by ascending id; returns ids."""
    scores = np.atleast_2d(scores)
    ids = np.asarray(ids)
    out = np.empty(scores.shape, dtype=ids.dtype)
    for i, row in enumerate(scores):
        out[i] = ids[np.lexsort((ids, -row))]
    return out


def retrieve(query: np.ndarray, index: RetrievalIndex, k: int) -> tuple[np.ndarray, np.ndarray]:
    if len(index.ids) == 0:
        raise InputError("empty retrieval index")
    if not 1 <= k <= len(index.ids):
        raise InputError(f"k={k} must lie in [1, {len(index.ids)}]")
    sims = index.descriptors @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((index.ids, -sims))[:k]
    return index.ids[order], sims[order]


def _truth_ranks(rankings: np.ndarray, truths: np.ndarray) -> np.ndarray:
    rankings = np.atleast_2d(rankings)
    truths = np.asarray(truths)
    hit = rankings == truths[:, None]
    if not np.all(hit.any(axis=1)):
        missing = truths[~hit.any(axis=1)]
        raise InputError(f"truth ids absent from the gallery: {missing[:5].tolist()}")
    return hit.argmax(axis=1) + 1


def recall_at_k(rankings, truths, k: int) -> float:
    return float(np.mean(_truth_ranks(rankings, truths) <= k))


def average_precision(rankings, truths) -> float:
    """Single-positive AP: the mean reciprocal rank of the true item."""
    return float(np.mean(1.0 / _truth_ranks(rankings, truths)))


def _distances(rankings, truths, coords: dict | np.ndarray, k: int) -> np.ndarray:
    rankings = np.atleast_2d(rankings)[:, :k]
    truths = np.asarray(truths)
    try:
        got = np.array([[coords[int(i)] for i in row] for row in rankings], dtype=np.float64)
        ref = np.array([coords[int(t)] for t in truths], dtype=np.float64)
    except (KeyError, IndexError) as exc:
        raise InputError(f"missing coordinates for id {exc}") from exc
    return np.linalg.norm(got - ref[:, None, :], axis=-1)


def sdm_at_k(rankings, truths, coords, k: int = 3, sigma: float = CELL_METERS) -> float:
    """Rank-weighted exp(-d/sigma) score with weights proportional to K-i+1."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    d = _distances(rankings, truths, coords, k)
    w = np.arange(k, 0, -1, dtype=np.float64)
    w /= w.sum()
    return float(np.mean(np.exp(-d / sigma) @ w))


def dis_at_1(rankings, truths, coords) -> float:
    return float(np.mean(_distances(rankings, truths, coords, 1)[:, 0]))


@dataclass
class MetricsReport:
    r_at_1: float
    r_at_5: float
    r_at_10: float
    ap: float
    sdm_at_3: float
    dis_at_1_m: float
    mode: str
    fingerprint: str
    seed: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n").encode("utf-8")

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_json())
        return path


def metrics_from_scores(scores: np.ndarray, query_ids, gallery_ids, coords, mode: str,
                        fingerprint: str, seed: int, sigma: float = CELL_METERS) -> MetricsReport:
    ranks = rank_scores(scores, np.asarray(gallery_ids))
    truths = np.asarray(query_ids)
    n = len(gallery_ids)
    return MetricsReport(
        r_at_1=recall_at_k(ranks, truths, 1),
        r_at_5=recall_at_k(ranks, truths, min(5, n)),
        r_at_10=recall_at_k(ranks, truths, min(10, n)),
        ap=average_precision(ranks, truths),
        sdm_at_3=sdm_at_k(ranks, truths, coords, min(3, n), sigma),
        dis_at_1_m=dis_at_1(ranks, truths, coords),
        mode=mode, fingerprint=fingerprint, seed=int(seed))


def score_matrix(model: InfoGeoModel, dataset: Dataset, mode: str, split: str = "test"
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Query-by-gallery similarities over one split and the ids they refer to."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    ids = dataset.split(split)
    tok_q = model.features(dataset.raw_q[ids])
    tok_g = model.features(dataset.raw_g[ids])
    if mode == "vanilla":
        index = RetrievalIndex(model.vanilla_descriptors(tok_g), ids)
        return model.vanilla_descriptors(tok_q) @ index.descriptors.T, ids
    return model.pair_scores(tok_q, tok_g), ids


def evaluate(model: InfoGeoModel, dataset: Dataset, mode: str, split: str = "test",
             seed: int | None = None) -> MetricsReport:
    cfg = model.config
    if mode == "vanilla" and cfg.ocva and not cfg.rd:
        log.warning("vanilla-mode evaluation of a model trained without relational distillation")
    if mode == "augmented" and not cfg.ocva:
        log.warning("augmented-mode evaluation of a model trained without the object branch")
    scores, ids = score_matrix(model, dataset, mode, split)
    coords = {int(i): dataset.coords[i] for i in range(len(dataset.coords))}
    return metrics_from_scores(scores, ids, ids, coords, mode, cfg.fingerprint(),
                               cfg.seed if seed is None else seed)


def routing_ambiguity(model: InfoGeoModel, dataset: Dataset, split: str = "test") -> float:
    """Mean w(1 - w) of the concept router over the positive pairs of a split."""
    ids = dataset.split(split)
    tok_q = model.features(dataset.raw_q[ids])
    tok_g = model.features(dataset.raw_g[ids])
    with no_grad():
        o_q, o_g = model.objects(tok_q), model.objects(tok_g)
        out = model.augment(tok_q, o_q.attn_dec, tok_g, o_g.attn_dec)
    return 0.5 * (cacs.ambiguity(out.w_q.data) + cacs.ambiguity(out.w_g.data))
