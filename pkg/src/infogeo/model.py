"""The full model: frozen featurizer, object branch, concept selection and descriptor head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cacs, csrr, ocl, ocva
from .config import TrainConfig
from .diffcore import Module, Tensor, as_tensor, no_grad
from .synthgen import Featurizer


@dataclass
class ObjectOutputs:
    slots: Tensor
    attn_agg: Tensor      # A_a (B, K, N)
    recon: Tensor         # (B, N, C)
    attn_dec: Tensor      # A_d (B, K, N)


@dataclass
class AugmentedOutputs:
    f_q: Tensor           # (P, D)
    f_g: Tensor
    w_q: Tensor           # (P, K, 1)
    w_g: Tensor
    a_hat_q: Tensor       # (P, K, N)
    a_hat_g: Tensor
    z_hat_q: Tensor       # fused maps (P, N, C)
    z_hat_g: Tensor


class InfoGeoModel(Module):
    """All trainable parts; the featurizer is a fixed numpy transform outside the graph."""

    def __init__(self, config: TrainConfig, rng: np.random.Generator | None = None):
        cfg = config
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.config = cfg
        self.featurizer = Featurizer(cfg.grid_size, cfg.patch, cfg.channels, cfg.featurizer_seed)
        n = cfg.n_tokens
        self.aggregator = ocva.Aggregator(cfg.channels, n, cfg.d_depth, cfg.n_rows, rng,
                                          depth=cfg.mix_depth)
        self.encoder = ocl.SlotEncoder(cfg.channels, cfg.slot_dim, rng)
        self.slots = ocl.SlotAggregator(cfg.n_slots, cfg.slot_dim, rng, mode=cfg.aggregate_mode)
        self.decoder = ocl.MixtureDecoder(cfg.slot_dim, cfg.channels, n, cfg.decoder_hidden, rng,
                                          mask_source=cfg.mask_source)
        self.fusion = cacs.CrossViewFusion(n, rng, heads=cfg.heads)
        self.router = cacs.ConceptRouter(n, rng)
        self.projector = ocva.AffinityProjector(cfg.channels, cfg.cond_dim, n, rng)
        self.film = ocva.FiLM(cfg.cond_dim, cfg.channels, rng)

    # -- features ---------------------------------------------------------
    def features(self, raw: np.ndarray) -> np.ndarray:
        """Raw grids (..., G, G, 3) -> frozen tokens (..., N, C)."""
        z = self.featurizer(raw)
        return np.swapaxes(z.reshape(z.shape[:-2] + (-1,)), -1, -2)

    # -- paths ------------------------------------------------------------
    def vanilla(self, tokens) -> Tensor:
        return self.aggregator(tokens)

    def objects(self, tokens, rng: np.random.Generator | None = None) -> ObjectOutputs:
        tokens = as_tensor(tokens)
        enc = self.encoder(tokens)
        s, a_a = self.slots(enc, self.config.iters, rng=rng)
        recon, a_d, _ = self.decoder(s, tokens)
        return ObjectOutputs(s, a_a, recon, a_d)

    def augment(self, z_q, a_q, z_g, a_g) -> AugmentedOutputs:
        """Pair-conditioned descriptors for aligned batches of (query, gallery) pairs."""
        z_q, z_g = as_tensor(z_q), as_tensor(z_g)
        fused_q, fused_g = cacs.cross_view_fuse(a_q, a_g, self.fusion)
        w_q, w_g = self.router(fused_q), self.router(fused_g)
        a_hat_q, a_hat_g = cacs.reweight(a_q, w_q), cacs.reweight(a_g, w_g)
        out = []
        for z, a_hat in ((z_q, a_hat_q), (z_g, a_hat_g)):
            v_h = ocva.affinity_vector(a_hat, z, self.projector)
            z_mod = ocva.film_modulate(z, v_h, self.film)
            z_fused = ocva.fuse(z_mod, z, self.config.alpha)
            out.append((self.aggregator(z_fused), z_fused))
        (f_q, zt_q), (f_g, zt_g) = out
        return AugmentedOutputs(f_q, f_g, w_q, w_g, a_hat_q, a_hat_g, zt_q, zt_g)

    def struct(self, a_hat_q, a_hat_g, return_details: bool = False):
        return csrr.struct_loss(a_hat_q, a_hat_g, self.config.r, return_details=return_details)

    # -- inference --------------------------------------------------------
    def pair_scores(self, tok_q: np.ndarray, tok_g: np.ndarray, chunk: int = 256
                    ) -> np.ndarray:
        """Augmented-mode similarity of every (query, gallery) pair, shape (Nq, Ng)."""
        with no_grad():
            obj_q = self.objects(tok_q)
            obj_g = self.objects(tok_g)
            nq, ng = len(tok_q), len(tok_g)
            qi, gi = np.divmod(np.arange(nq * ng), ng)
            scores = np.empty(nq * ng)
            for lo in range(0, nq * ng, chunk):
                sel = slice(lo, lo + chunk)
                aug = self.augment(tok_q[qi[sel]], obj_q.attn_dec.data[qi[sel]],
                                   tok_g[gi[sel]], obj_g.attn_dec.data[gi[sel]])
                scores[sel] = np.sum(aug.f_q.data * aug.f_g.data, axis=-1)
        return scores.reshape(nq, ng)

    def vanilla_descriptors(self, tokens: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.vanilla(tokens).data.copy()


def pair_index(batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (query i, gallery j) indices of all B*B pairs."""
    qi, gi = np.divmod(np.arange(batch * batch), batch)
    return qi, gi


def gather(t, idx: np.ndarray) -> Tensor:
    return as_tensor(t)[idx]


def diag_positions(batch: int) -> np.ndarray:
    return np.arange(batch) * (batch + 1)


__all__ = ["InfoGeoModel", "ObjectOutputs", "AugmentedOutputs", "pair_index", "gather",
           "diag_positions"]
