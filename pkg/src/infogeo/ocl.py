"""Slot attention: encoder, iterative aggregator, mixture decoder, reconstruction loss.

Tensors use a token layout internally: feature maps are ``(B, N, C)`` with
``N = H' * W'`` and attention maps are ``(B, K, N)``.  :func:`to_tokens` and
:func:`to_map` convert from/to the ``C x H' x W'`` layout.
"""

from __future__ import annotations

import numpy as np

from .diffcore import GRUCell, LayerNorm, Linear, MLP, Module, Tensor, as_tensor, param
from .diffcore import ops as T
from .errors import ConfigError, NumericError, ShapeError


def to_tokens(z) -> Tensor:
    """(..., C, H, W) -> (..., H*W, C)."""
    z = as_tensor(z)
    c, h, w = z.shape[-3:]
    return T.swapaxes(T.reshape(z, z.shape[:-3] + (c, h * w)), -1, -2)


def to_map(tokens, side: int) -> Tensor:
    """(..., N, C) -> (..., C, side, side)."""
    tokens = as_tensor(tokens)
    x = T.swapaxes(tokens, -1, -2)
    return T.reshape(x, x.shape[:-1] + (side, side))


class SlotEncoder(Module):
    """phi_e: per-token two-layer MLP from feature channels to slot width."""

    def __init__(self, channels: int, slot_dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(channels)
        self.mlp = MLP(channels, slot_dim, slot_dim, rng)

    def __call__(self, tokens) -> Tensor:
        return self.mlp(self.norm(tokens))


class SlotAggregator(Module):
    """phi_a: competitive attention over slots followed by a GRU + MLP update."""

    def __init__(self, n_slots: int, slot_dim: int, rng: np.random.Generator,
                 mode: str = "mean", eps: float = 1e-8):
        if mode not in ("mean", "sum"):
            raise ConfigError(f"aggregate_mode must be 'mean' or 'sum', got {mode!r}")
        self.n_slots, self.slot_dim, self.mode, self.eps = n_slots, slot_dim, mode, eps
        self.slot_mu = param(rng.normal(0.0, 1.0, size=(n_slots, slot_dim)))
        self.slot_log_sigma = param(np.full((n_slots, slot_dim), np.log(0.5)))
        self.norm_inputs = LayerNorm(slot_dim)
        self.norm_slots = LayerNorm(slot_dim)
        self.norm_ff = LayerNorm(slot_dim)
        self.to_q = Linear(slot_dim, slot_dim, rng, bias=False)
        self.to_k = Linear(slot_dim, slot_dim, rng, bias=False)
        self.to_v = Linear(slot_dim, slot_dim, rng, bias=False)
        self.gru = GRUCell(slot_dim, slot_dim, rng)
        self.ff = MLP(slot_dim, 2 * slot_dim, slot_dim, rng)
        self.calls = 0

    def initial_slots(self, batch: int, rng: np.random.Generator | None = None) -> Tensor:
        """Mean slots when ``rng`` is None, otherwise a reparameterized sample."""
        mu = T.broadcast_to(self.slot_mu, (batch, self.n_slots, self.slot_dim))
        if rng is None:
            return mu
        noise = rng.standard_normal((batch, self.n_slots, self.slot_dim))
        return mu + T.exp(self.slot_log_sigma) * noise

    def __call__(self, tokens, iters: int, slots=None, rng=None) -> tuple[Tensor, Tensor]:
        if iters < 1:
            raise ConfigError("slot attention needs at least one iteration")
        tokens = as_tensor(tokens)
        self.calls += 1
        if slots is None:
            slots = self.initial_slots(tokens.shape[0], rng)
        x = self.norm_inputs(tokens)
        k = self.to_k(x)
        v = self.to_v(x)
        scale = self.slot_dim ** -0.5
        attn = None
        for it in range(1, iters + 1):
            prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = T.matmul(q, T.swapaxes(k, -1, -2)) * scale      # (B, K, N)
            attn = T.softmax(logits, axis=-2)                            # compete over slots
            if self.mode == "mean":
                weights = attn / (T.tsum(attn, axis=-1, keepdims=True) + self.eps)
            else:
                weights = attn
            updates = T.matmul(weights, v)
            slots = self.gru(updates, prev)
            slots = slots + self.ff(self.norm_ff(slots))
            if not np.all(np.isfinite(slots.data)):
                raise NumericError(f"non-finite slots at slot-attention iteration {it}")
        return slots, attn


class MixtureDecoder(Module):
    """phi_d: per-slot features composed through a softmax over slots at every cell.

    ``mask_source="clue"`` (default): each slot decodes one feature vector, a
    shared learned positional term is added per cell, and the mask logits are
    scaled dot products between the slot and the clue token at that cell.
    ``mask_source="position"``: the slot is broadcast over a learned positional
    grid and an MLP emits the per-cell feature and mask logit; clues are unused.
    """

    def __init__(self, slot_dim: int, channels: int, n_tokens: int, hidden: int,
                 rng: np.random.Generator, mask_source: str = "clue"):
        if mask_source not in ("clue", "position"):
            raise ConfigError(f"mask_source must be 'clue' or 'position', got {mask_source!r}")
        self.channels, self.slot_dim, self.mask_source = channels, slot_dim, mask_source
        if mask_source == "clue":
            self.feat = MLP(slot_dim, hidden, channels, rng)
            self.pos_feat = param(np.zeros((n_tokens, channels)))
            self.norm_slots = LayerNorm(slot_dim)
            self.norm_clues = LayerNorm(channels)
            self.to_query = Linear(slot_dim, slot_dim, rng, bias=False)
            self.to_key = Linear(channels, slot_dim, rng, bias=False)
        else:
            self.pos = param(rng.normal(0.0, 0.02, size=(n_tokens, slot_dim)))
            self.mlp = MLP(slot_dim, hidden, channels + 1, rng)

    def __call__(self, slots, clues=None) -> tuple[Tensor, Tensor, Tensor]:
        slots = as_tensor(slots)
        b, k, d = slots.shape
        if self.mask_source == "clue":
            if clues is None:
                raise ShapeError("clue-conditioned decoding needs the clue tokens")
            q = self.to_query(self.norm_slots(slots))                      # (B, K, D)
            key = self.to_key(self.norm_clues(as_tensor(clues)))           # (B, N, D)
            logits = T.matmul(q, T.swapaxes(key, -1, -2)) * d ** -0.5      # (B, K, N)
            feats = T.reshape(self.feat(slots), (b, k, 1, self.channels)) + self.pos_feat
        else:
            x = T.reshape(slots, (b, k, 1, d)) + self.pos                  # (B, K, N, D)
            out = self.mlp(x)
            feats = out[..., : self.channels]                              # (B, K, N, C)
            logits = T.reshape(out[..., self.channels:], (b, k, -1))
        masks = T.softmax(logits, axis=1)
        recon = T.tsum(feats * T.reshape(masks, masks.shape + (1,)), axis=1)
        return recon, masks, feats


def slot_encode(z, encoder: SlotEncoder) -> Tensor:
    """C x H' x W' feature map(s) -> N x C_slot tokens."""
    z = as_tensor(z)
    if z.ndim < 3:
        raise ShapeError("feature map must be at least C x H' x W'")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("non-finite feature map")
    return encoder(to_tokens(z))


def slot_aggregate(tokens, aggregator: SlotAggregator, iters: int, slots=None, rng=None,
                   side: int | None = None) -> tuple[Tensor, Tensor]:
    """Return final slots and the last-iteration aggregation map (K x H' x W' if ``side``)."""
    tokens = as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
        if slots is not None:
            slots = T.reshape(as_tensor(slots), (1,) + as_tensor(slots).shape)
    s, a = aggregator(tokens, iters, slots=slots, rng=rng)
    if side is not None:
        a = T.reshape(a, a.shape[:-1] + (side, side))
    if squeeze:
        s, a = s[0], a[0]
    return s, a


def slot_decode(slots, decoder: MixtureDecoder, clues=None, side: int | None = None
                ) -> tuple[Tensor, Tensor]:
    """Decode slots to a reconstruction and decoding attention ``A_d``.

    ``clues`` are the feature tokens ``(N, C)`` or a ``C x H' x W'`` map; the
    position-only decoder ignores them.
    """
    slots = as_tensor(slots)
    if not np.all(np.isfinite(slots.data)):
        raise NumericError("non-finite slots")
    squeeze = slots.ndim == 2
    if squeeze:
        slots = T.reshape(slots, (1,) + slots.shape)
    if clues is not None:
        clues = as_tensor(clues)
        if side is not None and clues.ndim >= 3 and clues.shape[-1] == side and clues.shape[-2] == side:
            clues = to_tokens(clues)
        if clues.ndim == 2:
            clues = T.reshape(clues, (1,) + clues.shape)
    recon, masks, _ = decoder(slots, clues)
    if side is not None:
        recon = to_map(recon, side)
        masks = T.reshape(masks, masks.shape[:-1] + (side, side))
    if squeeze:
        recon, masks = recon[0], masks[0]
    return recon, masks


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"MSE shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return T.mean(d * d)


def rec_loss(recon_q, z_q, recon_g, z_g) -> Tensor:
    """Sum over the two views of the mean squared reconstruction error."""
    return mse(recon_q, z_q) + mse(recon_g, z_g)
