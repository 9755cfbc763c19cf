"""Objectives, optimizer, schedule, the training loop and the checkpoint format."""

from __future__ import annotations

import json
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import cacs, ocl, ocva
from .config import TrainConfig
from .diffcore import Tensor, as_tensor
from .diffcore import ops as T
from .errors import ConfigError, CorruptionError, FormatError, InputError, NumericError
from .model import InfoGeoModel, diag_positions, pair_index
from .synthgen import Dataset, render_pair

CKPT_MAGIC = b"IGEO"
CKPT_VERSION = 1
CONFIG_KEY = "__config__"
_DTYPE_F32, _DTYPE_U8 = 0, 1


# -- objectives ------------------------------------------------------------
def info_nce_from_similarity(sim, tau: float, symmetric: bool = True) -> Tensor:
    """Cross-entropy with the diagonal as positives; rows are queries, columns gallery."""
    sim = as_tensor(sim)
    b = sim.shape[0]
    if b < 2:
        raise ConfigError("InfoNCE needs a batch of at least two pairs")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    logits = sim * (1.0 / tau)
    diag = (np.arange(b), np.arange(b))
    q2g = -T.mean(T.log_softmax(logits, axis=1)[diag])
    if not symmetric:
        return q2g
    g2q = -T.mean(T.log_softmax(logits, axis=0)[diag])
    return 0.5 * (q2g + g2q)


def info_nce(f_q, f_g, tau: float = 0.1, symmetric: bool = True) -> Tensor:
    """Contrastive loss over a batch of L2-normalized descriptor pairs."""
    f_q, f_g = as_tensor(f_q), as_tensor(f_g)
    if f_q.shape != f_g.shape:
        raise ConfigError(f"descriptor batches differ: {f_q.shape} vs {f_g.shape}")
    return info_nce_from_similarity(T.matmul(f_q, T.swapaxes(f_g, -1, -2)), tau, symmetric)


@dataclass
class LossBreakdown:
    align: float = 0.0
    rec: float = 0.0
    cacs: float = 0.0
    struct: float = 0.0
    info: float = 0.0
    distill: float = 0.0
    total: float = 0.0
    info_weight: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


COMPONENTS = ("align", "rec", "cacs", "struct", "distill")


def total_loss(components: dict, config: TrainConfig, info_weight: float | None = None
               ) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective; a missing or disabled component contributes exactly 0.

    ``info_weight`` overrides lambda2 (used by the warm-up ramp).
    """
    lam2 = config.lambda2 if info_weight is None else info_weight
    enabled = {"align": True, "rec": config.ocva, "cacs": config.ocva and config.cacs,
               "struct": config.ocva and config.struct, "distill": config.ocva and config.rd}
    parts = {k: (as_tensor(components[k]) if enabled[k] and components.get(k) is not None
                 else None) for k in COMPONENTS}
    if parts["align"] is None:
        raise ConfigError("the alignment term is required")

    info = None
    for k in ("cacs", "struct"):
        if parts[k] is not None:
            info = parts[k] if info is None else info + parts[k]
    total = parts["align"]
    if parts["rec"] is not None and config.lambda1:
        total = total + config.lambda1 * parts["rec"]
    if info is not None and lam2:
        total = total + lam2 * info
    if parts["distill"] is not None and config.lambda3:
        total = total + config.lambda3 * parts["distill"]

    val = {k: (float(v.data) if v is not None else 0.0) for k, v in parts.items()}
    info_val = val["cacs"] + val["struct"]
    breakdown = LossBreakdown(align=val["align"], rec=val["rec"], cacs=val["cacs"],
                              struct=val["struct"], info=info_val, distill=val["distill"],
                              total=float(total.data), info_weight=float(lam2))
    return total, breakdown


def step_components(model: InfoGeoModel, tok_q: np.ndarray, tok_g: np.ndarray,
                    rng: np.random.Generator | None = None) -> tuple[dict, dict]:
    """Forward pass of one batch; returns loss tensors and diagnostics."""
    cfg = model.config
    comps: dict = {}
    diag: dict = {"degenerate": 0}
    if not cfg.ocva:
        comps["align"] = info_nce(model.vanilla(tok_q), model.vanilla(tok_g), cfg.tau,
                                  cfg.symmetric_nce)
        return comps, diag

    b = len(tok_q)
    obj_q, obj_g = model.objects(tok_q, rng), model.objects(tok_g, rng)
    comps["rec"] = ocl.rec_loss(obj_q.recon, tok_q, obj_g.recon, tok_g)
    if cfg.pairwise_align:
        qi, gi = pair_index(b)
        aug = model.augment(tok_q[qi], obj_q.attn_dec[qi], tok_g[gi], obj_g.attn_dec[gi])
        sim = T.reshape(T.tsum(aug.f_q * aug.f_g, axis=-1), (b, b))
        comps["align"] = info_nce_from_similarity(sim, cfg.tau, cfg.symmetric_nce)
        pos = diag_positions(b)
        f_q, f_g = aug.f_q[pos], aug.f_g[pos]
        w_q, w_g = aug.w_q[pos], aug.w_g[pos]
        a_q, a_g = aug.a_hat_q[pos], aug.a_hat_g[pos]
    else:
        aug = model.augment(tok_q, obj_q.attn_dec, tok_g, obj_g.attn_dec)
        f_q, f_g, w_q, w_g = aug.f_q, aug.f_g, aug.w_q, aug.w_g
        a_q, a_g = aug.a_hat_q, aug.a_hat_g
        comps["align"] = info_nce(f_q, f_g, cfg.tau, cfg.symmetric_nce)
    diag["ambiguity"] = cacs.ambiguity(T.reshape(w_q, (-1,)).data) * 0.5 + \
        cacs.ambiguity(T.reshape(w_g, (-1,)).data) * 0.5
    if cfg.cacs:
        comps["cacs"] = cacs.cacs_loss(w_q, w_g)
    if cfg.struct:
        comps["struct"], details = model.struct(a_q, a_g, return_details=True)
        diag["degenerate"] = int(np.sum(details["degenerate"]))
    if cfg.rd:
        comps["distill"] = ocva.distill_loss(model.vanilla(tok_q), f_q, model.vanilla(tok_g), f_g,
                                             form=cfg.rd_form)
    return comps, diag


# -- optimizer and schedule ------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd, self.betas, self.eps = weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(round(warmup_ratio * total_steps))


def learning_rate(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    w = warmup_steps(total_steps, warmup_ratio)
    if step < w:
        return base_lr * (step + 1) / w
    span = max(1, total_steps - w)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, (step - w) / span)))


def info_ramp(step: int, total_steps: int, lambda2: float, warmup_ratio: float) -> float:
    w = warmup_steps(total_steps, warmup_ratio)
    if w == 0:
        return lambda2
    return lambda2 * min(1.0, (step + 1) / w)


# -- checkpoints -----------------------------------------------------------
def _pack_tensor(name: str, arr: np.ndarray, dtype_code: int) -> bytes:
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", dtype_code, arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    fmt = "<f4" if dtype_code == _DTYPE_F32 else "u1"
    return head + np.ascontiguousarray(arr, dtype=fmt).tobytes()


def checkpoint_bytes(model: InfoGeoModel) -> bytes:
    state = model.state_dict()
    cfg = np.frombuffer(model.config.canonical_json().encode("utf-8"), dtype=np.uint8)
    body = [_pack_tensor(CONFIG_KEY, cfg, _DTYPE_U8)]
    body += [_pack_tensor(k, state[k], _DTYPE_F32) for k in sorted(state)]
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(body)) + b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(path: str | os.PathLike, model: InfoGeoModel) -> Path:
    """Write weights (f32) and config atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)
    return path


def parse_checkpoint(blob: bytes) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} not readable by version-{CKPT_VERSION} reader")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptionError("checkpoint checksum mismatch (truncated or corrupted)")
    off, end = 12, len(blob) - 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            name = blob[off + 2: off + 2 + n].decode("utf-8")
            off += 2 + n
            code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from("<" + "Q" * rank, blob, off)
            off += 8 * rank
            if code not in (_DTYPE_F32, _DTYPE_U8):
                raise FormatError(f"unknown dtype code {code} for {name}")
            width = 4 if code == _DTYPE_F32 else 1
            size = int(np.prod(dims, dtype=np.int64)) * width
            if off + size > end:
                raise CorruptionError(f"tensor {name} runs past the end of the file")
            dt = "<f4" if code == _DTYPE_F32 else "u1"
            tensors[name] = np.frombuffer(blob, dtype=dt, count=size // width, offset=off).reshape(dims).copy()
            off += size
    except struct.error as exc:
        raise CorruptionError(f"malformed checkpoint: {exc}") from exc
    if off != end:
        raise CorruptionError("trailing bytes after the last tensor")
    if CONFIG_KEY not in tensors:
        raise FormatError("checkpoint carries no configuration")
    cfg = TrainConfig.from_dict(json.loads(tensors.pop(CONFIG_KEY).tobytes().decode("utf-8")))
    return cfg, tensors


def load_checkpoint(path: str | os.PathLike) -> InfoGeoModel:
    blob = Path(path).read_bytes()
    cfg, tensors = parse_checkpoint(blob)
    model = InfoGeoModel(cfg)
    model.load_state_dict({k: v.astype(np.float64) for k, v in tensors.items()})
    return model


def round_to_storage(model: InfoGeoModel) -> None:
    """Quantize parameters to the f32 values a checkpoint would hold."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


# -- training loop ---------------------------------------------------------
@dataclass
class TrainResult:
    model: InfoGeoModel
    epochs: list[LossBreakdown] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0
    mean_step_seconds: float = 0.0


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch, tag)))


def batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch smaller than two pairs is dropped."""
    order = ids[rng.permutation(len(ids))]
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [b for b in out if len(b) >= 2]


def epoch_batches(ids: np.ndarray, config: TrainConfig, epoch: int) -> list[np.ndarray]:
    """``fixed``: one seeded partition, visited in a new order each epoch.
    ``shuffle``: a fresh partition every epoch."""
    if config.batch_sampler == "shuffle":
        return batches(ids, config.batch_size, _epoch_rng(config.seed, epoch, 0))
    parts = batches(ids, config.batch_size, _epoch_rng(config.seed, 0, 0))
    order = _epoch_rng(config.seed, epoch, 2).permutation(len(parts))
    return [parts[i] for i in order]


def _mean_breakdown(rows: list[LossBreakdown]) -> LossBreakdown:
    keys = LossBreakdown().to_dict().keys()
    return LossBreakdown(**{k: float(np.mean([getattr(r, k) for r in rows])) for k in keys})


def training_views(model: InfoGeoModel, dataset: Dataset, ids: np.ndarray, variants: int
                   ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Frozen tokens of the stored views plus ``variants - 1`` nuisance re-renderings.

    Variant ``v`` redraws every nuisance of each training location while the
    layout stays fixed; epoch ``e`` trains on variant ``e % variants``.  Arrays
    are indexed by location id; only ``ids`` are filled for re-rendered variants.
    """
    tok_q = [model.features(dataset.raw_q)]
    tok_g = [model.features(dataset.raw_g)]
    man = dataset.manifest
    for v in range(1, variants):
        raw_q, raw_g = dataset.raw_q.copy(), dataset.raw_g.copy()
        for loc in ids:
            pair = render_pair(man.spec, man.seed, int(loc), man.n_locations, variant=v)
            raw_q[loc], raw_g[loc] = pair.raw_q, pair.raw_g
        tok_q.append(model.features(raw_q))
        tok_g.append(model.features(raw_g))
    return tok_q, tok_g


def train(dataset: Dataset, config: TrainConfig, out_dir: str | os.PathLike | None = None,
          split: str = "train", progress: Callable[[int, LossBreakdown], None] | None = None
          ) -> TrainResult:
    """Train from scratch; the frozen features are computed once up front."""
    model = InfoGeoModel(config)
    ids = dataset.split(split)
    if len(ids) < 2:
        raise InputError("training split needs at least two locations")
    tok_q, tok_g = training_views(model, dataset, ids, config.train_variants)
    params = model.parameters()
    opt = AdamW(params, config.weight_decay)
    steps_per_epoch = len(epoch_batches(ids, config, 0))
    total = steps_per_epoch * config.epochs

    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "train_log.jsonl", "w", encoding="utf-8")
    result = TrainResult(model)
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(config.epochs):
            rows = []
            noise = _epoch_rng(config.seed, epoch, 1)
            for batch in epoch_batches(ids, config, epoch):
                lr = learning_rate(step, total, config.lr, config.warmup_ratio)
                lam2 = info_ramp(step, total, config.lambda2, config.warmup_ratio)
                v = epoch % len(tok_q)
                comps, diag = step_components(model, tok_q[v][batch], tok_g[v][batch], noise)
                loss, bd = total_loss(comps, config, info_weight=lam2)
                if not np.isfinite(bd.total):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {bd.to_dict()}")
                model.zero_grad()
                loss.backward()
                opt.step(lr)
                rows.append(bd)
                if log is not None:
                    rec = {"epoch": epoch, "step": step, "lr": lr, **bd.to_dict(), **diag}
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                step += 1
            summary = _mean_breakdown(rows)
            result.epochs.append(summary)
            if out is not None:
                result.checkpoint = save_checkpoint(out / "checkpoint.igeo", model)
            if progress is not None:
                progress(epoch, summary)
    finally:
        if log is not None:
            log.close()
    result.seconds = time.perf_counter() - t0
    result.mean_step_seconds = result.seconds / max(1, step)
    round_to_storage(model)
    return result


def moving_average(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
