"""Procedural cross-view scene pairs, weather corruptions and the frozen featurizer.

A location is a set of coloured glyphs placed on a coarse lattice.  The
gallery view renders that layout as-is (plus its own distractors); the query
view jitters the glyphs, adds independent distractors, hides some glyphs
under occluders, rotates the whole image by a right angle and applies
weather.  Everything is a pure function of ``(seed, spec, location_id)``.
"""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, InputError, ShapeError

CELL = 4
GLYPH = 3
BACKGROUND = 0.1
OCCLUDER = 0.3
FOG_GRAY = 0.5
CELL_METERS = 100.0
MANIFEST_VERSION = 1
IGTD_MAGIC = b"IGTD"
IGTD_VERSION = 1
PE_SCALE = 0.2

WEATHER_KINDS = ("none", "fog", "rain", "snow", "fog-rain", "fog-snow", "rain-snow")


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int = 32
    n_objects: int = 6
    object_vocab_size: int = 12
    distractor_rate: float = 0.2
    occlusion_rate: float = 0.1
    weather: str = "none"
    severity: float = 0.0
    rotate: bool = True
    jitter: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("distractor_rate", "occlusion_rate", "severity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.weather not in WEATHER_KINDS:
            raise ConfigError(f"unknown weather kind {self.weather!r}")
        if self.grid_size % CELL:
            raise ConfigError(f"grid_size must be a multiple of {CELL}")
        if self.n_objects > (self.grid_size // CELL) ** 2 // 2:
            raise ConfigError("too many objects for the lattice")
        if not 0 <= self.jitter <= CELL - GLYPH:
            raise ConfigError(f"jitter must lie in [0, {CELL - GLYPH}]")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        return cls(**d)

    @classmethod
    def clean(cls, **kw) -> "SceneSpec":
        """Nuisance-free variant: query and gallery render identically."""
        base = dict(distractor_rate=0.0, occlusion_rate=0.0, weather="none", severity=0.0,
                    rotate=False, jitter=0)
        base.update(kw)
        return cls(**base)


@dataclass
class ScenePair:
    location_id: int
    raw_q: np.ndarray
    raw_g: np.ndarray
    coords: tuple[float, float]
    nuisance_log: dict[str, Any] = field(default_factory=dict)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))


_LAYOUT, _QUERY, _GALLERY, _SPLIT = 0, 1, 2, 3


def _palette(vocab: int) -> np.ndarray:
    n_hue = max(1, (vocab + 1) // 2)
    cols = []
    for v in range(vocab):
        h = (v % n_hue) / n_hue
        val = 0.95 if v < n_hue else 0.7
        cols.append(colorsys.hsv_to_rgb(h, 0.85, val))
    return np.array(cols)


def _glyph_mask(shape_id: int) -> np.ndarray:
    if shape_id == 0:
        return np.ones((GLYPH, GLYPH), dtype=bool)
    m = np.zeros((GLYPH, GLYPH), dtype=bool)
    m[GLYPH // 2, :] = True
    m[:, GLYPH // 2] = True
    return m


def _draw(img: np.ndarray, cell: int, offset: tuple[int, int], vocab_id: int,
          palette: np.ndarray, n_side: int) -> None:
    r0 = (cell // n_side) * CELL + offset[0]
    c0 = (cell % n_side) * CELL + offset[1]
    shape_id = 0 if vocab_id < (len(palette) + 1) // 2 else 1
    mask = _glyph_mask(shape_id)
    patch = img[r0:r0 + GLYPH, c0:c0 + GLYPH]
    patch[mask] = palette[vocab_id]


def _layout(spec: SceneSpec, seed: int, location_id: int):
    rng = _rng(seed, location_id, _LAYOUT)
    n_side = spec.grid_size // CELL
    cells = rng.permutation(n_side * n_side)[: spec.n_objects]
    vocab = rng.integers(0, spec.object_vocab_size, size=spec.n_objects)
    return cells, vocab


def _coords(seed: int, location_id: int, n_locations: int) -> tuple[float, float]:
    cols = int(np.ceil(np.sqrt(max(n_locations, 1))))
    rng = _rng(seed, location_id, _LAYOUT, 1)
    dx, dy = rng.uniform(-0.2, 0.2, size=2) * CELL_METERS
    return (float(CELL_METERS * (location_id % cols) + dx),
            float(CELL_METERS * (location_id // cols) + dy))


def _render_view(spec: SceneSpec, cells, vocab, rng: np.random.Generator, *, query: bool):
    g = spec.grid_size
    n_side = g // CELL
    palette = _palette(spec.object_vocab_size)
    img = np.full((g, g, 3), BACKGROUND)
    log: dict[str, Any] = {}

    # every random draw below happens unconditionally so that changing one
    # rate does not reshuffle the others (monotone nuisance under a fixed seed)
    jit = rng.integers(-spec.jitter, spec.jitter + 1, size=(len(cells), 2))
    free = np.setdiff1d(np.arange(n_side * n_side), cells)
    d_cells = rng.permutation(free)[: spec.n_objects]
    d_vocab = rng.integers(0, spec.object_vocab_size, size=spec.n_objects)
    occ_order = rng.permutation(len(cells))
    rot_k = int(rng.integers(0, 4))

    for i, (cell, v) in enumerate(zip(cells, vocab)):
        off = (0, 0)
        if query:
            off = tuple(int(np.clip(jit[i, a], 0, CELL - GLYPH)) for a in range(2))
        _draw(img, int(cell), off, int(v), palette, n_side)
    n_d = int(round(spec.distractor_rate * spec.n_objects))
    for cell, v in zip(d_cells[:n_d], d_vocab[:n_d]):
        _draw(img, int(cell), (0, 0), int(v), palette, n_side)
    log["distractors"] = [[int(c), int(v)] for c, v in zip(d_cells[:n_d], d_vocab[:n_d])]
    if query:
        n_o = int(round(spec.occlusion_rate * spec.n_objects))
        occluded = sorted(int(i) for i in occ_order[:n_o])
        for i in occluded:
            cell = int(cells[i])
            r0, c0 = (cell // n_side) * CELL, (cell % n_side) * CELL
            img[r0:r0 + CELL, c0:c0 + CELL] = OCCLUDER
        log["occluded"] = occluded
        log["jitter"] = jit.tolist() if spec.jitter else []
        k = rot_k if spec.rotate else 0
        img = np.rot90(img, k, axes=(0, 1))
        log["rotation_deg"] = 90 * k
    return np.ascontiguousarray(img), log


def render_pair(spec: SceneSpec, seed: int, location_id: int, n_locations: int = 1,
                variant: int = 0) -> ScenePair:
    """Render the query/gallery pair of one location.

    ``variant`` re-draws the nuisances (distractors, jitter, occlusion,
    rotation, weather) while keeping the persistent layout.
    """
    cells, vocab = _layout(spec, seed, location_id)
    q, qlog = _render_view(spec, cells, vocab, _rng(seed, location_id, _QUERY, variant), query=True)
    g, glog = _render_view(spec, cells, vocab, _rng(seed, location_id, _GALLERY, variant), query=False)
    wseed = int(_rng(seed, location_id, _QUERY, variant, 7).integers(0, 2**31))
    q = apply_weather(q, spec.weather, spec.severity, wseed)
    log = {"query": qlog, "gallery": glog, "weather": spec.weather, "severity": spec.severity,
           "weather_seed": wseed}
    return ScenePair(location_id, q.astype(np.float32), g.astype(np.float32),
                     _coords(seed, location_id, n_locations), log)


# -- weather ---------------------------------------------------------------
def _fog(view, s, rng):
    return (1.0 - s) * view + s * FOG_GRAY


def _rain(view, s, rng):
    h, w = view.shape[:2]
    mask = np.ones((h, w))
    n_streaks = int(round(s * h))
    length = max(2, h // 5)
    for _ in range(n_streaks):
        r, c = rng.integers(0, h), rng.integers(0, w)
        rr = (r + np.arange(length)) % h
        cc = (c + np.arange(length)) % w
        mask[rr, cc] = 0.5
    return view * mask[..., None]


def _snow(view, s, rng):
    h, w = view.shape[:2]
    n = int(round(s * 0.1 * h * w))
    out = view.copy()
    idx = rng.choice(h * w, size=n, replace=False)
    out.reshape(h * w, -1)[idx] = 1.0
    return out


_WEATHER = {"fog": _fog, "rain": _rain, "snow": _snow}


def apply_weather(view: np.ndarray, kind: str, severity: float, seed: int = 0) -> np.ndarray:
    """Corrupt one view. Compound kinds ("fog-snow", ...) apply both in order."""
    if kind not in WEATHER_KINDS:
        raise ConfigError(f"unknown weather kind {kind!r}")
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity {severity} outside [0, 1]")
    out = np.asarray(view, dtype=np.float64)
    if kind == "none" or severity == 0.0:
        return out.copy()
    for i, part in enumerate(kind.split("-")):
        out = _WEATHER[part](out, severity, _rng(seed, 101 + i))
    return out


# -- frozen featurizer -----------------------------------------------------
class Featurizer:
    """Patchify, project with a fixed random matrix, add 2-D sinusoidal PE."""

    def __init__(self, grid_size: int = 32, patch: int = 4, channels: int = 64, seed: int = 1652):
        if grid_size % patch:
            raise ShapeError(f"grid size {grid_size} not divisible by patch {patch}")
        if channels % 4:
            raise ShapeError("channels must be a multiple of 4")
        self.grid_size, self.patch, self.channels = grid_size, patch, channels
        d_in = patch * patch * 3
        rng = np.random.default_rng(seed)
        # scaled so an object patch has roughly unit variance per channel while
        # the flat background stays small; the PE is kept weaker than content
        self.projection = rng.normal(0.0, 1.0 / patch, size=(d_in, channels))
        self.side = grid_size // patch
        self.pos = PE_SCALE * sinusoidal_pe(self.side, channels)

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        """(..., G, G, 3) grids -> (..., C, H', W') feature maps."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-3:-1] != (self.grid_size, self.grid_size) or raw.shape[-1] != 3:
            if raw.shape[-3] % self.patch or raw.shape[-2] % self.patch:
                raise ShapeError(f"grid {raw.shape[-3:-1]} not divisible by patch {self.patch}")
            raise ShapeError(f"expected (..., {self.grid_size}, {self.grid_size}, 3), got {raw.shape}")
        lead = raw.shape[:-3]
        p, s = self.patch, self.side
        x = raw.reshape(lead + (s, p, s, p, 3))
        x = np.moveaxis(x, -4, -3).reshape(lead + (s, s, p * p * 3))
        feats = x @ self.projection + self.pos
        return np.moveaxis(feats, -1, -3)


def sinusoidal_pe(side: int, channels: int) -> np.ndarray:
    """(side, side, channels): first half encodes rows, second half columns."""
    half = channels // 2
    freqs = 1.0 / (side ** (np.arange(half // 2) / (half // 2)))
    pos = np.arange(side)[:, None] * freqs[None, :] * np.pi / 2
    enc = np.concatenate([np.sin(pos), np.cos(pos)], axis=-1)  # (side, half)
    rows = np.broadcast_to(enc[:, None, :], (side, side, half))
    cols = np.broadcast_to(enc[None, :, :], (side, side, half))
    return np.concatenate([rows, cols], axis=-1)


_DEFAULT_FEATURIZERS: dict[tuple, Featurizer] = {}


def featurize(raw: np.ndarray, patch: int = 4, channels: int = 64, seed: int = 1652) -> np.ndarray:
    raw = np.asarray(raw)
    g = raw.shape[-3]
    if raw.shape[-3] % patch or raw.shape[-2] % patch:
        raise ShapeError(f"grid {raw.shape[-3:-1]} not divisible by patch {patch}")
    key = (g, patch, channels, seed)
    if key not in _DEFAULT_FEATURIZERS:
        _DEFAULT_FEATURIZERS[key] = Featurizer(g, patch, channels, seed)
    return _DEFAULT_FEATURIZERS[key](raw)


# -- binary view files -----------------------------------------------------
def write_igtd(path: str | os.PathLike, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = IGTD_MAGIC + struct.pack("<IBB", IGTD_VERSION, 0, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    blob = header + arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_igtd(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != IGTD_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 10:
        raise CorruptionError(f"{path}: truncated header")
    version, dtype, rank = struct.unpack_from("<IBB", blob, 4)
    if version != IGTD_VERSION:
        raise FormatError(f"{path}: file version {version}, reader version {IGTD_VERSION}")
    if dtype != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    off = 10 + 8 * rank
    if len(blob) < off:
        raise CorruptionError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 10)
    n = int(np.prod(dims)) if rank else 1
    if len(blob) != off + 4 * n:
        raise CorruptionError(f"{path}: payload is {len(blob) - off} bytes, expected {4 * n}")
    return np.frombuffer(blob, dtype="<f4", offset=off).reshape(dims).copy()


# -- datasets --------------------------------------------------------------
@dataclass
class DatasetManifest:
    version: int
    seed: int
    n_locations: int
    spec: SceneSpec
    splits: dict[str, list[int]]
    files: list[dict[str, Any]]

    def to_json(self) -> dict[str, Any]:
        return {"version": self.version, "seed": self.seed, "n_locations": self.n_locations,
                "spec": self.spec.to_dict(), "splits": self.splits, "files": self.files}


def split_locations(n_locations: int, seed: int) -> dict[str, list[int]]:
    order = _rng(seed, _SPLIT).permutation(n_locations)
    n_train = min(n_locations - 1, max(1, int(round(0.8 * n_locations))))
    return {"train": sorted(int(i) for i in order[:n_train]),
            "test": sorted(int(i) for i in order[n_train:])}


def generate_dataset(spec: SceneSpec, n_locations: int, seed: int, out_dir: str | os.PathLike
                     ) -> DatasetManifest:
    """Render every location, write the view files and ``manifest.json``."""
    if n_locations < 2:
        raise ConfigError("n_locations must be >= 2")
    out = Path(out_dir)
    try:
        (out / "views").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    files, nuisance = [], []
    for loc in range(n_locations):
        pair = render_pair(spec, seed, loc, n_locations)
        pq, pg = f"views/{loc:05d}_q.igtd", f"views/{loc:05d}_g.igtd"
        bq = write_igtd(out / pq, pair.raw_q)
        bg = write_igtd(out / pg, pair.raw_g)
        files.append({"id": loc, "path_q": pq, "path_g": pg, "coords": list(pair.coords),
                      "checksum": hashlib.sha256(bq + bg).hexdigest()})
        nuisance.append({"id": loc, **pair.nuisance_log})
    manifest = DatasetManifest(MANIFEST_VERSION, int(seed), n_locations, spec,
                               split_locations(n_locations, seed), files)
    (out / "manifest.json").write_bytes(_canonical_json(manifest.to_json()))
    (out / "nuisance.json").write_bytes(_canonical_json(nuisance))
    return manifest


def _canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def manifest_checksum(out_dir: str | os.PathLike) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.json").read_bytes()).hexdigest()


@dataclass
class Dataset:
    """Loaded views in location-id order."""

    root: Path
    manifest: DatasetManifest
    raw_q: np.ndarray
    raw_g: np.ndarray
    coords: np.ndarray

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.raw_q))

    def split(self, name: str) -> np.ndarray:
        if name not in self.manifest.splits:
            raise InputError(f"dataset has no split {name!r}")
        return np.asarray(self.manifest.splits[name], dtype=int)


def load_dataset(root: str | os.PathLike, verify: bool = True) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "manifest.json").read_text("utf-8"))
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no manifest.json under {root}") from exc
    if meta.get("version") != MANIFEST_VERSION:
        raise FormatError(f"manifest version {meta.get('version')}, reader version {MANIFEST_VERSION}")
    spec = SceneSpec.from_dict(meta["spec"])
    manifest = DatasetManifest(meta["version"], meta["seed"], meta["n_locations"], spec,
                               meta["splits"], meta["files"])
    if set(manifest.splits["train"]) & set(manifest.splits["test"]):
        raise InputError("train and test splits overlap")
    qs, gs, coords = [], [], []
    for entry in sorted(manifest.files, key=lambda e: e["id"]):
        bq = (root / entry["path_q"]).read_bytes()
        bg = (root / entry["path_g"]).read_bytes()
        if verify and hashlib.sha256(bq + bg).hexdigest() != entry["checksum"]:
            raise CorruptionError(f"checksum mismatch for location {entry['id']}")
        qs.append(read_igtd(root / entry["path_q"]))
        gs.append(read_igtd(root / entry["path_g"]))
        coords.append(entry["coords"])
    return Dataset(root, manifest, np.stack(qs).astype(np.float64), np.stack(gs).astype(np.float64),
                   np.asarray(coords, dtype=np.float64))
