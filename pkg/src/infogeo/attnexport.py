"""CSV dumps of the concept-level internals for positive pairs of a split."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import cacs, csrr
from .diffcore import no_grad
from .errors import ConfigError
from .model import InfoGeoModel
from .synthgen import Dataset

FILES = ("routing.csv", "concept_graph.csv", "spectrum.csv")


def concept_internals(model: InfoGeoModel, tok_q: np.ndarray, tok_g: np.ndarray) -> dict:
    """Routing weights, concept graphs and spectral embeddings for aligned pairs."""
    with no_grad():
        o_q, o_g = model.objects(tok_q), model.objects(tok_g)
        aug = model.augment(tok_q, o_q.attn_dec, tok_g, o_g.attn_dec)
        out = {}
        for view, w, a_hat in (("q", aug.w_q, aug.a_hat_q), ("g", aug.w_g, aug.a_hat_g)):
            graph = csrr.concept_graph(a_hat)
            emb = csrr.spectral_embed(csrr.normalized_laplacian(graph), model.config.r)
            out[view] = dict(w=w.data[..., 0], G=graph.G.data, eigenvalues=emb.eigenvalues.data,
                             U=emb.U.data, degenerate=emb.degenerate,
                             ambiguity=cacs.ambiguity(w.data))
    return out


def _write(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def export_attention(model: InfoGeoModel, dataset: Dataset, out_dir: str | Path,
                     split: str = "test", limit: int = 16) -> list[Path]:
    if not model.config.ocva:
        raise ConfigError("the checkpoint has no object branch to export")
    if limit < 1:
        raise ConfigError("limit must be positive")
    ids = dataset.split(split)[:limit]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = concept_internals(model, model.features(dataset.raw_q[ids]),
                              model.features(dataset.raw_g[ids]))
    fmt = "{:.9g}".format

    routing, graph, spectrum = [], [], []
    for view in ("q", "g"):
        p = parts[view]
        k = p["w"].shape[-1]
        for n, loc in enumerate(ids):
            loc = int(loc)
            routing += [[loc, view, s, fmt(p["w"][n, s])] for s in range(k)]
            graph += [[loc, view, i, j, fmt(p["G"][n, i, j])] for i in range(k) for j in range(k)]
            for e, lam in enumerate(p["eigenvalues"][n]):
                spectrum.append([loc, view, e, fmt(lam), int(p["degenerate"][n])]
                                + [fmt(u) for u in p["U"][n, :, e]])
    k = model.config.n_slots
    return [
        _write(out / FILES[0], ["location", "view", "slot", "w"], routing),
        _write(out / FILES[1], ["location", "view", "i", "j", "g"], graph),
        _write(out / FILES[2], ["location", "view", "index", "eigenvalue", "degenerate"]
               + [f"u{s}" for s in range(k)], spectrum),
    ]
