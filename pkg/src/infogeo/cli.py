"""Command-line entry point: ``infogeo <subcommand> [options]``.

Exit codes: 0 success, 1 contract or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, InfoGeoError
from .synthgen import WEATHER_KINDS

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                   help="JSON training/model configuration")
    p.add_argument("--seed", type=int, metavar="U64", default=argparse.SUPPRESS,
                   help="seed from which all randomness derives")
    p.add_argument("--out", metavar="PATH", default=argparse.SUPPRESS, help="output location")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="infogeo", description="Object-centric cross-view geo-localization toolkit")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic cross-view dataset")
    _global_flags(p)
    p.add_argument("--n-locations", type=int, default=64)
    p.add_argument("--clean", action="store_true", help="nuisance-free views (no rotation, jitter, rates 0)")
    p.add_argument("--distractor-rate", type=float)
    p.add_argument("--occlusion-rate", type=float)
    p.add_argument("--weather", choices=WEATHER_KINDS)
    p.add_argument("--severity", type=float)

    p = sub.add_parser("train", help="train a model and write checkpoint.igeo + train_log.jsonl")
    _global_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset", choices=("desk", "paper"))

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    _global_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("vanilla", "augmented"), default="augmented")
    p.add_argument("--metrics", help="report path (default: --out or stdout)")
    p.add_argument("--split", default="test")

    p = sub.add_parser("mi-probe", help="k-NN mutual-information probe of a trained model")
    _global_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--variants", type=int, default=8)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("dpi-check", help="data-processing inequality on random Markov chains")
    _global_flags(p)
    p.add_argument("--chains", type=int, default=100)
    p.add_argument("--states", type=int, default=4)

    p = sub.add_parser("grad-check", help="finite-difference gradient suites for every loss")
    _global_flags(p)
    p.add_argument("--tol", type=float, default=1e-3, help="relative-error bound for the loss suites")

    p = sub.add_parser("export-attn", help="dump routing weights, concept graphs and spectra as CSV")
    _global_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=16, help="number of positive pairs to export")
    return parser


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _write(text: str | bytes, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text.decode("utf-8") if isinstance(text, bytes) else text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.write_bytes if isinstance(text, bytes) else path.write_text)(text)


# -- commands --------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .synthgen import SceneSpec, generate_dataset, manifest_checksum

    out = _opt(args, "out")
    if out is None:
        raise InfoGeoError("gen-data needs --out DIR")
    base = json.loads(Path(args.config).read_text("utf-8")) if _opt(args, "config") else {}
    spec = SceneSpec.from_dict(base) if base else SceneSpec()
    if args.clean:
        spec = spec.clean()
    changes = {k: v for k, v in (("distractor_rate", args.distractor_rate),
                                 ("occlusion_rate", args.occlusion_rate),
                                 ("weather", args.weather), ("severity", args.severity))
               if v is not None}
    if changes:
        spec = SceneSpec.from_dict({**spec.to_dict(), **changes})
    generate_dataset(spec, args.n_locations, _opt(args, "seed", 7), out)
    print(manifest_checksum(out))
    return EXIT_OK


def _config(args, **extra):
    from .config import load_config

    return load_config(_opt(args, "config"), seed=_opt(args, "seed"), **extra)


def cmd_train(args) -> int:
    from .synthgen import load_dataset
    from .trainer import train

    cfg = _config(args, epochs=args.epochs, preset=args.preset)
    out = _opt(args, "out", "run")
    ds = load_dataset(args.data)
    result = train(ds, cfg, out, progress=lambda e, b: logging.info("epoch %d total %.5f", e, b.total))
    Path(out, "epochs.jsonl").write_text(
        "".join(json.dumps(asdict(b), sort_keys=True) + "\n" for b in result.epochs), "utf-8")
    print(result.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .synthgen import load_dataset
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt)
    report = evaluate(model, load_dataset(args.data), args.mode, split=args.split,
                      seed=_opt(args, "seed"))
    _write(report.to_json(), args.metrics or _opt(args, "out"))
    return EXIT_OK


def cmd_mi_probe(args) -> int:
    from .infolab import mi_probe
    from .synthgen import load_dataset
    from .trainer import load_checkpoint

    report = mi_probe(load_checkpoint(args.ckpt), load_dataset(args.data), split=args.split,
                      variants=args.variants, dims=args.dims, k=args.k, seed=_opt(args, "seed", 0))
    _write(report.to_json(), _opt(args, "out"))
    return EXIT_OK


def cmd_dpi_check(args) -> int:
    from .infolab import dpi_check, dpi_table, random_chain

    rng = np.random.default_rng(_opt(args, "seed", 0))
    reports = [dpi_check(random_chain(rng, args.states, 2)) for _ in range(args.chains)]
    _write(dpi_table(reports), _opt(args, "out"))
    return EXIT_OK if all(r.holds for r in reports) else EXIT_CONTRACT


def cmd_grad_check(args) -> int:
    from .gradsuite import ELEMENTWISE_TOL, run_suites

    results = run_suites(seed=_opt(args, "seed", 0))
    ok = True
    for name, err in results.items():
        passed = err < (min(args.tol, ELEMENTWISE_TOL) if name == "elementwise" else args.tol)
        ok &= passed
        print(f"{name:<12} {err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CONTRACT


def cmd_export_attn(args) -> int:
    from .attnexport import export_attention
    from .synthgen import load_dataset
    from .trainer import load_checkpoint

    out = Path(_opt(args, "out", "attn"))
    paths = export_attention(load_checkpoint(args.ckpt), load_dataset(args.data), out,
                             split=args.split, limit=args.limit)
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "mi-probe": cmd_mi_probe, "dpi-check": cmd_dpi_check, "grad-check": cmd_grad_check,
            "export-attn": cmd_export_attn}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (OSError, FormatError, CorruptionError) as exc:
        print(f"infogeo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InfoGeoError as exc:
        print(f"infogeo: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
