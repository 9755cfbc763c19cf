"""End-to-end acceptance suite.

Each test prints a single ``A<n> PASS|FAIL <detail>`` line (visible without ``-s``)
before asserting, so a full run doubles as a scorecard. The whole module takes
roughly 13 minutes on one CPU core; deselect it with ``-m "not acceptance"``.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from infogeo import gradsuite
from infogeo.cli import main as cli
from infogeo.config import TrainConfig
from infogeo.csrr import procrustes_align
from infogeo.evaluation import evaluate, routing_ambiguity
from infogeo.infolab import (ChainSpec, binary_symmetric, dpi_check, exact_mi, mi_probe,
                             nce_bound_check, random_chain)
from infogeo.synthgen import SceneSpec, generate_dataset, load_dataset
from infogeo.trainer import moving_average, train

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEEDS = (7, 8, 9, 10)
CORRUPT_LOCATIONS = 64
CORRUPTED = dict(distractor_rate=0.4, occlusion_rate=0.2, weather="fog-snow", severity=0.5)


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"{name}: {detail}"
    return emit


# -- shared runs -----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def clean_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("clean")
    generate_dataset(SceneSpec.clean(), 64, 7, root)
    ds = load_dataset(root)
    t0 = time.process_time()
    result = train(ds, TrainConfig.desk(seed=7))
    return ds, result, time.process_time() - t0


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    """R@1 and routing ambiguity for the four training variants on every seed."""
    root = tmp_path_factory.mktemp("corrupted")
    generate_dataset(SceneSpec(**CORRUPTED), CORRUPT_LOCATIONS, 7, root)
    ds = load_dataset(root)
    rows = {}
    for seed in SEEDS:
        full = train(ds, TrainConfig.desk(seed=seed)).model
        ocva_only = train(ds, TrainConfig.desk(seed=seed, cacs=False, struct=False, rd=False)).model
        base = train(ds, TrainConfig.desk(seed=seed, ocva=False)).model
        no_cacs = train(ds, TrainConfig.desk(seed=seed, cacs=False)).model
        rows[seed] = dict(
            full=evaluate(full, ds, "augmented").r_at_1,
            full_vanilla=evaluate(full, ds, "vanilla").r_at_1,
            ocva_only=evaluate(ocva_only, ds, "augmented").r_at_1,
            base=evaluate(base, ds, "vanilla").r_at_1,
            amb_full=routing_ambiguity(full, ds),
            amb_no_cacs=routing_ambiguity(no_cacs, ds),
        )
    return rows


def _seed_table(rows, keys):
    return "; ".join(f"s{s}: " + ",".join(f"{k}={rows[s][k]:.3f}" for k in keys) for s in rows)


# -- criteria --------------------------------------------------------------------------------
def test_a1_gradient_suite(verdict):
    t0 = time.monotonic()
    errors = gradsuite.run_suites(seed=0)
    elapsed = time.monotonic() - t0
    losses = {k: v for k, v in errors.items() if k != "elementwise"}
    ok = (all(v < 1e-3 for v in losses.values())
          and errors["elementwise"] < gradsuite.ELEMENTWISE_TOL and elapsed < 120)
    worst = max(losses, key=losses.get)
    verdict("A1", ok, f"worst loss {worst}={losses[worst]:.2e} elementwise="
                      f"{errors['elementwise']:.2e} time={elapsed:.0f}s")


def test_a2_clean_retrieval(clean_run, verdict):
    ds, result, cpu = clean_run
    r1 = evaluate(result.model, ds, "augmented").r_at_1
    verdict("A2", r1 >= 0.95 and cpu < 600, f"R@1={r1:.3f} cpu={cpu:.0f}s")


def test_a3_training_stability(clean_run, verdict):
    _, result, _ = clean_run
    ma = moving_average([e.total for e in result.epochs], 5)
    steps = np.diff(ma)
    verdict("A3", bool(np.all(steps < 0)),
            f"{int(np.sum(steps >= 0))} non-decreasing steps, largest diff {steps.max():.2e}")


def test_a4_ablation_direction(ablation, verdict):
    held = sum(r["full"] >= r["ocva_only"] >= r["base"] for r in ablation.values())
    verdict("A4", held >= 3,
            f"{held}/4 seeds ordered; " + _seed_table(ablation, ("full", "ocva_only", "base")))


def test_a5_rd_parity(ablation, verdict):
    held = sum(abs(r["full"] - r["full_vanilla"]) <= 0.10 for r in ablation.values())
    verdict("A5", held >= 3, f"{held}/4 seeds within 0.10; "
                             + _seed_table(ablation, ("full", "full_vanilla")))


def test_a6_mi_probe(clean_run, verdict):
    ds, result, _ = clean_run
    rep = mi_probe(result.model, ds)
    ok = abs(rep.cmi_zhat) < 0.1 and rep.mi_zhat > rep.cmi_zhat + 0.05
    verdict("A6", ok, f"I(Zq;Zg)={rep.mi_zhat:.3f} I(Zq;Zg|Y)={rep.cmi_zhat:.3f} nats")


def test_a7_dpi(verdict):
    g = np.random.default_rng(0)
    reports = [dpi_check(random_chain(g, states=4)) for _ in range(100)]
    chains_ok = all(r.holds for r in reports) and min(r.slack for r in reports) >= -1e-12
    # hand-built chains against the exact joint table
    hand_err = 0.0
    for prior, flips in (([0.5, 0.5], (0.1, 0.1)), ([0.3, 0.7], (0.25, 0.05))):
        chans = [binary_symmetric(f) for f in flips]
        rep = dpi_check(ChainSpec(prior, chans))
        head_mid = np.asarray(prior)[:, None] * chans[0]
        head_tail = np.asarray(prior)[:, None] * (chans[0] @ chans[1])
        hand_err = max(hand_err, abs(rep.mi_head_mid - exact_mi(head_mid)),
                       abs(rep.mi_head_tail - exact_mi(head_tail)))
    verdict("A7", chains_ok and hand_err <= 1e-10,
            f"min slack {min(r.slack for r in reports):.2e} hand-chain err {hand_err:.1e}")


def test_a8_procrustes(verdict):
    g = np.random.default_rng(8)
    flip = np.diag([1.0, -1.0])
    rots = [np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
            for t in np.deg2rad(np.arange(360))]
    grid_gap = -np.inf
    for _ in range(50):
        u_q, u_g = g.normal(size=(6, 2)), g.normal(size=(6, 2))
        brute = min(float(((u_q - u_g @ q) ** 2).sum()) for r in rots for q in (r, r @ flip))
        grid_gap = max(grid_gap, procrustes_align(u_q, u_g)[1].item() - brute)
    inv_err = 0.0
    for _ in range(50):
        u = g.normal(size=(6, 3))
        q, _ = np.linalg.qr(g.normal(size=(3, 3)))
        inv_err = max(inv_err, procrustes_align(u @ q, u)[1].item())
    verdict("A8", grid_gap <= 1e-9 and inv_err <= 1e-10,
            f"closed form minus grid {grid_gap:.2e}, rotated-copy loss {inv_err:.1e}")


def test_a9_infonce_bound(verdict):
    reps = {rho: nce_bound_check(rho, batch_size=32, n_batches=200) for rho in (0.0, 0.5, 0.9)}
    ok = all(r.passed and r.bound <= r.exact_mi + 0.05 for r in reps.values())
    verdict("A9", ok, "; ".join(f"rho={k}: bound {r.bound:.3f} <= I {r.exact_mi:.3f}"
                                for k, r in reps.items()))


def test_a10_cacs_polarization(ablation, verdict):
    held = sum(r["amb_full"] < r["amb_no_cacs"] for r in ablation.values())
    verdict("A10", held >= 3, f"{held}/4 seeds more polarized; "
                              + _seed_table(ablation, ("amb_full", "amb_no_cacs")))


def test_a11_determinism(tmp_path, capsys, verdict):
    def run(tag):
        root = tmp_path / tag
        capsys.readouterr()     # drop output left over from the previous run
        assert cli(["gen-data", "--n-locations", "64", "--seed", "7", "--out", str(root / "data")]) == 0
        checksum = capsys.readouterr().out.strip()
        assert cli(["train", "--data", str(root / "data"), "--seed", "7", "--out", str(root / "run")]) == 0
        assert cli(["eval", "--ckpt", str(root / "run" / "checkpoint.igeo"), "--data",
                    str(root / "data"), "--metrics", str(root / "metrics.json")]) == 0
        return (checksum, (root / "run" / "checkpoint.igeo").read_bytes(),
                (root / "metrics.json").read_bytes())

    a, b = run("a"), run("b")
    same = [x == y for x, y in zip(a, b)]
    verdict("A11", all(same), f"checksum/checkpoint/report identical: {same}")
