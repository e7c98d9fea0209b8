"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import math
import random
import time

import numpy as np
import pytest

from cases import LAYOUT, SIMS, planted_instances, random_case, translate, upscale
from oracles import brute_force_argmax, brute_force_divmbest, enumerate_derivations
from ppmediator.features import consistency_features
from ppmediator.harness import experiments as ex
from ppmediator.harness.cli import main
from ppmediator.mediator import (MediatorModel, PairIndex, TrainConfig, argmin_pair, cascade_phi, infer_phi,
                                 objective, predict_indep, train, train_cascade)
from ppmediator.parser import PrepAttachment, attachment_accuracy, parse_kbest
from ppmediator.segmenter import GridCRF, divmbest, jaccard

GRID = ex.Grid(my=(1, 2, 5, 10), mz=(1, 3, 5, 10), C=(0.1, 1.0, 10.0))
CV = ex.CVConfig(alpha=0.5, epochs=20, seed=0)


@pytest.fixture(scope="module")
def cv_full(planted):
    t = time.perf_counter()
    res = ex.cross_validate(planted["records"], GRID, CV, planted["layout"])
    return res, time.perf_counter() - t


def test_c01_kbest_exactness(grammar, criterion):
    rnd = random.Random(2024)
    t = time.perf_counter()
    n_ok = n = 0
    for _ in range(120):
        seq, _ = rnd.choice(grammar.templates)
        toks = [rnd.choice(grammar.words(p)) for p in seq]
        k = rnd.randint(1, 20)
        got = parse_kbest(grammar, toks, k)
        want = enumerate_derivations(grammar, toks)[:k]
        n += 1
        n_ok += len(got) == len(want) and all(
            h.tree.rule_ids() == seq_ and abs(h.score - math.log(p)) <= 1e-9 for h, (p, seq_) in zip(got, want))
    dt = time.perf_counter() - t
    ok = n_ok == n and dt < 10
    criterion(1, ok, f"k-best matches brute force on {n_ok}/{n} sentences in {dt:.2f}s")
    assert ok


def test_c02_divmbest_exactness(criterion):
    rng = np.random.default_rng(7)
    t = time.perf_counter()
    n_ok = n = 0
    for lam in (0.0, 0.5, 2.0):
        for _ in range(70):
            h, w = (int(v) for v in rng.integers(1, 4, size=2))
            k = int(rng.integers(2, 4))
            M = int(rng.integers(1, 5))
            u = rng.uniform(-1, 1, size=(h, w, k))
            got = divmbest(GridCRF(u), M, lam)
            want = brute_force_divmbest(u, M, lam)
            n += 1
            n_ok += all(np.array_equal(g.labels, b) for g, b in zip(got, want)) and len(got) == M
    dt = time.perf_counter() - t
    ok = n_ok == n and n >= 200 and dt < 10
    criterion(2, ok, f"DivMBest matches brute force on {n_ok}/{n} CRFs in {dt:.2f}s")
    assert ok


def test_c03_inference_exactness(criterion):
    rng = np.random.default_rng(11)
    t = time.perf_counter()
    n_ok = 0
    n = 1200
    for trial in range(n):
        if trial % 2:
            w = rng.normal(size=8)
            phi = rng.normal(size=(10, 10, 8))
        else:
            # small integers produce many exact ties
            w = rng.integers(-1, 2, size=8).astype(float)
            phi = rng.integers(0, 2, size=(10, 10, 8)).astype(float)
        n_ok += tuple(infer_phi(MediatorModel(w), phi)) == brute_force_argmax(w, phi)
    dt = time.perf_counter() - t
    ok = n_ok == n and dt < 5
    criterion(3, ok, f"infer matches enumeration on {n_ok}/{n} instances in {dt:.2f}s")
    assert ok


def test_c04_metric_hand_cases(criterion):
    def att(p, g, d):
        return PrepAttachment(p, (0, g), (1, d))

    gt = [att("on", "woman", "couch"), att("next_to", "dog", "woman")]
    checks = {
        "jaccard 7/12": jaccard(np.array([[1, 2], [2, 2]]), np.array([[1, 1], [2, 2]])) == pytest.approx(7 / 12),
        "jaccard identity": jaccard(np.array([[0, 1], [2, 3]]), np.array([[0, 1], [2, 3]])) == 1.0,
        "jaccard disjoint": jaccard(np.full((2, 2), 1), np.full((2, 2), 2)) == 0.0,
        "accuracy 0.5": attachment_accuracy([att("on", "dog", "couch"), att("next_to", "dog", "woman")], gt) == 0.5,
        "accuracy identity": attachment_accuracy(gt, gt) == 1.0,
        "accuracy empty pred": attachment_accuracy([], gt) == 0.0,
    }
    try:
        attachment_accuracy([], [])
        checks["accuracy empty gt raises"] = False
    except ValueError:
        checks["accuracy empty gt raises"] = True
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    criterion(4, ok, f"{len(checks) - len(failed)}/{len(checks)} hand cases" + (f"; failed {failed}" if failed else ""))
    assert ok


def test_c05_trainer_soundness(criterion):
    rng = np.random.default_rng(5)
    data = planted_instances(rng, 300, my=5, mz=5, dim=8)
    tr, te = data[:200], data[200:]
    cfg = TrainConfig(C=1.0, epochs=30)
    model = train(tr, None, cfg)
    train_acc = np.mean([infer_phi(model, d.phi) == argmin_pair(d.loss) for d in tr])
    test_acc = np.mean([infer_phi(model, d.phi) == argmin_pair(d.loss) for d in te])
    obj, obj0 = objective(model.w, tr, cfg, None), objective(np.zeros(8), tr, cfg, None)
    ok = train_acc == 1.0 and test_acc >= 0.95 and obj < obj0
    criterion(5, ok, f"train {train_acc:.3f}, held-out {test_acc:.3f}, objective {obj:.4f} < {obj0:.4f} at w=0")
    assert ok


def test_c06_end_to_end_planted(planted, cv_full, criterion):
    res, dt = cv_full
    med, ind, da = res.mean_row("mediator"), res.mean_row("indep"), res.mean_row("domain_adaptation")
    oracle_ok = all(o.average >= m.average - 1e-12
                    for o, m in zip(res.fold_rows("oracle"), res.fold_rows("mediator")))
    mz_gt1 = sum(r.mz > 1 for r in res.fold_rows("mediator"))
    n = len(planted["records"])
    H, W = planted["cfg"].grid
    checks = [
        n >= 500 and (H, W) == (32, 32) and len(planted["layout"].prepositions) >= 4,
        med.parse - ind.parse >= 0.10,
        med.parse - da.parse >= 0.05,
        med.seg >= ind.seg - 0.005,
        oracle_ok,
        dt < 600,
    ]
    ok = all(checks)
    criterion(6, ok, f"{n} scenes: PPAR mediator {med.parse:.4f} vs indep {ind.parse:.4f} vs DA {da.parse:.4f}; "
                     f"Jaccard {med.seg:.4f} vs {ind.seg:.4f}; oracle>=mediator every fold {oracle_ok}; "
                     f"M_z>1 on {mz_gt1}/10 folds; cv {dt:.0f}s")
    assert ok


def test_c07_structural_equivalences(planted, criterion):
    recs = planted["records"][:150]
    cfg = TrainConfig(C=1.0, epochs=10)
    insts = [r.instance(0.5, 10, 10) for r in recs]
    cy, cz = train_cascade(insts, planted["layout"], cfg)
    # independently trained MEDIATOR-(M,1) and MEDIATOR-(1,M)
    my1 = train([i.truncate(10, 1) for i in insts], planted["layout"], cfg)
    m1z = train([i.truncate(1, 10) for i in insts], planted["layout"], cfg)
    rng = np.random.default_rng(3)
    m11 = MediatorModel(rng.normal(size=planted["layout"].dim), planted["layout"])
    bad = 0
    for r in recs:
        phi = r.phi
        bad += predict_indep([0], [0]) != infer_phi(m11, phi[:1, :1])
        bad += cascade_phi(cy, cz, phi) != PairIndex(infer_phi(my1, phi[:, :1]).i, infer_phi(m1z, phi[:1, :]).j)
    ok = bad == 0 and len(recs) >= 100
    criterion(7, ok, f"{2 * len(recs) - bad}/{2 * len(recs)} INDEP and CASCADE equivalence checks hold")
    assert ok


def test_c08_feature_invariants(criterion):
    rng = np.random.default_rng(8)
    off = LAYOUT.slices["consistency"].start
    fails = {"translation": 0, "zero_block": 0, "scale": 0, "exclusivity": 0}
    n = 1200
    for _ in range(n):
        labels, atts = random_case(rng)
        base = consistency_features(labels, atts, LAYOUT, SIMS)
        dr, dc = (int(v) for v in rng.integers(-4, 5, size=2))
        fails["translation"] += not np.allclose(consistency_features(translate(labels, dr, dc), atts, LAYOUT, SIMS),
                                                base, atol=1e-12)
        fails["scale"] += not np.allclose(consistency_features(upscale(labels), atts, LAYOUT, SIMS), base, atol=1e-12)
        used = {a.preposition for a in atts}
        for p in LAYOUT.prepositions:
            b = LAYOUT.block(p)
            block = base[b.start - off:b.stop - off]
            if p not in used:
                fails["zero_block"] += bool(block.any())
            else:
                fails["exclusivity"] += int(min(block[1], block[2]) != 0 or min(block[3], block[4]) != 0)
    ok = not any(fails.values())
    criterion(8, ok, f"{n} random extractions, violations {fails}")
    assert ok


def test_c09_ablation_direction(planted, cv_full, criterion):
    full = cv_full[0].mean_row("mediator")
    dropped = ex.cross_validate(planted["records"], GRID, ex.CVConfig(alpha=0.5, epochs=20, seed=0,
                                                                      mask=("all_consistency",)),
                                planted["layout"]).mean_row("mediator")
    ok = dropped.parse < full.parse
    criterion(9, ok, f"PPAR full {full.parse:.4f} vs drop all consistency {dropped.parse:.4f}")
    assert ok


def test_c10_reproducibility(tmp_path, criterion):
    d = tmp_path / "data"
    assert main(["gen-data", "--out-dir", str(d), "--n", "80", "--seed", "9"]) == 0
    scenes = str(d / "scenes.jsonl")
    assert main(["gen-hyps", "--scenes", scenes, "--k", "10", "--m", "5"]) == 0
    args = ["--scenes", scenes, "--my", "1,2,5", "--mz", "1,3,5", "--c-grid", "0.1,1", "--seed", "3"]
    assert main(["cv", *args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["cv", *args, "--out-dir", str(tmp_path / "b")]) == 0
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.csv", "val_surface.csv", "outcomes.csv")]
    ok = all(same)
    criterion(10, ok, f"two cv runs, byte-identical metrics.csv/val_surface.csv/outcomes.csv: {same}")
    assert ok
