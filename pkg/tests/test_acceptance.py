"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines are
also printed when output capture is on.
"""

from __future__ import annotations

import math
import time
from fractions import Fraction

import numpy as np

from phraseforge.builder import PhraseStructure, PhraseTask, SamplerParams, build_pool, generate_phrase, refine_instances, sample_boxes
from phraseforge.evaluation import PredictionRecord, evaluate
from phraseforge.geometry import (
    BoundingBox,
    ImageSize,
    PolygonRegion,
    box_iou,
    decode,
    encode,
    intersection_union,
    mask_iou,
    rasterize,
)
from phraseforge.model import layers as L
from phraseforge.model.channels import DetectionRecord, build_channels
from phraseforge.model.network import ModelConfig
from phraseforge.model.train import TrainConfig, mean_iou, predict_scores, select_threshold, train
from phraseforge.qc import agreement, worker_threshold
from phraseforge.synthetic import grounding_world, world_samples, world_table
from oracles import box_pixels, raster_oracle_fast
from toy import finite_difference_errors, toy_problem

def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def _pair(task_id, gt_bm, pred_bm):
    h, w = gt_bm.shape
    from phraseforge.builder import Instance

    task = PhraseTask(task_id, "img", ImageSize(w, h), PhraseStructure("thing"),
                      instances=(Instance(encode(gt_bm), BoundingBox(0, 0, 1, 1)),))
    return task, PredictionRecord(task_id, encode(pred_bm))


def test_metric_formulas(capsys):
    start = time.perf_counter()
    # (I=1, U=1) and (I=0, U=10) on a 1x12 image
    g1, p1 = np.zeros((1, 12), bool), np.zeros((1, 12), bool)
    g1[0, 0] = p1[0, 0] = True
    g2, p2 = np.zeros((1, 12), bool), np.zeros((1, 12), bool)
    g2[0, :10] = True
    tasks, preds = zip(_pair("a", g1, p1), _pair("b", g2, p2))
    r = evaluate(list(tasks), list(preds))
    formula_ok = (r.total_intersection, r.total_union) == (1, 11) and r.mean_iou == 0.5 and r.cum_iou == float(Fraction(1, 11))

    rng = np.random.default_rng(0)
    gts = [rng.random((4, 4)) < 0.5 for _ in range(4)]
    for g in gts:
        g[0, 0] = True
    base = [_pair(f"t{k}", g, g)[0] for k, g in enumerate(gts)]
    monotone = 0
    for _ in range(1000):
        preds = [PredictionRecord(t.task_id, encode(rng.random((4, 4)) < rng.random())) for t in base]
        pr = evaluate(base, preds).pr
        monotone += pr["0.9"] <= pr["0.7"] <= pr["0.5"]
    elapsed = time.perf_counter() - start
    ok = formula_ok and monotone == 1000 and elapsed < 1.0
    verdict(capsys, "metric formulas", ok,
            f"mean={r.mean_iou} cum={r.cum_iou:.6f} (1/11), monotone {monotone}/1000, {elapsed:.2f}s < 1s")


def _random_ring(rng, w, h):
    n = int(rng.integers(3, 10))
    xs, ys = rng.uniform(-4, w + 4, n), rng.uniform(-4, h + 4, n)
    if rng.random() < 0.4:
        xs, ys = np.round(xs), np.round(ys)
    return list(zip(xs.tolist(), ys.tolist()))


def test_geometry_oracle_equivalence(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(500):
        w, h = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        rings_a = [_random_ring(rng, w, h) for _ in range(int(rng.integers(1, 3)))]
        rings_b = [_random_ring(rng, w, h)]
        pa = PolygonRegion(tuple(tuple(r) for r in rings_a), w, h)
        pb = PolygonRegion(tuple(tuple(r) for r in rings_b), w, h)
        ma, mb = rasterize(pa), rasterize(pb)
        oa, ob = raster_oracle_fast(rings_a, w, h), raster_oracle_fast(rings_b, w, h)
        mismatches += not np.array_equal(decode(ma), oa)
        mismatches += not np.array_equal(decode(mb), ob)
        size = ImageSize(w, h)
        ba = BoundingBox(int(rng.integers(0, w)), int(rng.integers(0, h)), int(rng.integers(0, w + 1)), int(rng.integers(0, h + 1))).clamp(size)
        bb = BoundingBox(int(rng.integers(0, w)), int(rng.integers(0, h)), int(rng.integers(0, w + 1)), int(rng.integers(0, h + 1))).clamp(size)
        sa, sb = box_pixels(ba.x, ba.y, ba.w, ba.h, w, h), box_pixels(bb.x, bb.y, bb.w, bb.h, w, h)
        box_expected = Fraction(len(sa & sb), len(sa | sb)) if sa | sb else Fraction(0)
        mismatches += box_iou(ba, bb) != float(box_expected)
        pairs = [(ma, mb, oa, ob), (ma, ba.to_mask(size), oa, _box_bitmap(sa, w, h))]
        for x, y, ox, oy in pairs:
            i, u = int(np.count_nonzero(ox & oy)), int(np.count_nonzero(ox | oy))
            mismatches += intersection_union(x, y) != (i, u)
            mismatches += mask_iou(x, y) != (i / u if u else 0.0)
    elapsed = time.perf_counter() - start
    verdict(capsys, "geometry oracle equivalence", mismatches == 0 and elapsed < 30,
            f"{mismatches} mismatches over 500 polygon/box cases, {elapsed:.1f}s < 30s")


def _box_bitmap(pixels, w, h):
    bm = np.zeros((h, w), bool)
    for x, y in pixels:
        bm[y, x] = True
    return bm


def test_qc_formulas(capsys):
    rng = np.random.default_rng(7)
    size = ImageSize(24, 24)
    worst = 0.0
    for _ in range(100):
        bm = rng.random((24, 24)) < rng.uniform(0.05, 0.7)
        bm[int(rng.integers(24)), int(rng.integers(24))] = True
        boxes = [BoundingBox(int(rng.integers(0, 20)), int(rng.integers(0, 20)), int(rng.integers(1, 12)), int(rng.integers(1, 12)))
                 for _ in range(int(rng.integers(1, 4)))]
        ann = {(int(x), int(y)) for y, x in zip(*np.nonzero(bm))}
        ref = set().union(*(box_pixels(b.x, b.y, b.w, b.h, 24, 24) for b in boxes))
        inter = len(ann & ref)
        expected = inter / len(ann) + 0.8 * inter / len(ann | ref)
        worst = max(worst, abs(agreement(encode(bm), boxes) - expected))
        n = int(rng.integers(0, 40))
        worst = max(worst, abs(worker_threshold(n) - max(0.7, 0.95 - 0.05 * n)))
    exact = BoundingBox(3, 3, 6, 6)
    examples = (
        abs(worker_threshold(1) - 0.90) < 1e-12
        and abs(worker_threshold(10) - 0.70) < 1e-12
        and abs(agreement(exact.to_mask(size), [exact]) - 1.8) < 1e-12
    )
    ok = worst <= 4 * np.finfo(float).eps and examples
    verdict(capsys, "QC formulas", ok, f"max |error| {worst:.2e} over 100 cases; n=1->0.90, n=10->0.70, exact->1.8: {examples}")


def test_phrase_heuristics(capsys):
    from test_builder import CASES, graph, oracle_heuristic

    wrong = []
    for k, (objs, target, heuristic, phrase, tag) in enumerate(CASES):
        task = generate_phrase(graph(objs), target, np.random.default_rng(0))
        disc = task.subset_tags & {"cat+", "att+", "rel+"}
        good = (
            oracle_heuristic(objs, target) == heuristic == task.heuristic
            and disc == ({tag} if tag else set())
            and (heuristic == 1 or task.phrase_text == phrase)
        )
        if not good:
            wrong.append(k)
    named = {CASES[2][3], CASES[3][3]}
    ok = not wrong and len(CASES) >= 20 and named == {"wizard bear", "bear holding paper"}
    verdict(capsys, "phrase-generation heuristics", ok,
            f"{len(CASES) - len(wrong)}/{len(CASES)} constructed graphs correct (incl. {sorted(named)})")


def test_sampler_monte_carlo(capsys):
    from test_builder import graph

    # pool of two: r = 0.03 and r = 0.25; plus one too small, one too large and one overlapping
    g = graph([
        (1, (0, 0, 30, 10), ["a"], [], []),
        (2, (50, 50, 50, 50), ["b"], [], []),
        (3, (0, 80, 10, 10), ["c"], [], []),
        (4, (0, 0, 97, 97), ["d"], [], []),
        (5, (55, 55, 50, 45), ["e"], [], []),
    ])
    params = SamplerParams(boxes_per_image_target=1)
    pool = [o.id for o in build_pool(g, params)]
    wa, wb = math.sqrt(min(0.1, 300 / 10000)), math.sqrt(min(0.1, 2500 / 10000))
    p_a = wa / (wa + wb)
    n = 10_000
    rng = np.random.default_rng(31)
    draws = [sample_boxes(g, params, rng)[0] for _ in range(n)]
    count = draws.count(1)
    sigma = math.sqrt(n * p_a * (1 - p_a))
    z = (count - n * p_a) / sigma
    invalid = sum(d not in (1, 2) for d in draws)
    ok = pool == [1, 2] and abs(z) <= 3 and invalid == 0
    verdict(capsys, "sampler Monte Carlo", ok,
            f"P(a)={p_a:.4f}, observed {count}/{n} (z={z:+.2f}), excluded boxes drawn {invalid} times")


def test_refinement_conservation(capsys):
    size = ImageSize(48, 48)
    rng = np.random.default_rng(5)
    failures = 0
    splits = merges = 0
    for case in range(200):
        rings = []
        for _ in range(int(rng.integers(1, 6))):
            x0, y0 = rng.uniform(0, 36, 2)
            x1, y1 = x0 + rng.uniform(1, 16), y0 + rng.uniform(1, 16)
            rings.append([(x0, y0), (x1, y0), (x1, y1), (x0, y1)] if rng.random() < 0.6 else [(x0, y0), (x1, y0), ((x0 + x1) / 2, y1)])
        vg = [BoundingBox(int(rng.integers(0, 36)), int(rng.integers(0, 36)), int(rng.integers(3, 14)), int(rng.integers(3, 14)))
              for _ in range(int(rng.integers(0, 4)))]
        if case % 4 == 0:
            # a polygon that covers two similar boxes, to force the split path
            vg = [BoundingBox(4, 4, 8, 8), BoundingBox(16, 4, 9, 8)]
            rings.append([(4.0, 4.0), (25.0, 4.0), (25.0, 12.0), (4.0, 12.0)])
        polys = [PolygonRegion((tuple(r),), 48, 48) for r in rings]
        task = PhraseTask("t", "i", size, PhraseStructure("dogs" if case % 2 == 0 else "dog"))
        out = refine_instances(polys, task, vg)
        expected = np.zeros((48, 48), bool)
        for r in rings:
            expected |= raster_oracle_fast([r], 48, 48)
        got = np.zeros_like(expected)
        for inst in out.instances:
            got |= decode(inst.mask)
        failures += not np.array_equal(got, expected)
        for p in out.provenance:
            splits += p["op"] == "split"
            merges += p["op"].startswith("merge")
    ok = failures == 0 and splits > 0 and merges > 0
    verdict(capsys, "instance refinement conservation", ok,
            f"{200 - failures}/200 cases conserve the pixel union ({splits} splits, {merges} merges exercised)")


def test_model_math(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    chan_bad = 0
    for _ in range(30):
        h, w, n = int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(1, 5))
        dets = [DetectionRecord(int(rng.integers(n)), float(rng.random()), encode(rng.random((h, w)) < 0.4))
                for _ in range(int(rng.integers(0, 10)))]
        stack = build_channels(dets, n, h, w)
        masks = [decode(d.mask) for d in dets]
        for c in range(n):
            for y in range(h):
                for x in range(w):
                    want = max([d.score for d, m in zip(dets, masks) if d.category_index == c and m[y, x]], default=0.0)
                    chan_bad += stack[c, y, x] != want
    lin = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 8))
        stack = rng.random((n, 8, 8))
        a1, a2 = rng.normal(size=n), rng.normal(size=n)
        lin = max(lin, float(np.max(np.abs(L.attend(stack, a1 + a2) - L.attend(stack, a1) - L.attend(stack, a2)))))
    F = L.combined_features(rng.random((8, 8)), rng.random((8, 8)), rng.random((8, 8)))
    onehot_ok = all(np.array_equal(L.weighted_sum(F, np.eye(L.N_COMBINED)[t]), F[t]) for t in range(L.N_COMBINED))
    params, samples = toy_problem()
    errors = list(finite_difference_errors(params, samples))
    worst = max(e[-1] for e in errors)
    elapsed = time.perf_counter() - start
    ok = chan_bad == 0 and lin <= 1e-12 and onehot_ok and worst < 1e-3 and elapsed < 60
    verdict(capsys, "model math", ok,
            f"channel mismatches {chan_bad}, attend linearity {lin:.1e}, one-hot exact {onehot_ok}, "
            f"FD max rel err {worst:.1e} over {len(errors)} params, {elapsed:.1f}s < 60s")


def test_learning_smoke(capsys):
    start = time.perf_counter()
    table = world_table(16, 0)
    train_set = world_samples(grounding_world(200, 1), table, 0)
    val_set = world_samples(grounding_world(90, 2), table, 0)
    test_set = world_samples(grounding_world(90, 3), table, 0)
    tcfg = TrainConfig(learning_rate=0.05, pretrain_epochs=5, joint_epochs=10, batch_size=8)
    results = {}
    for label, modules in (("cat", ("cat",)), ("cat+att+rel", ("cat", "att", "rel"))):
        cfg = ModelConfig(6, 4, embed_dim=16, hidden_dim=32, ensemble_hidden=32, relation_channels=8, modules=modules)
        params, _ = train(train_set, cfg, tcfg)
        t, _ = select_threshold(predict_scores(val_set, params, cfg), [s.gt for s in val_set])
        results[label] = (mean_iou(test_set, params, cfg, t), t)
    elapsed = time.perf_counter() - start
    full, cat = results["cat+att+rel"][0], results["cat"][0]
    ok = full >= 0.90 and full - cat > 0 and elapsed < 600
    verdict(capsys, "desk-scale learning smoke test", ok,
            f"full mean-IoU {full:.3f} (t={results['cat+att+rel'][1]}), cat-only {cat:.3f}, margin {full - cat:+.3f}, {elapsed:.0f}s < 600s")


def test_cli_determinism(capsys, tmp_path):
    import hashlib
    from pathlib import Path

    from test_cli import dataset_pipeline, model_stages

    def digests(files):
        out = {}
        for name, p in files.items():
            out[name] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
            m = Path(str(p) + ".manifest.json")
            if m.exists():
                out[name + ".manifest"] = hashlib.sha256(m.read_bytes()).hexdigest()
        return out

    runs = [digests(dataset_pipeline(tmp_path / f"d{k}", jobs=j)) for k, j in enumerate((1, 1, 3))]
    world = tmp_path / "world"
    world.mkdir()
    _world_inputs(world)
    model_runs = [digests(model_stages(world, tmp_path / f"m{k}", j)) for k, j in enumerate((1, 1, 2))]
    same = runs[0] == runs[1] == runs[2] and model_runs[0] == model_runs[1] == model_runs[2]
    stages = "sample, phrases, qc, refine, eval, train, predict, substitute, channels"
    verdict(capsys, "CLI determinism", same,
            f"{len(runs[0]) + len(model_runs[0])} artifacts byte-identical across reruns and --jobs 1/2/3 ({stages})")


def _world_inputs(d):
    from phraseforge.jsonl import write_json, write_jsonl
    from phraseforge.scene_graph import CategoryVocabulary
    from phraseforge.synthetic import WORLD_CATEGORIES, world_records

    tr, tr_det = world_records(grounding_world(18, 4), 0)
    va, va_det = world_records(grounding_world(9, 5), 0)
    write_jsonl(d / "train.jsonl", tr)
    write_jsonl(d / "val.jsonl", va)
    write_jsonl(d / "det.jsonl", tr_det + va_det)
    world_table(8, 0).save(d / "emb.txt")
    write_json(d / "cfg.json", {
        "model": {"n_categories": 6, "n_attributes": 4, "embed_dim": 8, "hidden_dim": 8, "ensemble_hidden": 8,
                  "relation_channels": 2, "channel_scale": 2},
        "train": {"pretrain_epochs": 1, "joint_epochs": 1, "batch_size": 4},
    })
    write_json(d / "vocab.json", CategoryVocabulary(WORLD_CATEGORIES, (6, 5, 4, 3, 2, 1)).to_json())

