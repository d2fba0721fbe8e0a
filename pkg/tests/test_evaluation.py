import random
from fractions import Fraction

import numpy as np
import pytest

from phraseforge.builder import Instance, PhraseStructure, PhraseTask
from phraseforge.evaluation import (
    EvalError,
    PairStat,
    PredictionRecord,
    best_substitute,
    evaluate,
    evaluate_by_subset,
    summarize,
)
from phraseforge.geometry import BoundingBox, ImageSize, RleMask, encode
from phraseforge.scene_graph import CategoryVocabulary


def make_pair(task_id, gt_bm, pred_bm, tags=(), category="dog"):
    h, w = gt_bm.shape
    inst = (Instance(encode(gt_bm), BoundingBox(0, 0, 1, 1)),)
    task = PhraseTask(task_id, "img", ImageSize(w, h), PhraseStructure(category), frozenset(tags), instances=inst)
    return task, PredictionRecord(task_id, encode(pred_bm))


def pair_with_counts(task_id, i, u, width=12, tags=()):
    """Masks on a 1-row image with exactly ``i`` shared and ``u`` total pixels."""
    gt = np.zeros((1, width), bool)
    pred = np.zeros((1, width), bool)
    gt[0, :u] = True  # ground truth covers the union, prediction the intersection
    pred[0, :i] = True
    return make_pair(task_id, gt, pred, tags)


def oracle_metrics(pairs):
    n = len(pairs)
    ious = [Fraction(i, u) if u else Fraction(1) for i, u in pairs]
    mean = sum(ious, Fraction(0)) / n
    total_u = sum(u for _, u in pairs)
    cum = Fraction(sum(i for i, _ in pairs), total_u) if total_u else Fraction(0)
    pr = {k: Fraction(sum(x >= Fraction(k) for x in ious), n) for k in ("0.5", "0.7", "0.9")}
    return mean, cum, pr


def test_identical_predictions():
    rng = np.random.default_rng(0)
    pairs = []
    for k in range(5):
        bm = rng.random((6, 7)) < 0.5
        bm[0, 0] = True
        pairs.append(make_pair(f"t{k}", bm, bm))
    r = evaluate([p[0] for p in pairs], [p[1] for p in pairs])
    assert r.mean_iou == r.cum_iou == 1.0
    assert r.pr == {"0.5": 1.0, "0.7": 1.0, "0.9": 1.0}


def test_single_half_pair():
    t, p = pair_with_counts("a", 1, 2)
    r = evaluate([t], [p])
    assert r.mean_iou == r.cum_iou == 0.5
    assert r.pr == {"0.5": 1.0, "0.7": 0.0, "0.9": 0.0}


def test_two_pair_fixture():
    pairs = [pair_with_counts("a", 1, 1), pair_with_counts("b", 0, 10)]
    r = evaluate([p[0] for p in pairs], [p[1] for p in pairs])
    assert (r.total_intersection, r.total_union) == (1, 11)
    assert r.mean_iou == 0.5
    assert r.cum_iou == float(Fraction(1, 11))


def test_empty_vs_empty_convention():
    r = summarize([PairStat("e", 0, 0)])
    assert r.mean_iou == 1.0 and r.n_empty_pairs == 1 and r.cum_iou == 0.0


def test_threshold_boundary_inclusive():
    # IoU exactly 0.7 counts at 0.7 even though 7/10 is not exact in binary
    r = summarize([PairStat("x", 7, 10)])
    assert r.pr["0.7"] == 1.0


def test_random_sets_match_oracle_and_are_monotone():
    rng = random.Random(1)
    for _ in range(1000):
        n = rng.randint(1, 12)
        pairs = []
        for _ in range(n):
            u = rng.randint(0, 30)
            pairs.append((rng.randint(0, u) if u else 0, u))
        r = summarize([PairStat(str(k), i, u) for k, (i, u) in enumerate(pairs)])
        mean, cum, pr = oracle_metrics(pairs)
        assert r.mean_iou == pytest.approx(float(mean), abs=1e-12)
        assert r.cum_iou == float(cum)
        assert r.pr == {k: float(v) for k, v in pr.items()}
        assert r.pr["0.9"] <= r.pr["0.7"] <= r.pr["0.5"]
        for v in (r.mean_iou, r.cum_iou, *r.pr.values()):
            assert 0.0 <= v <= 1.0


def test_singleton_mean_equals_cum():
    for i, u in [(3, 7), (5, 5), (0, 4)]:
        r = summarize([PairStat("s", i, u)])
        assert r.mean_iou == r.cum_iou


def _random_dataset(n, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    tags = ["small", "mid", "large"]
    for k in range(n):
        gt = rng.random((9, 11)) < rng.random()
        gt[4, 5] = True
        pred = rng.random((9, 11)) < rng.random()
        pairs.append(make_pair(f"t{k}", gt, pred, {tags[k % 3], "single"}))
    return pairs


def test_shuffle_invariance_and_parallel_bit_identity():
    pairs = _random_dataset(60, 2)
    tasks, preds = [p[0] for p in pairs], [p[1] for p in pairs]
    base = evaluate(tasks, preds).to_json()
    rng = random.Random(0)
    for _ in range(10):
        order = list(range(len(pairs)))
        rng.shuffle(order)
        shuffled = evaluate([tasks[i] for i in order], [preds[i] for i in reversed(order)]).to_json()
        assert shuffled == base
    assert evaluate(tasks, preds, jobs=4).to_json() == base


def test_subsets():
    pairs = _random_dataset(30, 4)
    tasks, preds = [p[0] for p in pairs], [p[1] for p in pairs]
    r = evaluate_by_subset(tasks, preds)
    overall = evaluate(tasks, preds).to_json()
    assert {k: v for k, v in r.to_json().items() if k != "subsets"} == overall
    assert {k: v for k, v in r.subsets["single"].to_json().items()} == overall
    assert sum(r.subsets[t].n_pairs for t in ("small", "mid", "large")) == r.n_pairs
    assert r.subsets["many"].n_pairs == 0 and r.subsets["many"].mean_iou is None
    assert r.subsets["many"].pr["0.5"] is None


def test_unknown_tag_warns(caplog):
    t, p = pair_with_counts("a", 1, 2, tags=("mystery",))
    with caplog.at_level("WARNING"):
        r = evaluate_by_subset([t], [p])
    assert "mystery" in caplog.text and "mystery" not in r.subsets


@pytest.mark.parametrize("problem", ["missing", "duplicate", "extra", "size"])
def test_prediction_errors(problem):
    t, p = pair_with_counts("a", 1, 2)
    preds = [p]
    if problem == "missing":
        preds = []
    elif problem == "duplicate":
        preds = [p, p]
    elif problem == "extra":
        preds = [p, PredictionRecord("zzz", p.mask)]
    else:
        preds = [PredictionRecord("a", RleMask.empty(ImageSize(3, 3)))]
    with pytest.raises(EvalError):
        evaluate([t], preds)


def test_prediction_json_roundtrip():
    _, p = pair_with_counts("a", 2, 5)
    assert PredictionRecord.from_json(p.to_json()) == p
    assert set(p.to_json()) == {"task_id", "rle"}


# ---------------------------------------------------------------- substitution


def sub_world(assignments, vocab_cats, size=(6, 6)):
    """assignments: list of (source category, {category: bitmap}) with gt = first bitmap of the source."""
    h, w = size
    tasks, channels = [], {}
    for k, (source, gt, chans) in enumerate(assignments):
        task, _ = make_pair(f"s{k}", gt, gt, category=source)
        tasks.append(task)
        stack = np.zeros((len(vocab_cats), h, w))
        for cat, bm in chans.items():
            stack[vocab_cats.index(cat)] = bm.astype(float)
        channels[task.task_id] = stack
    return tasks, channels


def blob(y0, x0, h=2, w=2, shape=(6, 6)):
    bm = np.zeros(shape, bool)
    bm[y0 : y0 + h, x0 : x0 + w] = True
    return bm


def test_substitute_to_covering_category():
    vocab = CategoryVocabulary(("person", "car", "pedestrian"), (10, 5, 1))
    g1, g2 = blob(0, 0), blob(3, 3)
    tasks, ch = sub_world([("pedestrian", g1, {"person": g1, "car": blob(4, 0)}),
                           ("pedestrian", g2, {"person": g2})], vocab.categories)
    e = best_substitute("pedestrian", tasks, ch, vocab)
    assert e.substitute == "person" and e.train_mean_iou == 1.0 and e.n_tasks == 2


def test_substitute_to_itself():
    vocab = CategoryVocabulary(("person", "dog"), (10, 5))
    g = blob(1, 1)
    tasks, ch = sub_world([("dog", g, {"dog": g, "person": blob(4, 4)})], vocab.categories)
    assert best_substitute("dog", tasks, ch, vocab).substitute == "dog"


def test_substitute_tie_goes_to_frequent():
    vocab = CategoryVocabulary(("man", "person", "kid"), (30, 20, 1))
    g1, g2 = blob(0, 0), blob(3, 3)
    tasks, ch = sub_world([("kid", g1, {"person": g1}), ("kid", g2, {"man": g2})], vocab.categories)
    e = best_substitute("kid", tasks, ch, vocab)
    assert e.votes == {"man": 1, "person": 1} and e.substitute == "man"


def test_unseen_source_maps_to_itself():
    vocab = CategoryVocabulary(("a",), (1,))
    e = best_substitute("zebra", [], {}, vocab)
    assert e.substitute == "zebra" and e.n_tasks == 0 and e.train_mean_iou is None
