"""Seeded synthetic data: grounding worlds, scene graphs and simulated annotators.

Used by the test-suite and to regenerate the bundled fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .builder import Instance, PhraseStructure, PhraseTask
from .geometry import BoundingBox, ImageSize, encode
from .model.channels import DetectionRecord, build_attribute_channels, build_channels
from .model.embedding import EmbeddingTable, embed_phrase
from .model.network import Sample
from .scene_graph import ObjectNode, Relationship, SceneGraph
from .seeding import stage_rng

WORLD_CATEGORIES = ("person", "car", "tree", "dog", "sign", "bench")
WORLD_ATTRIBUTES = ("red", "blue", "green", "white")
WORLD_PREDICATE = "above"


@dataclass(frozen=True)
class WorldObject:
    category: int
    attribute: int
    box: BoundingBox


@dataclass(frozen=True)
class WorldTask:
    task_id: str
    kind: str  # "cat", "att" or "rel"
    structure: PhraseStructure
    objects: tuple[WorldObject, ...]
    targets: tuple[int, ...]
    size: int


def _overlaps(box: BoundingBox, others, margin: int = 1) -> bool:
    for o in others:
        if (
            box.x < o.x2 + margin
            and o.x < box.x2 + margin
            and box.y < o.y2 + margin
            and o.y < box.y2 + margin
        ):
            return True
    return False


def _place(rng, size: int, taken, w: int, h: int, region=None, tries: int = 200) -> BoundingBox | None:
    x_lo, y_lo, x_hi, y_hi = region if region else (0, 0, size, size)
    for _ in range(tries):
        if x_hi - w < x_lo or y_hi - h < y_lo:
            return None
        x = int(rng.integers(x_lo, x_hi - w + 1))
        y = int(rng.integers(y_lo, y_hi - h + 1))
        b = BoundingBox(x, y, w, h)
        if not _overlaps(b, taken):
            return b
    return None


def _dims(rng) -> tuple[int, int]:
    return int(rng.integers(5, 9)), int(rng.integers(5, 8))


def _world_task(rng, k: int, kind: str, size: int) -> WorldTask | None:
    n_cat, n_att = len(WORLD_CATEGORIES), len(WORLD_ATTRIBUTES)
    c = int(rng.integers(n_cat))
    objects: list[WorldObject] = []
    boxes: list[BoundingBox] = []

    def add(cat, att, box):
        objects.append(WorldObject(cat, att, box))
        boxes.append(box)
        return len(objects) - 1

    if kind == "cat":
        targets = []
        for _ in range(int(rng.integers(1, 3))):
            b = _place(rng, size, boxes, *_dims(rng))
            if b is None:
                return None
            targets.append(add(c, int(rng.integers(n_att)), b))
        structure = PhraseStructure(WORLD_CATEGORIES[c])
    elif kind == "att":
        a, other = rng.choice(n_att, size=2, replace=False)
        b1 = _place(rng, size, boxes, *_dims(rng))
        if b1 is None:
            return None
        targets = [add(c, int(a), b1)]
        b2 = _place(rng, size, boxes, *_dims(rng))
        if b2 is None:
            return None
        add(c, int(other), b2)
        structure = PhraseStructure(WORLD_CATEGORIES[c], attributes=(WORLD_ATTRIBUTES[a],))
    else:
        s = int(rng.choice([i for i in range(n_cat) if i != c]))
        w, h = _dims(rng)
        sw, sh = _dims(rng)
        # support in the lower part, target sits right on top of it
        sx = int(rng.integers(0, size - max(w, sw) + 1))
        sy = int(rng.integers(h + 1, size - sh + 1))
        support = BoundingBox(sx, sy, sw, sh)
        target = BoundingBox(sx + int(rng.integers(0, max(1, sw - w + 1))), sy - h - int(rng.integers(0, 2)), w, h)
        if target.x2 > size or target.y < 0:
            return None
        targets = [add(c, int(rng.integers(n_att)), target)]
        add(s, int(rng.integers(n_att)), support)
        # same-category distractor well away from the support's column
        far = None
        for _ in range(200):
            cand = _place(rng, size, boxes, *_dims(rng))
            if cand is None:
                break
            if cand.x2 + 3 < support.x or cand.x > support.x2 + 3 or cand.y > support.y2 + 2:
                far = cand
                break
        if far is None:
            return None
        add(c, int(rng.integers(n_att)), far)
        structure = PhraseStructure(WORLD_CATEGORIES[c], relationships=((WORLD_PREDICATE, WORLD_CATEGORIES[s]),))

    excluded = {c} | ({s} if kind == "rel" else set())
    for _ in range(int(rng.integers(1, 3))):
        other = int(rng.choice([i for i in range(n_cat) if i not in excluded]))
        b = _place(rng, size, boxes, *_dims(rng))
        if b is not None:
            add(other, int(rng.integers(n_att)), b)
    return WorldTask(f"world_{k}", kind, structure, tuple(objects), tuple(targets), size)


def grounding_world(n_tasks: int, seed: int, size: int = 32, kinds=("cat", "att", "rel")) -> list[WorldTask]:
    """Tasks whose targets are recoverable from category channels, one colour
    attribute and the single spatial relation ``above``."""
    out = []
    k = 0
    while len(out) < n_tasks:
        rng = stage_rng(seed, "world", k)
        kind = kinds[len(out) % len(kinds)]
        t = _world_task(rng, k, kind, size)
        k += 1
        if t is not None:
            out.append(t)
    return out


def world_detections(task: WorldTask, seed: int) -> list[DetectionRecord]:
    rng = stage_rng(seed, "detections", task.task_id)
    size = ImageSize(task.size, task.size)
    dets = []
    n_att = len(WORLD_ATTRIBUTES)
    for o in task.objects:
        attrs = [(o.attribute, float(rng.uniform(0.7, 1.0)))]
        wrong = int((o.attribute + 1 + rng.integers(n_att - 1)) % n_att)
        attrs.append((wrong, float(rng.uniform(0.0, 0.3))))
        dets.append(DetectionRecord(o.category, float(rng.uniform(0.7, 1.0)), o.box.to_mask(size), tuple(attrs)))
    return dets


def world_gt(task: WorldTask) -> np.ndarray:
    gt = np.zeros((task.size, task.size), dtype=bool)
    for i in task.targets:
        b = task.objects[i].box
        gt[b.y : b.y2, b.x : b.x2] = True
    return gt


def world_table(dim: int, seed: int) -> EmbeddingTable:
    words = list(WORLD_CATEGORIES) + list(WORLD_ATTRIBUTES) + [WORLD_PREDICATE]
    return EmbeddingTable.random(words, dim, seed)


def world_samples(tasks, table: EmbeddingTable, seed: int) -> list[Sample]:
    out = []
    for t in tasks:
        dets = world_detections(t, seed)
        out.append(
            Sample(
                t.task_id,
                build_channels(dets, len(WORLD_CATEGORIES), t.size, t.size),
                build_attribute_channels(dets, len(WORLD_ATTRIBUTES), t.size, t.size),
                embed_phrase(t.structure, table),
                world_gt(t),
            )
        )
    return out


# ---------------------------------------------------------------- scene graphs


SG_CATEGORIES = ("man", "person", "car", "tree", "dog", "bear", "sign", "window", "sky", "grass", "plate", "chairs")
SG_ATTRIBUTES = ("red", "blue", "tall", "small", "wooden", "white", "standing", "parked")
SG_PREDICATES = ("on", "near", "holding", "behind")


def scene_graphs(n_images: int, seed: int, width: int = 64, height: int = 48) -> list[SceneGraph]:
    """Random VG-like graphs with repeated categories so every heuristic gets exercised."""
    graphs = []
    size = ImageSize(width, height)
    for i in range(n_images):
        rng = stage_rng(seed, "scene_graph", i)
        n = int(rng.integers(3, 9))
        raw = []
        for j in range(n):
            w = int(rng.integers(4, width // 2))
            h = int(rng.integers(4, height // 2))
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            cat = SG_CATEGORIES[int(rng.integers(len(SG_CATEGORIES) // 2 + i % 6))]
            names = [cat]
            if cat == "man" and rng.random() < 0.5:
                names.append("person")
            attrs = sorted({SG_ATTRIBUTES[int(a)] for a in rng.integers(len(SG_ATTRIBUTES), size=int(rng.integers(0, 3)))})
            raw.append((j, BoundingBox(x, y, w, h), names, attrs))
        objects = []
        for j, box, names, attrs in raw:
            rels = []
            if n > 1 and rng.random() < 0.5:
                other = int(rng.integers(n - 1))
                other = other + (other >= j)
                rels.append(Relationship(SG_PREDICATES[int(rng.integers(len(SG_PREDICATES)))], other))
            objects.append(ObjectNode(j, box, tuple(names), tuple(attrs), tuple(rels)))
        graphs.append(SceneGraph(f"img{i:03d}", size, tuple(objects)))
    return graphs


def simulate_annotations(
    tasks: list[PhraseTask], seed: int, n_good: int = 3, n_bad: int = 1, skip_rate: float = 0.1
) -> list[dict]:
    """Annotation records ``{task_id, worker_id, polygons}``.

    Good workers trace the task's VG boxes with +-1 px jitter; bad workers
    draw a random rectangle.  Each task gets two annotators; roughly
    ``skip_rate`` of tasks are skipped by everyone.
    """
    workers = [f"good{k}" for k in range(n_good)] + [f"bad{k}" for k in range(n_bad)]
    records = []
    for t in tasks:
        rng = stage_rng(seed, "annotate", t.task_id)
        if rng.random() < skip_rate or not t.vg_boxes:
            continue
        picks = rng.choice(len(workers), size=min(2, len(workers)), replace=False)
        for wi in sorted(int(p) for p in picks):
            wid = workers[wi]
            polys = []
            if wid.startswith("good"):
                for b in t.vg_boxes:
                    j = rng.integers(-1, 2, size=4)
                    x0 = float(max(0, b.x + j[0]))
                    y0 = float(max(0, b.y + j[1]))
                    x1 = float(min(t.image_size.width, b.x2 + j[2]))
                    y1 = float(min(t.image_size.height, b.y2 + j[3]))
                    polys.append([x0, y0, x1, y0, x1, y1, x0, y1])
            else:
                w, h = t.image_size.width, t.image_size.height
                x0, y0 = float(rng.integers(0, w // 2)), float(rng.integers(0, h // 2))
                polys.append([x0, y0, x0 + w / 4, y0, x0 + w / 4, y0 + h / 4, x0, y0 + h / 4])
            records.append({"task_id": t.task_id, "worker_id": wid, "polygons": polys})
    return records


def bitmap_from_boxes(boxes, size: ImageSize):
    m = np.zeros((size.height, size.width), dtype=bool)
    for b in boxes:
        c = b.clamp(size)
        m[c.y : c.y2, c.x : c.x2] = True
    return encode(m)


def world_records(tasks, seed: int) -> tuple[list[dict], list[dict]]:
    """World tasks as ``(phrase-task records, detection records)`` JSON, one image per task."""
    task_recs, det_recs = [], []
    for t in tasks:
        size = ImageSize(t.size, t.size)
        instances = tuple(Instance(t.objects[i].box.to_mask(size), t.objects[i].box) for i in t.targets)
        tags = frozenset({{"cat": "cat+", "att": "att+", "rel": "rel+"}[t.kind]})
        task = PhraseTask(t.task_id, t.task_id, size, t.structure, tags, heuristic=0,
                          vg_boxes=tuple(t.objects[i].box for i in t.targets), instances=instances)
        task_recs.append(task.to_json())
        det_recs.append({"image_id": t.task_id, "detections": [d.to_json() for d in world_detections(t, seed)]})
    return task_recs, det_recs
