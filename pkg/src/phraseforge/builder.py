"""Referring-phrase dataset construction.

Three stages operate on one scene graph at a time:

* box sampling: size filter, greedy non-overlapping pool, weighted draws
  without replacement with a per-category penalty;
* phrase generation: the four discriminative heuristics, in order;
* instance refinement: merge/split of annotated polygons into instances,
  followed by subset tagging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    BoundingBox,
    ImageSize,
    PolygonRegion,
    RleMask,
    bitmap_bbox,
    box_iou,
    decode,
    encode,
    rasterize_bitmap,
)
from .scene_graph import CategoryVocabulary, ObjectNode, SceneGraph, normalize_name, relative_size
from .seeding import stage_rng

DISCRIMINATIVE_TAGS = ("cat+", "att+", "rel+")
CONTENT_TAGS = ("att", "rel")
COUNT_TAGS = ("single", "multi", "many")
SIZE_TAGS = ("small", "mid", "large")
KIND_TAGS = ("stuff", "obj")
FREQ_TAGS = ("freq_1_100", "freq_101_500", "freq_500+")
ALL_TAGS = DISCRIMINATIVE_TAGS + CONTENT_TAGS + COUNT_TAGS + SIZE_TAGS + KIND_TAGS + FREQ_TAGS


class BuilderError(ValueError):
    pass


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplerParams:
    r_min: float = 0.02
    r_max: float = 0.9
    overlap_iou: float = 0.2
    weight_cap: float = 0.1
    category_penalty: float = 5.0
    boxes_per_image_target: int = 5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.r_min < self.r_max <= 1.0:
            raise BuilderError("need 0 <= r_min < r_max <= 1")
        if not 0.0 < self.overlap_iou < 1.0:
            raise BuilderError("overlap_iou must lie in (0, 1)")
        if self.category_penalty <= 1.0:
            raise BuilderError("category_penalty must exceed 1")
        if self.boxes_per_image_target < 0:
            raise BuilderError("boxes_per_image_target must be >= 0")


def sample_weight(r: float, weight_cap: float = 0.1) -> float:
    return math.sqrt(min(weight_cap, r))


def build_pool(graph: SceneGraph, params: SamplerParams) -> list[ObjectNode]:
    """Size-filtered boxes added in input order, skipping any that overlap the pool."""
    pool: list[ObjectNode] = []
    for obj in graph.objects:
        r = relative_size(obj.box, graph.image_size)
        if r < params.r_min or r > params.r_max:
            continue
        if any(box_iou(obj.box, p.box) > params.overlap_iou for p in pool):
            continue
        pool.append(obj)
    return pool


def sample_boxes(
    graph: SceneGraph, params: SamplerParams, rng: np.random.Generator | None = None
) -> list:
    """Ids of the sampled boxes, in draw order."""
    if rng is None:
        rng = stage_rng(params.rng_seed, "sample", graph.image_id)
    pool = build_pool(graph, params)
    weights = [sample_weight(relative_size(o.box, graph.image_size), params.weight_cap) for o in pool]
    remaining = list(range(len(pool)))
    chosen = []
    n_draws = min(len(pool), params.boxes_per_image_target)
    for _ in range(n_draws):
        w = np.array([weights[i] for i in remaining], dtype=np.float64)
        total = w.sum()
        if total <= 0.0:
            break
        u = rng.random() * total
        k = int(np.searchsorted(np.cumsum(w), u, side="right"))
        k = min(k, len(remaining) - 1)
        picked = remaining.pop(k)
        chosen.append(pool[picked].id)
        picked_names = set(pool[picked].names)
        for i in remaining:
            if picked_names.intersection(pool[i].names):
                weights[i] /= params.category_penalty
    return chosen


# ---------------------------------------------------------------- phrases


@dataclass(frozen=True)
class PhraseStructure:
    category: str
    attributes: tuple[str, ...] = ()
    # (predicate, supporting category) pairs; heuristic 4 may produce several
    relationships: tuple[tuple[str, str], ...] = ()

    @property
    def relationship(self) -> tuple[str, str] | None:
        return self.relationships[0] if self.relationships else None

    def render(self) -> str:
        words = list(self.attributes) + [self.category]
        for predicate, support in self.relationships:
            words += [predicate, support]
        return " ".join(" ".join(words).lower().split())

    def to_json(self) -> dict:
        out: dict = {"category": self.category, "attributes": list(self.attributes)}
        if self.relationships:
            p, s = self.relationships[0]
            out["relationship"] = {"predicate": p, "supporting_category": s}
        if len(self.relationships) > 1:
            out["extra_relationships"] = [
                {"predicate": p, "supporting_category": s} for p, s in self.relationships[1:]
            ]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PhraseStructure":
        rels = []
        if obj.get("relationship"):
            rels.append((obj["relationship"]["predicate"], obj["relationship"]["supporting_category"]))
        for r in obj.get("extra_relationships", []):
            rels.append((r["predicate"], r["supporting_category"]))
        return cls(
            normalize_name(obj["category"]),
            tuple(normalize_name(a) for a in obj.get("attributes", [])),
            tuple((normalize_name(p), normalize_name(s)) for p, s in rels),
        )


@dataclass(frozen=True)
class Instance:
    mask: RleMask
    box: BoundingBox

    def to_json(self) -> dict:
        return {"rle": self.mask.to_json(), "box": self.box.to_list()}

    @classmethod
    def from_json(cls, obj: dict) -> "Instance":
        return cls(RleMask.from_json(obj["rle"]), BoundingBox(*obj["box"]))


@dataclass(frozen=True)
class PhraseTask:
    task_id: str
    image_id: int | str
    image_size: ImageSize
    structure: PhraseStructure
    subset_tags: frozenset[str] = frozenset()
    source_box_id: int | str | None = None
    heuristic: int = 0
    vg_boxes: tuple[BoundingBox, ...] = ()
    instances: tuple[Instance, ...] = ()

    @property
    def phrase_text(self) -> str:
        return self.structure.render()

    @property
    def category(self) -> str:
        return self.structure.category

    def gt_mask(self) -> RleMask:
        if not self.instances:
            raise BuilderError(f"task {self.task_id!r} has no target instances")
        acc = np.zeros((self.image_size.height, self.image_size.width), dtype=bool)
        for inst in self.instances:
            acc |= decode(inst.mask)
        return encode(acc)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "image_id": self.image_id,
            "width": self.image_size.width,
            "height": self.image_size.height,
            "phrase": self.phrase_text,
            "structure": self.structure.to_json(),
            "heuristic": self.heuristic,
            "source_box_id": self.source_box_id,
            "vg_boxes": [b.to_list() for b in self.vg_boxes],
            "subset_tags": sorted(self.subset_tags),
            "instances": [i.to_json() for i in self.instances],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhraseTask":
        return cls(
            task_id=str(obj["task_id"]),
            image_id=obj["image_id"],
            image_size=ImageSize(int(obj["width"]), int(obj["height"])),
            structure=PhraseStructure.from_json(obj["structure"]),
            subset_tags=frozenset(obj.get("subset_tags", [])),
            source_box_id=obj.get("source_box_id"),
            heuristic=int(obj.get("heuristic", 0)),
            vg_boxes=tuple(BoundingBox(*b) for b in obj.get("vg_boxes", [])),
            instances=tuple(Instance.from_json(i) for i in obj.get("instances", [])),
        )


def relationship_descriptions(graph: SceneGraph, obj: ObjectNode) -> list[tuple[str, str]]:
    """``(predicate, supporting category)`` pairs; the support is named by its first name."""
    out = []
    for rel in obj.relationships:
        desc = (rel.predicate, graph.get(rel.object_id).names[0])
        if desc not in out:
            out.append(desc)
    return out


def unique_names(graph: SceneGraph, target: ObjectNode) -> list[str]:
    """Names of the target carried by no other box in the graph."""
    others = set()
    for o in graph.objects:
        if o.id != target.id:
            others.update(o.names)
    return [n for n in dict.fromkeys(target.names) if n not in others]


def same_category_boxes(graph: SceneGraph, target: ObjectNode) -> list[ObjectNode]:
    names = set(target.names)
    return [o for o in graph.objects if o.id != target.id and names.intersection(o.names)]


def unique_attributes(graph: SceneGraph, target: ObjectNode) -> list[str]:
    taken = set()
    for o in same_category_boxes(graph, target):
        taken.update(o.attributes)
    return [a for a in dict.fromkeys(target.attributes) if a not in taken]


def unique_relationships(graph: SceneGraph, target: ObjectNode) -> list[tuple[str, str]]:
    taken = set()
    for o in same_category_boxes(graph, target):
        taken.update(relationship_descriptions(graph, o))
    return [d for d in relationship_descriptions(graph, target) if d not in taken]


def matching_boxes(graph: SceneGraph, structure: PhraseStructure) -> list[ObjectNode]:
    """Boxes consistent with every slot of the phrase (category, attributes, relationships)."""
    out = []
    for o in graph.objects:
        if structure.category not in o.names:
            continue
        if not set(structure.attributes) <= set(o.attributes):
            continue
        if not set(structure.relationships) <= set(relationship_descriptions(graph, o)):
            continue
        out.append(o)
    return out


def generate_phrase(graph: SceneGraph, target_id, rng: np.random.Generator) -> PhraseTask:
    target = graph.get(target_id)
    attrs = list(dict.fromkeys(target.attributes))
    rels = relationship_descriptions(graph, target)

    names = unique_names(graph, target)
    if names:
        heuristic, tag = 1, "cat+"
        modifiers = [("att", a) for a in attrs] + [("rel", r) for r in rels]
        structure = PhraseStructure(names[0])
        if modifiers:
            kind, value = modifiers[int(rng.integers(len(modifiers)))]
            if kind == "att":
                structure = PhraseStructure(names[0], attributes=(value,))
            else:
                structure = PhraseStructure(names[0], relationships=(value,))
    elif unique_attributes(graph, target):
        heuristic, tag = 2, "att+"
        structure = PhraseStructure(target.names[0], attributes=(unique_attributes(graph, target)[0],))
    elif unique_relationships(graph, target):
        heuristic, tag = 3, "rel+"
        structure = PhraseStructure(target.names[0], relationships=(unique_relationships(graph, target)[0],))
    else:
        heuristic, tag = 4, None
        name = target.names[int(rng.integers(len(target.names)))]
        structure = PhraseStructure(name, tuple(attrs), tuple(rels))

    tags = set()
    if tag:
        tags.add(tag)
    if structure.attributes:
        tags.add("att")
    if structure.relationships:
        tags.add("rel")
    return PhraseTask(
        task_id=f"{graph.image_id}_{target.id}",
        image_id=graph.image_id,
        image_size=graph.image_size,
        structure=structure,
        subset_tags=frozenset(tags),
        source_box_id=target.id,
        heuristic=heuristic,
        vg_boxes=tuple(o.box for o in matching_boxes(graph, structure)),
    )


def generate_phrases(graph: SceneGraph, box_ids: Iterable, global_seed: int) -> list[PhraseTask]:
    """One task per sampled box; the RNG stream depends only on (seed, image)."""
    rng = stage_rng(global_seed, "phrases", graph.image_id)
    return [generate_phrase(graph, b, rng) for b in box_ids]


# ---------------------------------------------------------------- refinement


IRREGULAR_SINGULARS = frozenset(
    """
    glass grass bus dress class boss gas lens cross moss canvas chess mattress bass compass
    tennis iris cactus octopus walrus circus status bonus campus virus atlas bias lotus
    hippopotamus asparagus hummus citrus abacus platypus fungus surplus bus plus series species
    news mess dais
    """.split()
)
IRREGULAR_PLURALS = frozenset("people men women children feet teeth mice geese oxen police".split())
PLURAL_MARKERS = frozenset("many several multiple two three four five six some group".split())


def is_plural(structure: PhraseStructure) -> bool:
    if PLURAL_MARKERS.intersection(w for a in structure.attributes for w in a.split()):
        return True
    head = structure.category.split()[-1] if structure.category else ""
    if head in IRREGULAR_PLURALS:
        return True
    if head in IRREGULAR_SINGULARS or head.endswith("ss") or head.endswith("us"):
        return False
    return head.endswith("s")


@dataclass(frozen=True)
class RefineParams:
    merge_box_iou: float = 0.7
    merge_area_ratio: float = 0.2
    merge_mask_iou: float = 0.1
    split_coverage: float = 0.8
    split_area_ratio: float = 2.0


@dataclass(frozen=True)
class InstanceSet:
    instances: tuple[Instance, ...]
    provenance: tuple[dict, ...] = ()


def _bitmap_iou(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a)) + int(np.count_nonzero(b)) - inter
    return inter, union


def _merge_pass(groups: list, should_merge, label: str, provenance: list) -> list:
    groups = list(groups)
    changed = True
    while changed:
        changed = False
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if should_merge(groups[i][0], groups[j][0]):
                    provenance.append({"op": label, "polygons": [groups[i][1], groups[j][1]]})
                    groups[i] = (groups[i][0] | groups[j][0], groups[i][1] + groups[j][1])
                    del groups[j]
                    changed = True
                    break
            if changed:
                break
    return groups


def refine_instances(
    polygons: Sequence[PolygonRegion],
    task: PhraseTask,
    vg_boxes: Sequence[BoundingBox],
    params: RefineParams = RefineParams(),
) -> InstanceSet:
    size = task.image_size
    groups = []
    for k, poly in enumerate(polygons):
        if (poly.image_w, poly.image_h) != (size.width, size.height):
            raise BuilderError(f"task {task.task_id!r}: polygon {k} size differs from image size")
        bm = rasterize_bitmap(poly)
        if bm.any():
            groups.append((bm, [k]))
    boxes = [b.clamp(size) for b in vg_boxes]
    plural = is_plural(task.structure)
    provenance: list[dict] = []

    if not plural:
        def occluded_parts(a, b):
            joint = bitmap_bbox(a | b)
            return any(box_iou(joint, vb) >= params.merge_box_iou for vb in boxes)

        groups = _merge_pass(groups, occluded_parts, "merge_box", provenance)

    def fragments(a, b):
        inter, union = _bitmap_iou(a, b)
        if inter == 0:
            return False
        na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
        return min(na, nb) <= params.merge_area_ratio * max(na, nb) or inter >= params.merge_mask_iou * union

    groups = _merge_pass(groups, fragments, "merge_overlap", provenance)

    out = []
    for bm, members in groups:
        parts = [bm]
        if plural:
            covered = []
            for k, vb in enumerate(boxes):
                if vb.area == 0:
                    continue
                inside = int(np.count_nonzero(bm[vb.y : vb.y2, vb.x : vb.x2]))
                if inside >= params.split_coverage * vb.area:
                    covered.append(k)
            areas = [boxes[k].area for k in covered]
            if len(covered) >= 2 and max(areas) <= params.split_area_ratio * min(areas):
                parts = _split_by_centers(bm, [boxes[k] for k in covered])
                provenance.append({"op": "split", "polygons": members, "vg_boxes": covered, "parts": len(parts)})
        for p in parts:
            out.append(Instance(encode(p), bitmap_bbox(p)))
    return InstanceSet(tuple(out), tuple(provenance))


def _split_by_centers(bitmap: np.ndarray, boxes: Sequence[BoundingBox]) -> list[np.ndarray]:
    ys, xs = np.nonzero(bitmap)
    px, py = xs + 0.5, ys + 0.5
    centers = np.array([b.center for b in boxes])
    d2 = (px[:, None] - centers[None, :, 0]) ** 2 + (py[:, None] - centers[None, :, 1]) ** 2
    owner = np.argmin(d2, axis=1)
    parts = []
    for k in range(len(boxes)):
        part = np.zeros_like(bitmap)
        sel = owner == k
        part[ys[sel], xs[sel]] = True
        if part.any():
            parts.append(part)
    return parts


# ---------------------------------------------------------------- subsets


@dataclass(frozen=True)
class SubsetParams:
    small_fraction: float = 0.02
    large_fraction: float = 0.2
    many_count: int = 5
    freq_top: int = 100
    freq_mid: int = 500


def assign_subsets(
    task: PhraseTask,
    vocab: CategoryVocabulary,
    stuff_list: Iterable[str] = (),
    params: SubsetParams = SubsetParams(),
) -> PhraseTask:
    if not task.instances:
        raise BuilderError(f"task {task.task_id!r} has no target instances")
    frac = task.gt_mask().area / task.image_size.area
    if frac < params.small_fraction:
        size_tag = "small"
    elif frac > params.large_fraction:
        size_tag = "large"
    else:
        size_tag = "mid"
    n = len(task.instances)
    count_tag = "single" if n == 1 else ("multi" if n < params.many_count else "many")
    rank = vocab.rank(task.category)
    if rank is not None and rank <= params.freq_top:
        freq_tag = "freq_1_100"
    elif rank is not None and rank <= params.freq_mid:
        freq_tag = "freq_101_500"
    else:
        freq_tag = "freq_500+"
    kind_tag = "stuff" if task.category in {normalize_name(s) for s in stuff_list} else "obj"
    kept = set(task.subset_tags) - set(SIZE_TAGS + COUNT_TAGS + FREQ_TAGS + KIND_TAGS)
    return replace(task, subset_tags=frozenset(kept | {size_tag, count_tag, freq_tag, kind_tag}))
