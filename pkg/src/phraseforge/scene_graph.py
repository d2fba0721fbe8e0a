"""Visual-Genome-style scene graphs: loading, validation and category statistics."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .geometry import BoundingBox, GeometryError, ImageSize

log = logging.getLogger(__name__)

_WS = re.compile(r"\s+")


class SceneGraphError(ValueError):
    pass


def normalize_name(text: str) -> str:
    """Lowercase, trim, collapse internal whitespace.  No synonym folding."""
    return _WS.sub(" ", str(text).strip().lower())


@dataclass(frozen=True)
class Relationship:
    predicate: str
    object_id: int | str


@dataclass(frozen=True)
class ObjectNode:
    id: int | str
    box: BoundingBox
    names: tuple[str, ...]
    attributes: tuple[str, ...] = ()
    relationships: tuple[Relationship, ...] = ()

    def __post_init__(self) -> None:
        if not self.names:
            raise SceneGraphError(f"object {self.id!r} has no category names")


@dataclass(frozen=True)
class SceneGraph:
    image_id: int | str
    image_size: ImageSize
    objects: tuple[ObjectNode, ...]
    # relationships whose target id was missing at load time
    dropped_relationships: int = 0
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        index = self._index
        index.clear()
        for obj in self.objects:
            if obj.id in index:
                raise SceneGraphError(f"image {self.image_id!r}: duplicate object id {obj.id!r}")
            index[obj.id] = obj
        for obj in self.objects:
            for rel in obj.relationships:
                if rel.object_id not in index:
                    raise SceneGraphError(
                        f"image {self.image_id!r}: object {obj.id!r} relates to missing id {rel.object_id!r}"
                    )

    def get(self, object_id) -> ObjectNode:
        return self._index[object_id]

    def __contains__(self, object_id) -> bool:
        return object_id in self._index


def relative_size(box: BoundingBox, img: ImageSize) -> float:
    r = (box.w * box.h) / (img.width * img.height)
    return min(1.0, max(0.0, r))


def _require(record: dict, key: str, image_id) -> object:
    if key not in record:
        raise SceneGraphError(f"image {image_id!r}: missing field {key!r}")
    return record[key]


def _string_list(value, image_id, fieldname: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SceneGraphError(f"image {image_id!r}: field {fieldname!r} must be a list of strings")
    out = []
    for v in value:
        n = normalize_name(v)
        if n:
            out.append(n)
    return tuple(out)


def parse_scene_graph(record: dict) -> SceneGraph:
    """Validate one JSON record; clamps boxes and drops dangling relationships."""
    if not isinstance(record, dict):
        raise SceneGraphError("scene-graph record must be a JSON object")
    image_id = record.get("image_id")
    if image_id is None:
        raise SceneGraphError("record missing field 'image_id'")
    width = _require(record, "width", image_id)
    height = _require(record, "height", image_id)
    if not isinstance(width, int) or not isinstance(height, int):
        raise SceneGraphError(f"image {image_id!r}: fields 'width'/'height' must be integers")
    try:
        size = ImageSize(width, height)
    except GeometryError as exc:
        raise SceneGraphError(f"image {image_id!r}: field 'width'/'height': {exc}") from None
    raw_objects = _require(record, "objects", image_id)
    if not isinstance(raw_objects, list):
        raise SceneGraphError(f"image {image_id!r}: field 'objects' must be a list")

    staged = []
    ids = set()
    for k, obj in enumerate(raw_objects):
        where = f"objects[{k}]"
        if not isinstance(obj, dict):
            raise SceneGraphError(f"image {image_id!r}: field {where!r} must be an object")
        oid = obj.get("id")
        if oid is None or isinstance(oid, (bool, float, list, dict)):
            raise SceneGraphError(f"image {image_id!r}: field '{where}.id' missing or invalid")
        if oid in ids:
            raise SceneGraphError(f"image {image_id!r}: field '{where}.id' duplicates {oid!r}")
        ids.add(oid)
        box = obj.get("box")
        if (
            not isinstance(box, list)
            or len(box) != 4
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in box)
        ):
            raise SceneGraphError(f"image {image_id!r}: field '{where}.box' must be 4 integers")
        if box[2] < 0 or box[3] < 0:
            raise SceneGraphError(f"image {image_id!r}: field '{where}.box' has negative extent")
        names = _string_list(obj.get("names"), image_id, f"{where}.names")
        if not names:
            raise SceneGraphError(f"image {image_id!r}: field '{where}.names' is empty")
        attributes = _string_list(obj.get("attributes", []), image_id, f"{where}.attributes")
        rels = obj.get("relationships", [])
        if not isinstance(rels, list):
            raise SceneGraphError(f"image {image_id!r}: field '{where}.relationships' must be a list")
        parsed_rels = []
        for j, rel in enumerate(rels):
            if not isinstance(rel, dict) or not isinstance(rel.get("predicate"), str) or "object_id" not in rel:
                raise SceneGraphError(
                    f"image {image_id!r}: field '{where}.relationships[{j}]' needs predicate and object_id"
                )
            parsed_rels.append((normalize_name(rel["predicate"]), rel["object_id"]))
        staged.append((oid, BoundingBox(*box).clamp(size), names, attributes, parsed_rels))

    dropped = 0
    objects = []
    for oid, box, names, attributes, rels in staged:
        kept = []
        for predicate, target in rels:
            if target in ids:
                kept.append(Relationship(predicate, target))
            else:
                dropped += 1
        objects.append(ObjectNode(oid, box, names, attributes, tuple(kept)))
    if dropped:
        log.warning("image %r: dropped %d dangling relationship(s)", image_id, dropped)
    return SceneGraph(image_id, size, tuple(objects), dropped)


def load_scene_graphs(path: str | Path) -> list[SceneGraph]:
    """Read a JSON Lines scene-graph file, preserving line order."""
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneGraphError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            graphs.append(parse_scene_graph(record))
    return graphs


def graph_to_json(graph: SceneGraph) -> dict:
    return {
        "image_id": graph.image_id,
        "width": graph.image_size.width,
        "height": graph.image_size.height,
        "objects": [
            {
                "id": o.id,
                "box": o.box.to_list(),
                "names": list(o.names),
                "attributes": list(o.attributes),
                "relationships": [{"predicate": r.predicate, "object_id": r.object_id} for r in o.relationships],
            }
            for o in graph.objects
        ],
    }


@dataclass(frozen=True)
class CategoryVocabulary:
    categories: tuple[str, ...]
    frequencies: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.categories) != len(self.frequencies):
            raise ValueError("categories and frequencies differ in length")
        if any(f < 0 for f in self.frequencies):
            raise ValueError("frequencies must be non-negative")
        object.__setattr__(self, "_rank", {c: i + 1 for i, c in enumerate(self.categories)})

    def __len__(self) -> int:
        return len(self.categories)

    def __contains__(self, name: str) -> bool:
        return name in self._rank

    def rank(self, name: str) -> int | None:
        """1-based frequency rank, ``None`` for out-of-vocabulary names."""
        return self._rank.get(name)

    def index(self, name: str) -> int:
        return self._rank[name] - 1

    def frequency(self, name: str) -> int:
        r = self._rank.get(name)
        return 0 if r is None else self.frequencies[r - 1]

    def to_json(self) -> dict:
        return {"categories": list(self.categories), "frequencies": list(self.frequencies)}

    @classmethod
    def from_json(cls, obj: dict) -> "CategoryVocabulary":
        return cls(tuple(obj["categories"]), tuple(int(f) for f in obj["frequencies"]))

    @classmethod
    def from_counts(cls, counts: dict[str, int], min_frequency: int = 1) -> "CategoryVocabulary":
        kept = sorted(((c, n) for c, n in counts.items() if n >= min_frequency), key=lambda cn: (-cn[1], cn[0]))
        return cls(tuple(c for c, _ in kept), tuple(n for _, n in kept))


def build_vocabulary(graphs: Iterable[SceneGraph], min_frequency: int = 1) -> CategoryVocabulary:
    """Count every category-name occurrence and keep those at or above ``min_frequency``."""
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts: Counter[str] = Counter()
    for g in graphs:
        for obj in g.objects:
            counts.update(obj.names)
    return CategoryVocabulary.from_counts(counts, min_frequency)
