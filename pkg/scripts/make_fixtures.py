"""Regenerate the bundled fixtures under src/phraseforge/fixtures/."""

from pathlib import Path

from phraseforge.builder import Instance, PhraseStructure, PhraseTask, SamplerParams, generate_phrases, sample_boxes
from phraseforge.evaluation import PredictionRecord
from phraseforge.geometry import BoundingBox, ImageSize, PolygonRegion, rasterize
from phraseforge.jsonl import write_jsonl
from phraseforge.scene_graph import graph_to_json
from phraseforge.synthetic import scene_graphs, simulate_annotations

OUT = Path(__file__).resolve().parents[1] / "src" / "phraseforge" / "fixtures"
SEED = 0


def toy_eval():
    size = ImageSize(16, 12)
    shapes = [
        ("toy_0", PhraseStructure("dog"), BoundingBox(2, 2, 5, 4)),
        ("toy_1", PhraseStructure("car", attributes=("red",)), BoundingBox(8, 1, 6, 6)),
        ("toy_2", PhraseStructure("sky", relationships=(("above", "tree"),)), BoundingBox(0, 0, 16, 3)),
    ]
    tasks, preds = [], []
    for tid, structure, box in shapes:
        mask = box.to_mask(size)
        tasks.append(PhraseTask(tid, "toy", size, structure, frozenset({"single"}), instances=(Instance(mask, box),)))
        preds.append(PredictionRecord(tid, mask))
    tri = PolygonRegion.from_flat([[1, 11, 7, 6, 9, 11]], 16, 12)
    m = rasterize(tri)
    tasks.append(PhraseTask("toy_3", "toy", size, PhraseStructure("sign"), frozenset({"single"}),
                            instances=(Instance(m, BoundingBox(1, 6, 8, 5)),)))
    preds.append(PredictionRecord("toy_3", m))
    write_jsonl(OUT / "toy_tasks.jsonl", (t.to_json() for t in tasks))
    write_jsonl(OUT / "toy_preds.jsonl", (p.to_json() for p in preds))


def pipeline():
    graphs = scene_graphs(16, SEED)
    write_jsonl(OUT / "scene_graphs.jsonl", (graph_to_json(g) for g in graphs))
    params = SamplerParams(rng_seed=SEED)
    tasks = [t for g in graphs for t in generate_phrases(g, sample_boxes(g, params), SEED)]
    write_jsonl(OUT / "annotations.jsonl", simulate_annotations(tasks, SEED))


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    toy_eval()
    pipeline()
