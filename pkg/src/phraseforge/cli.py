"""``forge`` command-line entry point.

Pipeline order: ``sample -> phrases -> qc -> refine -> eval``, plus the model
stages ``channels``, ``train``, ``predict`` and ``substitute``.  Every stage
writes ``<output>.manifest.json`` next to its main output.

Exit codes: 0 ok, 1 data error, 2 usage error.  Errors are a single JSON
line on standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import platform
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .builder import (
    InstanceSet,
    PhraseTask,
    assign_subsets,
    generate_phrases,
    refine_instances,
    sample_boxes,
)
from .config import Config, ConfigError, load_config
from .evaluation import EMPTY_PAIR_CONVENTION, PredictionRecord, best_substitute, evaluate_by_subset
from .geometry import GeometryError, ImageSize, PolygonRegion, decode, encode, resize_bitmap
from .jsonl import DataError, dumps, read_json, read_jsonl, write_json, write_jsonl
from .model import checkpoint
from .model.channels import ChannelError, build_attribute_channels, build_channels, load_detections
from .model.embedding import EmbeddingTable, embed_phrase, structure_words
from .model.network import ModelConfig, Sample, forward, param_count
from .model.train import TrainingDiverged, predict_scores, select_threshold, train
from .qc import WorkerRecord, agreement, dedup, polygons_bitmap, verify_workers
from .scene_graph import CategoryVocabulary, SceneGraphError, build_vocabulary, load_scene_graphs

log = logging.getLogger("phraseforge")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, cfg: Config, overrides: list[str], inputs: dict, output: str, extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "inputs": {k: {"path": Path(v).name, "sha256": _sha256(v)} for k, v in sorted(inputs.items()) if v},
        "output": Path(output).name,
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "overrides": sorted(overrides),
        "versions": {
            "phraseforge": __version__,
            "numpy": np.__version__,
            "python": ".".join(platform.python_version_tuple()[:2]),
        },
    }
    if extra:
        manifest.update(extra)
    write_json(str(output) + ".manifest.json", manifest)


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _require(args, *names: str) -> None:
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _load_tasks(path: str) -> list[PhraseTask]:
    return [PhraseTask.from_json(r) for r in read_jsonl(path)]


def _channel_size(size: ImageSize, scale: int) -> tuple[int, int]:
    return max(1, size.height // scale), max(1, size.width // scale)


def _model_config(cfg: Config) -> ModelConfig:
    m = cfg.model
    if m.n_categories <= 0 or m.n_attributes <= 0:
        raise UsageError("model.n_categories and model.n_attributes must be set in the config")
    return ModelConfig(
        n_categories=m.n_categories,
        n_attributes=m.n_attributes,
        embed_dim=m.embed_dim,
        hidden_dim=m.hidden_dim,
        ensemble_hidden=m.ensemble_hidden,
        relation_grid=m.relation_grid,
        relation_channels=m.relation_channels,
        kernel_size=m.kernel_size,
        dilation=m.dilation,
        dropout=m.dropout,
        norm_eps=m.norm_eps,
        positive_weight_cap=m.positive_weight_cap,
        modules=tuple(m.modules),
        seed=cfg.seed,
    )


def _embedding_table(args, cfg: Config, tasks: Sequence[PhraseTask], dim: int) -> EmbeddingTable:
    if args.embeddings:
        table = EmbeddingTable.load(args.embeddings, cfg.seed)
        if table.dim != dim:
            raise DataError(f"embedding table has dimension {table.dim}, model expects {dim}")
        return table
    words = [w for t in tasks for w in structure_words(t.structure)]
    return EmbeddingTable.random(words, dim, cfg.seed)


def _samples(tasks, detections, mcfg: ModelConfig, cfg: Config, table: EmbeddingTable, jobs: int) -> list[Sample]:
    def one(t: PhraseTask) -> Sample:
        h, w = _channel_size(t.image_size, cfg.model.channel_scale)
        dets = detections.get(t.image_id, [])
        gt = resize_bitmap(decode(t.gt_mask()), h, w) if t.instances else None
        return Sample(
            t.task_id,
            build_channels(dets, mcfg.n_categories, h, w),
            build_attribute_channels(dets, mcfg.n_attributes, h, w),
            embed_phrase(t.structure, table),
            gt,
        )

    return _pmap(one, tasks, jobs)


# ---------------------------------------------------------------- stages


def cmd_sample(args, cfg: Config, overrides) -> None:
    _require(args, "input", "output")
    graphs = load_scene_graphs(args.input)
    params = cfg.sampler_params()
    picks = _pmap(lambda g: sample_boxes(g, params), graphs, args.jobs)
    write_jsonl(args.output, ({"image_id": g.image_id, "box_ids": ids} for g, ids in zip(graphs, picks)))
    _write_manifest(args, cfg, overrides, {"input": args.input}, args.output,
                    {"dropped_relationships": sum(g.dropped_relationships for g in graphs)})


def cmd_phrases(args, cfg: Config, overrides) -> None:
    _require(args, "input", "output")
    graphs = load_scene_graphs(args.input)
    if args.samples:
        chosen = {r["image_id"]: r["box_ids"] for r in read_jsonl(args.samples)}
    else:
        params = cfg.sampler_params()
        chosen = {g.image_id: sample_boxes(g, params) for g in graphs}
    per_image = _pmap(lambda g: generate_phrases(g, chosen.get(g.image_id, []), cfg.seed), graphs, args.jobs)
    write_jsonl(args.output, (t.to_json() for tasks in per_image for t in tasks))
    if args.vocab_out:
        write_json(args.vocab_out, build_vocabulary(graphs).to_json())
    _write_manifest(args, cfg, overrides, {"input": args.input, "samples": args.samples}, args.output)


def _read_annotations(path: str, tasks: dict[str, PhraseTask]) -> list[tuple[str, str, list[PolygonRegion], dict]]:
    out = []
    for rec in read_jsonl(path):
        for key in ("task_id", "worker_id", "polygons"):
            if key not in rec:
                raise DataError(f"annotation record missing field {key!r}")
        tid = str(rec["task_id"])
        if tid not in tasks:
            raise DataError(f"annotation for unknown task {tid!r}")
        size = tasks[tid].image_size
        polys = [PolygonRegion.from_flat([flat], size.width, size.height) for flat in rec["polygons"]]
        out.append((tid, str(rec["worker_id"]), polys, rec))
    return out


def cmd_qc(args, cfg: Config, overrides) -> None:
    _require(args, "input", "tasks", "output")
    tasks = {t.task_id: t for t in _load_tasks(args.tasks)}
    anns = _read_annotations(args.input, tasks)

    def score(a):
        tid, _, polys, _ = a
        t = tasks[tid]
        return agreement(polygons_bitmap(polys, t.image_size.width, t.image_size.height), t.vg_boxes, cfg.qc)

    scores = _pmap(score, anns, args.jobs)
    records: dict[str, WorkerRecord] = {}
    for (tid, wid, polys, _), s in zip(anns, scores):
        rec = records.setdefault(wid, WorkerRecord(wid))
        rec.annotations.append((tid, polys))
        rec.agreement_scores.append(s)
    report = verify_workers([records[w] for w in sorted(records)], cfg.qc)
    trusted = report.trusted_workers
    per_task: dict[str, list] = defaultdict(list)
    for tid in sorted(tasks):
        per_task[tid] = []
    for tid, wid, _, raw in anns:
        if wid in trusted:
            per_task[tid].append(raw)
    chosen, dropped = dedup(per_task, cfg.seed)
    write_jsonl(args.output, (chosen[tid] for tid in sorted(chosen)))
    body = report.to_json()
    body["tasks_kept"] = len(chosen)
    body["tasks_dropped"] = dropped
    if args.report:
        write_json(args.report, body)
    _write_manifest(args, cfg, overrides, {"input": args.input, "tasks": args.tasks}, args.output,
                    {"tasks_kept": len(chosen), "tasks_dropped": dropped})


def cmd_refine(args, cfg: Config, overrides) -> None:
    _require(args, "input", "tasks", "output")
    tasks = {t.task_id: t for t in _load_tasks(args.tasks)}
    anns = {tid: polys for tid, _, polys, _ in _read_annotations(args.input, tasks)}
    vocab = CategoryVocabulary.from_json(read_json(args.vocab)) if args.vocab else CategoryVocabulary((), ())
    stuff = cfg.stuff_list()
    subset_params = cfg.eval.subset_params()
    ordered = [tid for tid in tasks if tid in anns]

    def one(tid: str):
        t = tasks[tid]
        inst: InstanceSet = refine_instances(anns[tid], t, t.vg_boxes, cfg.refine)
        if not inst.instances:
            return None, inst
        t = dataclasses.replace(t, instances=inst.instances)
        return assign_subsets(t, vocab, stuff, subset_params), inst

    results = _pmap(one, ordered, args.jobs)
    kept = [t for t, _ in results if t is not None]
    write_jsonl(args.output, (t.to_json() for t in kept))
    provenance = {tid: list(inst.provenance) for tid, (_, inst) in zip(ordered, results) if inst.provenance}
    _write_manifest(args, cfg, overrides, {"input": args.input, "tasks": args.tasks, "vocab": args.vocab}, args.output,
                    {"tasks_written": len(kept), "tasks_skipped": len(tasks) - len(kept), "provenance": provenance})


def cmd_eval(args, cfg: Config, overrides) -> None:
    tasks_path = args.tasks or args.input
    report_path = args.report or args.output
    if tasks_path is None or args.preds is None or report_path is None:
        raise UsageError("eval: --tasks, --preds and --report are required")
    tasks = _load_tasks(tasks_path)
    preds = [PredictionRecord.from_json(r) for r in read_jsonl(args.preds)]
    report = evaluate_by_subset(tasks, preds, cfg.eval.thresholds, jobs=args.jobs)
    body = {
        "overall": {k: v for k, v in report.to_json().items() if k != "subsets"},
        "subsets": {k: v.to_json() for k, v in report.subsets.items()},
        "meta": {"empty_pair_convention": EMPTY_PAIR_CONVENTION, "pr_comparison": "iou >= threshold",
                 "overrides": sorted(overrides), "seed": cfg.seed},
    }
    write_json(report_path, body)
    _write_manifest(args, cfg, overrides, {"tasks": tasks_path, "preds": args.preds}, report_path)


def cmd_channels(args, cfg: Config, overrides) -> None:
    _require(args, "input", "output")
    mcfg = _model_config(cfg)
    detections = load_detections(args.input)
    arrays = {}
    for image_id in sorted(detections, key=str):
        dets = detections[image_id]
        if not dets:
            continue
        h, w = dets[0].mask.height, dets[0].mask.width
        arrays[f"cat/{image_id}"] = build_channels(dets, mcfg.n_categories, h, w)
        arrays[f"att/{image_id}"] = build_attribute_channels(dets, mcfg.n_attributes, h, w)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(args.output).write_bytes(buf.getvalue())
    _write_manifest(args, cfg, overrides, {"input": args.input}, args.output)


def cmd_train(args, cfg: Config, overrides) -> None:
    _require(args, "input", "detections", "output")
    mcfg = _model_config(cfg)
    tasks = [t for t in _load_tasks(args.input) if t.instances]
    if not tasks:
        raise DataError("training set is empty")
    val_tasks = [t for t in _load_tasks(args.val) if t.instances] if args.val else tasks
    detections = load_detections(args.detections)
    table = _embedding_table(args, cfg, tasks + val_tasks, mcfg.embed_dim)
    samples = _samples(tasks, detections, mcfg, cfg, table, args.jobs)
    params, history = train(samples, mcfg, cfg.train_config(), jobs=args.jobs)
    val = samples if not args.val else _samples(val_tasks, detections, mcfg, cfg, table, args.jobs)
    threshold, val_miou = select_threshold(predict_scores(val, params, mcfg), [s.gt for s in val])
    meta = {"val_mean_iou": val_miou, "param_count": param_count(params),
            "final_loss": {k: v[-1] for k, v in history.items() if v}}
    checkpoint.save(args.output, params, mcfg, threshold, meta)
    _write_manifest(args, cfg, overrides,
                    {"input": args.input, "detections": args.detections, "val": args.val, "embeddings": args.embeddings},
                    args.output, {"threshold": threshold, **meta})


def cmd_predict(args, cfg: Config, overrides) -> None:
    _require(args, "input", "detections", "output")
    tasks = _load_tasks(args.input)
    detections = load_detections(args.detections)
    if args.substitute:
        mapping = {e["source"]: e["substitute"] for e in read_json(args.substitute)["mapping"]}
        vocab = CategoryVocabulary.from_json(read_json(args.vocab)) if args.vocab else None
        if vocab is None:
            raise UsageError("predict: --substitute needs --vocab")
        mcfg = ModelConfig(n_categories=len(vocab), n_attributes=max(1, cfg.model.n_attributes))
        thr = cfg.model.substitute_threshold

        def score(t: PhraseTask) -> np.ndarray:
            h, w = _channel_size(t.image_size, cfg.model.channel_scale)
            stack = build_channels(detections.get(t.image_id, []), mcfg.n_categories, h, w)
            sub = mapping.get(t.category, t.category)
            return stack[vocab.index(sub)] if sub in vocab else np.zeros((h, w))
    else:
        _require(args, "checkpoint")
        params, mcfg, thr, _ = checkpoint.load(args.checkpoint)
        table = _embedding_table(args, cfg, tasks, mcfg.embed_dim)

        def score(t: PhraseTask) -> np.ndarray:
            s = _samples([dataclasses.replace(t, instances=())], detections, mcfg, cfg, table, 1)[0]
            return forward(s, params, mcfg).O

    def one(t: PhraseTask) -> dict:
        pred = score(t) >= thr
        full = resize_bitmap(pred, t.image_size.height, t.image_size.width)
        return PredictionRecord(t.task_id, encode(full)).to_json()

    write_jsonl(args.output, _pmap(one, tasks, args.jobs))
    _write_manifest(args, cfg, overrides,
                    {"input": args.input, "detections": args.detections, "checkpoint": args.checkpoint,
                     "substitute": args.substitute, "vocab": args.vocab, "embeddings": args.embeddings},
                    args.output, {"threshold": thr})


def cmd_substitute(args, cfg: Config, overrides) -> None:
    _require(args, "input", "detections", "vocab", "output")
    tasks = [t for t in _load_tasks(args.input) if t.instances]
    vocab = CategoryVocabulary.from_json(read_json(args.vocab))
    detections = load_detections(args.detections)
    scale = cfg.model.channel_scale
    channels, gts = {}, {}
    for t in tasks:
        h, w = _channel_size(t.image_size, scale)
        channels[t.task_id] = build_channels(detections.get(t.image_id, []), len(vocab), h, w)
        gts[t.task_id] = resize_bitmap(decode(t.gt_mask()), h, w)
    sources = sorted({t.category for t in tasks}, key=lambda c: (vocab.rank(c) or len(vocab) + 1, c))
    thr = cfg.model.substitute_threshold
    entries = _pmap(lambda c: best_substitute(c, tasks, channels, vocab, thr, gts), sources, args.jobs)
    write_json(args.output, {"threshold": thr, "mapping": [e.to_json() for e in entries]})
    _write_manifest(args, cfg, overrides,
                    {"input": args.input, "detections": args.detections, "vocab": args.vocab}, args.output)


COMMANDS = {
    "sample": cmd_sample,
    "phrases": cmd_phrases,
    "qc": cmd_qc,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "channels": cmd_channels,
    "train": cmd_train,
    "predict": cmd_predict,
    "substitute": cmd_substitute,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--input")
    common.add_argument("--output")
    common.add_argument("--report")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="forge", description="Referring-phrase dataset and grounding toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    sub.add_parser("sample", parents=[common], help="sample boxes per scene graph")
    p = sub.add_parser("phrases", parents=[common], help="generate templated phrases")
    p.add_argument("--samples", help="output of `forge sample` (sampled on the fly if omitted)")
    p.add_argument("--vocab-out", help="also write the category vocabulary here")
    p = sub.add_parser("qc", parents=[common], help="verify annotators and keep one annotation per task")
    p.add_argument("--tasks", help="phrase tasks file")
    p = sub.add_parser("refine", parents=[common], help="polygons to instances plus subset tags")
    p.add_argument("--tasks", help="phrase tasks file")
    p.add_argument("--vocab", help="category vocabulary JSON")
    p = sub.add_parser("eval", parents=[common], help="mean-IoU / cum-IoU / Pr@k report")
    p.add_argument("--tasks")
    p.add_argument("--preds")
    sub.add_parser("channels", parents=[common], help="project detections into score channels (.npz)")
    for name in ("train", "predict"):
        p = sub.add_parser(name, parents=[common], help=f"{name} the grounding model")
        p.add_argument("--detections")
        p.add_argument("--embeddings", help="word embedding text file")
        if name == "train":
            p.add_argument("--val", help="validation tasks for threshold selection")
        else:
            p.add_argument("--checkpoint")
            p.add_argument("--substitute", help="category substitution map (baseline predictions)")
            p.add_argument("--vocab")
    p = sub.add_parser("substitute", parents=[common], help="best substitute category per source category")
    p.add_argument("--detections")
    p.add_argument("--vocab")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        return _fail(EXIT_USAGE, "UsageError", "--jobs must be >= 1")
    try:
        cfg, overrides = load_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg, overrides)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_DATA, "FileNotFoundError", f"{exc.filename}: not found")
    except (DataError, SceneGraphError, GeometryError, ChannelError, checkpoint.CheckpointError,
            TrainingDiverged, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
