"""``sparseped`` command line: data generation, sparsification, training, evaluation, previews.

Exit codes: 0 ok, 2 I/O failure, 3 malformed data or configuration, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from . import apra
from .config import ConfigError, RunConfig
from .core import BBox, MODALITIES, Source, boxes_to_array
from .detector import (
    AnchorGrid,
    CheckpointError,
    ImageFeatures,
    NonFiniteLoss,
    generate_pseudo_labels,
    load_checkpoint,
    save_checkpoint,
    window_rects,
)
from .mpaw import compute_weights
from .sparsify import TargetUnreachable, sparsify_dataset
from .storage import (
    MalformedData,
    MetricsWriter,
    atomic_write_bytes,
    atomic_write_text,
    load_dataset,
    save_dataset,
    to_uint8,
)
from .synthdata import SceneParams, generate_dataset
from .training import evaluate_model, fit

EXIT_OK, EXIT_IO, EXIT_MALFORMED, EXIT_NUMERIC = 0, 2, 3, 4

# short switch names accepted by ``train`` in addition to the config keys
ALIASES = {"mpaw": "mpaw_enabled", "ppe": "ppe_enabled", "apra": "apra_mode"}


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: int, message: str):
    raise CommandError(code, message)


# ---------------------------------------------------------------- config plumbing


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """``--key value`` / ``--key=value`` pairs into a raw override mapping."""
    out: Dict[str, str] = {}
    toks = list(tokens)
    i = 0
    while i < len(toks):
        tok = toks[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(toks):
                raise ConfigError(f"missing value for --{key}")
            val = toks[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key in ALIASES:
            target = ALIASES[key]
            if target == "apra_mode" and val.lower() in ("on", "true"):
                val = "dynamic"
            key = target
        out[key] = val
    return out


def load_config(path: Optional[str], overrides: Dict[str, str]) -> RunConfig:
    text = ""
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            _fail(EXIT_IO, f"cannot read config {path}: {exc}")
    return RunConfig.from_text(text, overrides)


def _load_dataset(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        _fail(EXIT_IO, f"cannot read dataset {path}: {exc}")
    except MalformedData as exc:
        _fail(EXIT_MALFORMED, f"malformed dataset {path}: {exc}")
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read dataset {path}: {exc}")


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        _fail(EXIT_IO, f"checkpoint not found: {path}")
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read checkpoint {path}: {exc}")
    except (CheckpointError, ValueError, KeyError) as exc:
        _fail(EXIT_MALFORMED, f"malformed checkpoint {path}: {exc}")


def _config_from_meta(meta: dict) -> RunConfig:
    text = meta.get("config", "")
    return RunConfig.from_text(text)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    params = SceneParams(width=args.width, height=args.height, min_h=args.min_h, max_h=args.max_h)
    ds = generate_dataset(args.seed, args.n, params, args.split)
    try:
        save_dataset(ds, args.out)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write dataset to {args.out}: {exc}")
    print(f"wrote {len(ds.pairs)} images, {ds.total_annotations()} annotations to {args.out}")
    return EXIT_OK


def cmd_sparsify(args) -> int:
    ds = _load_dataset(args.data)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TargetUnreachable)
        try:
            sparse, removal = sparsify_dataset(ds, args.fraction, args.seed, args.mode)
        except ValueError as exc:
            _fail(EXIT_MALFORMED, str(exc))
    for w in caught:
        if issubclass(w.category, TargetUnreachable):
            print(f"warning: TargetUnreachable: {w.message}", file=sys.stderr)
    report = removal.report()
    try:
        save_dataset(sparse, args.out)
        atomic_write_text(Path(args.out) / "removal_report.txt", report)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write {args.out}: {exc}")
    print(report.split("removed image=", 1)[0].rstrip("\n"))
    return EXIT_OK


def cmd_train(args, extra: Sequence[str]) -> int:
    config = load_config(args.config, parse_overrides(extra))
    train = _load_dataset(args.data)
    test = _load_dataset(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "config.txt", config.to_text())
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write to {out}: {exc}")
    last = {"step": 0}

    try:
        with MetricsWriter(out / "metrics.txt") as writer:
            def on_record(rec):
                if rec.get("kind") == "step":
                    last["step"] = rec["step"]
                writer(rec)

            state = fit(config, train.pairs, train.annotations,
                        test.pairs if test else None, test.annotations if test else None,
                        on_record=on_record)
    except NonFiniteLoss as exc:
        step = last["step"] + 1
        dump = f"step={step}\ncomponent={exc.component}\nmessage={exc}\n" + config.to_text()
        atomic_write_text(out / "nonfinite_step.txt", dump)
        print(f"error: non-finite loss at step {step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write metrics: {exc}")

    meta = {"config": config.to_text(), "steps": state.step}
    try:
        save_checkpoint(out / "checkpoint.bin", state.ts, meta)
        refined = "".join(f"image={e.image_id} annotation={e.annotation.id} score={e.score!r} "
                          f"w_F={e.weight_f!r} exemplar={e.exemplar_id}\n" for e in state.refine_log)
        atomic_write_text(out / "refined.txt", refined)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write checkpoint: {exc}")
    gt_total = sum(len(v) for v in state.gt.values())
    print(f"trained {state.step} steps; gt_total={gt_total} store_size={len(state.store)}; "
          f"checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ts, meta = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    config = _config_from_meta(meta)
    params = ts.teacher if args.teacher else ts.student
    grid = AnchorGrid(config.anchor_stride, config.anchor_sizes())
    report = evaluate_model(params, ds.pairs, ds.annotations, grid, config)
    sys.stdout.write(report.table())
    rec = report.record()
    line = json.dumps(rec, sort_keys=True)
    if args.json:
        try:
            atomic_write_text(args.json, line + "\n")
        except OSError as exc:
            _fail(EXIT_IO, f"cannot write {args.json}: {exc}")
    else:
        print(json.dumps({"lamr": rec["lamr"], "ap50": rec["ap50"], "subsets": rec["subsets"]}, sort_keys=True))
    return EXIT_OK


def _outline(img: np.ndarray, box: BBox, color) -> None:
    h, w = img.shape[:2]
    x0 = int(np.clip(np.floor(box.x), 0, w - 1))
    y0 = int(np.clip(np.floor(box.y), 0, h - 1))
    x1 = int(np.clip(np.ceil(box.x2) - 1, 0, w - 1))
    y1 = int(np.clip(np.ceil(box.y2) - 1, 0, h - 1))
    img[y0, x0:x1 + 1] = color
    img[y1, x0:x1 + 1] = color
    img[y0:y1 + 1, x0] = color
    img[y0:y1 + 1, x1] = color


def render_preview(result: apra.AugmentResult, saliency: np.ndarray) -> np.ndarray:
    """uint8 strip: augmented visible | augmented thermal | saliency heat over fused luminance."""
    pair = result.pair
    vis = to_uint8(pair.visible)
    th = np.repeat(to_uint8(pair.thermal), 3, axis=2)
    lum = apra.fused_luminance(pair)
    heat = np.stack([saliency, np.zeros_like(saliency), 1.0 - saliency], axis=2)
    over = to_uint8(0.5 * lum[:, :, None] + 0.5 * heat)
    for panel in (vis, th, over):
        for ann in result.annotations:
            if ann.source is not Source.APRA_PATCH:
                _outline(panel, ann.bbox, (0, 255, 0))
        for ann in result.placed:
            _outline(panel, ann.bbox, (255, 0, 0))
    return np.concatenate([vis, th, over], axis=1)


def cmd_augment_preview(args) -> int:
    ds = _load_dataset(args.data)
    if args.image_id not in ds.annotations and args.image_id not in {p.id for p in ds.pairs}:
        _fail(EXIT_MALFORMED, f"image {args.image_id} not in dataset")
    pair = ds.pair(args.image_id)
    anns = ds.annotations.get(pair.id, [])
    store = apra.ExemplarStore() if args.empty_store else apra.ExemplarStore.from_ground_truth(ds.pairs, ds.annotations)
    try:
        gmean = apra.global_mean_size(ds.annotations)
    except ValueError:
        gmean = (args.patch_w, args.patch_h)
    if len(store) == 0:
        print("warning: exemplar store is empty; preview shows the unmodified pair", file=sys.stderr)
    result = apra.augment(pair, anns, store, gmean, args.m, args.stride)
    band = apra.valid_y_band(anns, pair.height)
    sal = apra.saliency_map(pair)
    img = render_preview(result, sal)
    try:
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="PNG")
        atomic_write_bytes(args.out, buf.getvalue())
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write {args.out}: {exc}")
    print(f"y_band={band.y_lo!r},{band.y_hi!r} degenerate={str(band.degenerate).lower()}")
    for ann in result.placed:
        cy = ann.bbox.y + ann.bbox.h / 2.0
        print(f"placed x={ann.bbox.x!r} y={ann.bbox.y!r} w={ann.bbox.w!r} h={ann.bbox.h!r} center_y={cy!r}")
    if result.skipped:
        print(f"skipped={result.skipped}")
    return EXIT_OK


def cmd_inspect_weights(args) -> int:
    """Per-image similarity weights of the checkpoint's pseudo-labels against the stored ground truth."""
    ts, meta = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    config = _config_from_meta(meta)
    grid = AnchorGrid(config.anchor_stride, config.anchor_sizes())
    thresh = config.score_thresh if args.score_thresh is None else args.score_thresh
    for pair in sorted(ds.pairs, key=lambda p: p.id)[: args.limit]:
        gt = ds.annotations.get(pair.id, [])
        feats = ImageFeatures(ts.student, pair)
        pls = generate_pseudo_labels(ts, pair, gt, thresh, grid, feats)
        if not pls or not gt:
            print(f"image={pair.id} n_pseudo={len(pls)} n_gt={len(gt)} weights=undefined")
            continue
        rects = window_rects(boxes_to_array([a.bbox for a in gt]), pair.width, pair.height)
        gt_lat = {k: feats.pool(k, rects) for k in MODALITIES}
        pl_lat = {k: np.stack([p.latents[k] for p in pls]) for k in MODALITIES}
        w = compute_weights(pl_lat, gt_lat)
        vals = " ".join(f"w_{k.value}={w.raw[k]!r}" for k in MODALITIES)
        print(f"image={pair.id} n_pseudo={len(pls)} n_gt={len(gt)} {vals}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparseped", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic visible/thermal dataset")
    g.add_argument("out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--width", type=int, default=160)
    g.add_argument("--height", type=int, default=120)
    g.add_argument("--min-h", type=float, default=12.0)
    g.add_argument("--max-h", type=float, default=48.0)

    s = sub.add_parser("sparsify", help="remove a fraction of boxes, smallest first")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--fraction", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("area", "random"), default="area")

    t = sub.add_parser("train", help="train a detector; extra --key value pairs override the config")
    t.add_argument("data")
    t.add_argument("out")
    t.add_argument("--config")
    t.add_argument("--eval-data")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--json", help="write the full report record here")
    e.add_argument("--teacher", action="store_true", help="evaluate the teacher instead of the student")

    a = sub.add_parser("augment-preview", help="render one retrieval-augmented pair")
    a.add_argument("data")
    a.add_argument("out")
    a.add_argument("--image-id", type=int, default=0)
    a.add_argument("--m", type=int, default=1)
    a.add_argument("--stride", type=int, default=4)
    a.add_argument("--empty-store", action="store_true")
    a.add_argument("--patch-w", type=float, default=10.0)
    a.add_argument("--patch-h", type=float, default=24.0)

    w = sub.add_parser("inspect-weights", help="print per-image similarity weights of a checkpoint")
    w.add_argument("checkpoint")
    w.add_argument("data")
    w.add_argument("--limit", type=int, default=20)
    w.add_argument("--score-thresh", type=float)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "sparsify":
            return cmd_sparsify(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "augment-preview":
            return cmd_augment_preview(args)
        if args.command == "inspect-weights":
            return cmd_inspect_weights(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    parser.error(f"unknown command {args.command}")
    return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
