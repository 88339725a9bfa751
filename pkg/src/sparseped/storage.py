"""On-disk formats: dataset trees, exemplar stores, metrics streams.

Dataset tree::

    manifest.json            canonical record (split, images, boxes)
    images/<id>_v.png        8-bit RGB visible
    images/<id>_t.png        8-bit gray thermal
    annotations/<id>.txt     one ``person x y w h source`` line per box

Pixel values are stored as round(255 * v); generated images are already on
that lattice, so save -> load is exact.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
from PIL import Image

from .apra import ExemplarPatch, ExemplarStore
from .core import Annotation, BBox, ImagePair, Source
from .synthdata import Dataset, SceneParams


class MalformedData(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def png_bytes(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def annotation_lines(anns: Iterable[Annotation]) -> str:
    return "".join(f"person {a.bbox.x!r} {a.bbox.y!r} {a.bbox.w!r} {a.bbox.h!r} {a.source.value}\n" for a in anns)


def parse_annotation_lines(text: str, first_id: int = 0) -> List[Annotation]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6 or parts[0] != "person":
            raise MalformedData(f"line {n}: expected 'person x y w h source'")
        try:
            x, y, w, h = map(float, parts[1:5])
            src = Source(parts[5])
            out.append(Annotation(BBox(x, y, w, h), src, first_id + len(out)))
        except ValueError as exc:
            raise MalformedData(f"line {n}: {exc}") from exc
    return out


def _params_record(p: SceneParams) -> dict:
    d = dict(p.__dict__)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    images = []
    for pair in sorted(ds.pairs, key=lambda p: p.id):
        anns = ds.annotations.get(pair.id, [])
        atomic_write_bytes(out / "images" / f"{pair.id}_v.png", png_bytes(pair.visible))
        atomic_write_bytes(out / "images" / f"{pair.id}_t.png", png_bytes(pair.thermal))
        atomic_write_text(out / "annotations" / f"{pair.id}.txt", annotation_lines(anns))
        images.append({
            "id": pair.id,
            "daynight": pair.daynight,
            "width": pair.width,
            "height": pair.height,
            "annotations": [
                {"id": a.id, "x": a.bbox.x, "y": a.bbox.y, "w": a.bbox.w, "h": a.bbox.h, "source": a.source.value}
                for a in anns
            ],
        })
    manifest = {"format": "sparseped-dataset/1", "split": ds.split, "params": _params_record(ds.params),
                "images": images}
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise MalformedData(f"manifest: {exc}") from exc
    try:
        params = SceneParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["params"].items()})
        pairs, annotations = [], {}
        for rec in manifest["images"]:
            i = int(rec["id"])
            vis = read_png(root / "images" / f"{i}_v.png")
            th = read_png(root / "images" / f"{i}_t.png")
            pairs.append(ImagePair(vis, th, rec["daynight"], i))
            annotations[i] = [Annotation(BBox(float(a["x"]), float(a["y"]), float(a["w"]), float(a["h"])),
                                         Source(a["source"]), int(a["id"])) for a in rec["annotations"]]
        return Dataset(pairs, annotations, manifest["split"], params)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MalformedData):
            raise
        raise MalformedData(f"bad dataset record: {exc}") from exc


def save_store(store: ExemplarStore, out_dir) -> None:
    out = Path(out_dir)
    records = []
    for p in store.patches:
        atomic_write_bytes(out / f"{p.id}_v.png", png_bytes(p.pixels_v))
        atomic_write_bytes(out / f"{p.id}_t.png", png_bytes(p.pixels_t))
        w, h = p.native_size
        records.append({"id": p.id, "brightness": p.source_brightness, "size": [w, h], "origin": p.origin})
    atomic_write_text(out / "manifest.json", json.dumps({"patches": records}, indent=1, sort_keys=True) + "\n")


def load_store(in_dir) -> ExemplarStore:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    patches = []
    for rec in manifest["patches"]:
        v = read_png(root / f"{rec['id']}_v.png")
        t = read_png(root / f"{rec['id']}_t.png")
        if [v.shape[1], v.shape[0]] != rec["size"]:
            raise MalformedData(f"patch {rec['id']} size mismatch")
        patches.append(ExemplarPatch(v, t, float(rec["brightness"]), rec["origin"], int(rec["id"])))
    return ExemplarStore(patches)


def format_record(rec: Dict) -> str:
    """One self-describing ``key=value`` metrics line; floats use repr for exactness."""
    parts = []
    for k, v in rec.items():
        if isinstance(v, float):
            v = repr(v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def parse_record(line: str) -> Dict[str, str]:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


class MetricsWriter:
    """Append-only metrics stream, flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def __call__(self, rec: Dict) -> None:
        self._fh.write(format_record(rec) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
