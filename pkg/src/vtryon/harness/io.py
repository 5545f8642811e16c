"""On-disk dataset layout and evaluation reports.

Layout written by :func:`write_dataset`::

    persons/<id>.png           person image
    pose/<id>_pose.png         part-colour pose map
    seg/<id>.png               single-channel label map
    agnostic/<id>.png          person with the dilated garment mask filled
    garments/<slot>/<id>.png   flat product image, only for slots that are worn
    annotations/<id>.json      attribute record
    manifest.json              sample ids, prompts and worn slots

All files are written from uint8 arrays with no timestamps, so the same
samples always produce byte-identical directories.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import InvalidArgumentError, ShapeError
from ..preprocessing import GarmentAnnotation, parse_annotation
from .metrics import MetricReport, image_set_report
from .synthetic import SLOTS, SyntheticSample, to_uint8, to_unit

DATASET_VERSION = "vtryon-data/1"
IMAGE_EXT = ".png"


def save_png(path: str | Path, array: np.ndarray):
    """Write a uint8 array (``H x W`` or ``H x W x 3``) or a [-1, 1] float image."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.array(im)


def load_image(path: str | Path) -> np.ndarray:
    """RGB PNG -> ``H x W x 3`` float32 in [-1, 1]."""
    arr = load_png(path)
    if arr.ndim != 3:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return to_unit(arr)


def write_dataset(samples: list[SyntheticSample], out_dir: str | Path, seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        save_png(out / "persons" / f"{s.id}.png", s.person)
        save_png(out / "pose" / f"{s.id}_pose.png", s.pose)
        save_png(out / "seg" / f"{s.id}.png", s.seg.astype(np.uint8))
        save_png(out / "agnostic" / f"{s.id}.png", s.agnostic)
        worn = []
        for slot in SLOTS:
            if s.garments[slot] is not None:
                save_png(out / "garments" / slot / f"{s.id}.png", s.garments[slot])
                worn.append(slot)
        ann = out / "annotations" / f"{s.id}.json"
        ann.parent.mkdir(parents=True, exist_ok=True)
        ann.write_text(s.annotation.to_json() + "\n")
        entries.append({"id": s.id, "prompt": s.prompt, "slots": worn})
    H, W = samples[0].person.shape[:2] if samples else (0, 0)
    manifest = {"version": DATASET_VERSION, "resolution": [H, W], "seed": seed,
                "n": len(samples), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class DatasetRecord:
    id: str
    person: np.ndarray
    pose: np.ndarray
    seg: np.ndarray
    agnostic: np.ndarray
    garments: dict
    annotation: GarmentAnnotation
    prompt: str


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise InvalidArgumentError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise InvalidArgumentError(f"unsupported dataset version {manifest.get('version')!r}")
    return manifest


def read_dataset(root: str | Path) -> list[DatasetRecord]:
    root = Path(root)
    records = []
    for e in read_manifest(root)["samples"]:
        sid = e["id"]
        garments = {slot: load_image(root / "garments" / slot / f"{sid}.png") if slot in e["slots"] else None
                    for slot in SLOTS}
        records.append(DatasetRecord(
            id=sid,
            person=load_image(root / "persons" / f"{sid}.png"),
            pose=load_image(root / "pose" / f"{sid}_pose.png"),
            seg=load_png(root / "seg" / f"{sid}.png"),
            agnostic=load_image(root / "agnostic" / f"{sid}.png"),
            garments=garments,
            annotation=parse_annotation((root / "annotations" / f"{sid}.json").read_text()),
            prompt=e["prompt"],
        ))
    return records


def read_garment_manifest(path: str | Path) -> dict[str, np.ndarray | None]:
    """``{"upper": path|null, "lower": path|null, "full": path|null}``; relative paths
    resolve against the manifest's directory."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"garment manifest is not valid JSON: {e}") from None
    if not isinstance(spec, dict):
        raise InvalidArgumentError("garment manifest must be a JSON object")
    unknown = set(spec) - set(SLOTS)
    if unknown:
        raise InvalidArgumentError(f"unknown garment slots {sorted(unknown)}; expected {list(SLOTS)}")
    out = {}
    for slot in SLOTS:
        p = spec.get(slot)
        if p is None:
            out[slot] = None
            continue
        p = Path(p)
        out[slot] = load_image(p if p.is_absolute() else path.parent / p)
    return out


# --- evaluation --------------------------------------------------------------

def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InvalidArgumentError(f"{directory} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == IMAGE_EXT)


def evaluate_dirs(generated: str | Path, reference: str | Path, seed: int = 0) -> MetricReport:
    """Pair images by file name and compute SSIM/FID/KID.

    File names are sorted, so the report does not depend on directory order.
    """
    gen = {p.name: p for p in list_images(generated)}
    ref = {p.name: p for p in list_images(reference)}
    if not gen or set(gen) != set(ref):
        missing = sorted(set(gen) ^ set(ref))[:5]
        raise InvalidArgumentError(f"generated and reference images do not pair up (e.g. {missing})")
    names = sorted(gen)
    g = [load_image(gen[n]) for n in names]
    r = [load_image(ref[n]) for n in names]
    if any(a.shape != b.shape for a, b in zip(g, r)):
        raise ShapeError("generated and reference images differ in size")
    return image_set_report(g, r, seed=seed)


def write_report(report: MetricReport, out_dir: str | Path, name: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    jpath = out / f"{name}.json"
    jpath.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    cpath = out / f"{name}.csv"
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(data):
            w.writerow([k, "" if data[k] is None else data[k]])
    return jpath, cpath
