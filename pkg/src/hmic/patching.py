"""Slide ingestion, tiling and the patch manifest."""

from __future__ import annotations

import csv
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import FormatError, ManifestError, ValidationError

log = logging.getLogger(__name__)

PARENT_LABELS = ("Normal", "EE", "Celiac")
CHILD_LABELS = ("I", "IIIa", "IIIb", "IIIc")
CLUSTERS = ("useful", "not_useful")
SPLITS = ("train", "test")
DEFAULT_PATCH_SIZE = 1000

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class SlideImage:
    slide_id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    source_path: str = ""


@dataclass
class PatchRecord:
    slide_id: str
    patch_id: str
    row: int
    col: int
    path: str
    label_parent: Optional[str] = None
    label_child: Optional[str] = None
    cluster: Optional[str] = None
    split: str = "train"

    def validate(self):
        if self.label_parent is not None and self.label_parent not in PARENT_LABELS:
            raise ValidationError(f"{self.patch_id}: unknown parent label {self.label_parent!r}")
        if self.label_child is not None:
            if self.label_child not in CHILD_LABELS:
                raise ValidationError(f"{self.patch_id}: unknown child label {self.label_child!r}")
            if self.label_parent != "Celiac":
                raise ValidationError(
                    f"{self.patch_id}: child label {self.label_child!r} requires parent label "
                    f"'Celiac', got {self.label_parent!r}")
        if self.cluster is not None and self.cluster not in CLUSTERS:
            raise ValidationError(f"{self.patch_id}: unknown cluster {self.cluster!r}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.patch_id}: unknown split {self.split!r}")
        if self.row < 0 or self.col < 0:
            raise ValidationError(f"{self.patch_id}: negative grid coordinates")
        return self


def patch_relpath(slide_id, row, col) -> str:
    return f"{slide_id}/{row}_{col}.png"


def grid_size(height, width, patch_size, stride) -> tuple:
    if height < patch_size or width < patch_size:
        return 0, 0
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


def tile_slide(slide: SlideImage, patch_size=DEFAULT_PATCH_SIZE, stride=None,
               label_parent=None, label_child=None, split="train"):
    """Cut ``slide`` into ``patch_size`` squares at multiples of ``stride``.

    Windows that would run past the right or bottom border are dropped.  Returns
    ``(records, patches)`` with ``patches`` aligned to ``records``; ``row`` and
    ``col`` are grid indices, not pixel offsets.
    """
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    stride = patch_size if stride is None else stride
    if stride <= 0:
        raise ValueError("stride must be positive")
    h, w = slide.pixels.shape[:2]
    rows, cols = grid_size(h, w, patch_size, stride)
    if rows == 0:
        msg = f"slide {slide.slide_id} ({h}x{w}) is smaller than the {patch_size}px patch size"
        warnings.warn(msg)
        log.warning(msg)
        return [], []
    records, patches = [], []
    for r in range(rows):
        for c in range(cols):
            y, x = r * stride, c * stride
            patches.append(slide.pixels[y:y + patch_size, x:x + patch_size])
            records.append(PatchRecord(
                slide_id=slide.slide_id, patch_id=f"{slide.slide_id}_{r}_{c}", row=r, col=c,
                path=patch_relpath(slide.slide_id, r, c), label_parent=label_parent,
                label_child=label_child, split=split).validate())
    return records, patches


def reassemble(patches, records, patch_size):
    """Stitch non-overlapping patches back into the covered region of their slide."""
    rows = max(r.row for r in records) + 1
    cols = max(r.col for r in records) + 1
    out = np.zeros((rows * patch_size, cols * patch_size, 3), dtype=patches[0].dtype)
    for rec, p in zip(records, patches):
        out[rec.row * patch_size:(rec.row + 1) * patch_size,
            rec.col * patch_size:(rec.col + 1) * patch_size] = p
    return out


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


def _png_header(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise FormatError(f"{path}: not a PNG file")
    _, _, bit_depth, color_type = struct.unpack(">IIBB", head[16:26])
    return bit_depth, color_type


def load_png_rgb(path) -> np.ndarray:
    """8-bit RGB PNG -> float32 ``(H, W, 3)`` array in [0, 1]."""
    path = Path(path)
    try:
        bit_depth, color_type = _png_header(path)
    except OSError as exc:
        raise OSError(f"{path}: cannot read file ({exc})") from exc
    if color_type != 2:
        raise FormatError(
            f"{path}: expected an RGB PNG, got {_COLOR_TYPES.get(color_type, color_type)}")
    if bit_depth != 8:
        raise FormatError(f"{path}: expected 8-bit channels, got bit depth {bit_depth}")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise OSError(f"{path}: corrupt or unreadable PNG ({exc})") from exc
    return arr.astype(np.float32) / 255.0


def load_slide(path, slide_id=None) -> SlideImage:
    path = Path(path)
    return SlideImage(slide_id or path.stem, load_png_rgb(path), str(path))


def to_uint8(pixels) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(pixels, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False)
    return path


def save_patch(patch, out_dir, slide_id=None, row=None, col=None, record=None) -> Path:
    """Write a patch to ``out_dir/<slide_id>/<row>_<col>.png``."""
    if record is not None:
        rel = record.path
    else:
        rel = patch_relpath(slide_id, row, col)
    return save_png(patch, Path(out_dir) / rel)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_FIELDS = [f.name for f in fields(PatchRecord)]


def write_manifest(records, path) -> Path:
    """JSON-Lines, one record per line, fields in declaration order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            rec.validate()
            fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")
    return path


def read_manifest(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict) or set(obj) != set(_FIELDS):
                raise ManifestError(f"expected fields {_FIELDS}", lineno)
            try:
                rec = PatchRecord(**obj)
                if not isinstance(rec.row, int) or not isinstance(rec.col, int):
                    raise ValidationError("row/col must be integers")
                records.append(rec.validate())
            except ValidationError as exc:
                raise ManifestError(str(exc), lineno) from None
    return records


def read_slide_labels(path) -> dict:
    """``slide_id,label_parent,label_child[,split]`` CSV -> {slide_id: row dict}."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"slide_id", "label_parent"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            child = (row.get("label_child") or "").strip() or None
            parent = (row.get("label_parent") or "").strip() or None
            split = (row.get("split") or "").strip() or None
            PatchRecord(row["slide_id"], row["slide_id"], 0, 0, "", parent, child).validate()
            out[row["slide_id"]] = {"label_parent": parent, "label_child": child, "split": split}
    return out


def write_slide_labels(labels: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "label_parent", "label_child", "split"])
        for sid, lab in labels.items():
            w.writerow([sid, lab["label_parent"] or "", lab["label_child"] or "", lab.get("split") or ""])
    return path


def assign_splits(slide_ids, test_fraction=0.3, seed=0, strata=None) -> dict:
    """Slide-level train/test assignment, stratified by ``strata[slide_id]`` when given.

    Each stratum contributes ``round(test_fraction * n)`` test slides (at least
    one when it has two or more slides), so patches of one slide never straddle
    the split.
    """
    rng = np.random.default_rng(seed)
    groups = {}
    for sid in sorted(slide_ids):
        groups.setdefault(None if strata is None else strata[sid], []).append(sid)
    out = {}
    for key in sorted(groups, key=str):
        ids = groups[key]
        n_test = int(round(test_fraction * len(ids)))
        if len(ids) >= 2:
            n_test = min(max(n_test, 1), len(ids) - 1)
        test = set(rng.permutation(ids)[:n_test].tolist())
        for sid in ids:
            out[sid] = "test" if sid in test else "train"
    return out


def patch_directory(slides_dir, labels_csv, out_dir, patch_size=DEFAULT_PATCH_SIZE, stride=None,
                    test_fraction=0.3, seed=0, manifest_name="manifest.jsonl"):
    """Tile every labelled PNG slide in ``slides_dir``; write patches and the manifest.

    Returns the list of records written.
    """
    slides_dir, out_dir = Path(slides_dir), Path(out_dir)
    labels = read_slide_labels(labels_csv)
    strata = {sid: f"{v['label_parent']}/{v['label_child']}" for sid, v in labels.items()}
    auto = assign_splits(labels, test_fraction, seed, strata)
    records = []
    for sid in sorted(labels):
        path = slides_dir / f"{sid}.png"
        if not path.exists():
            log.warning("slide %s listed in %s but %s is missing", sid, labels_csv, path)
            continue
        lab = labels[sid]
        slide = load_slide(path, sid)
        recs, patches = tile_slide(slide, patch_size, stride, lab["label_parent"],
                                   lab["label_child"], lab["split"] or auto[sid])
        for rec, p in zip(recs, patches):
            save_patch(p, out_dir, record=rec)
        records.extend(recs)
    write_manifest(records, out_dir / manifest_name)
    return records


def load_patches(records, patches_dir) -> np.ndarray:
    """Load the PNGs behind ``records`` as one float32 ``(N, H, W, 3)`` array."""
    patches_dir = Path(patches_dir)
    if not records:
        return np.zeros((0, 0, 0, 3), np.float32)
    first = load_png_rgb(patches_dir / records[0].path)
    out = np.empty((len(records),) + first.shape, np.float32)
    out[0] = first
    for i, rec in enumerate(records[1:], start=1):
        out[i] = load_png_rgb(patches_dir / rec.path)
    return out
