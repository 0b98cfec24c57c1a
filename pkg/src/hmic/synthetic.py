"""Procedural H&E-like slides with known labels, for testing the pipeline.

Tissue tiles are rendered in optical-density space as ``I = exp(-W @ C)``,
where ``W`` holds a hematoxylin-like and an eosin-like absorption vector and
``C`` holds two concentration maps built from sinusoidal gratings.  The classes
differ in two ways:

* parent classes differ in H:E ratio (hue) and grating frequency;
* Celiac severity grades share a hue and differ only in grating frequency.
  Frequency rises with severity, mimicking denser villus damage.

Every slide gets its own stain matrix (each stain vector tilted up to
``stain_jitter_deg``) and a concentration scale drawn from ``concentration_range``.
This is the lab-to-lab variation that stain normalization is meant to remove.
Background tiles are flat white or light gray with faint noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .patching import PatchRecord, assign_splits, save_png, to_uint8, write_manifest, \
    write_slide_labels

H_VECTOR = np.array([0.65, 0.70, 0.29])
E_VECTOR = np.array([0.07, 0.99, 0.11])
REFERENCE_STAINS = np.stack([H_VECTOR / np.linalg.norm(H_VECTOR),
                             E_VECTOR / np.linalg.norm(E_VECTOR)], axis=1)

# (hematoxylin amplitude, eosin amplitude, cycles per tile)
PARENT_TEXTURES = {
    "Normal": (0.35, 1.00, 3.0),
    "EE": (0.75, 0.75, 6.0),
}
CELIAC_HUE = (1.05, 0.40)
# Celiac grades: (fibre orientation in degrees, fibre density in cycles per tile).
# Density rises monotonically with severity; orientation keeps the grades
# separable after 4x pooling, where density alone aliases.
CHILD_TEXTURES = {"I": (0.0, 6.0), "IIIa": (45.0, 8.0), "IIIb": (90.0, 10.0),
                  "IIIc": (135.0, 12.0)}
ORIENTATION_JITTER = 8.0


@dataclass
class SyntheticSpec:
    n_slides: dict = field(default_factory=lambda: {"Normal": 10, "EE": 10})
    n_celiac: dict = field(default_factory=lambda: {"I": 10, "IIIa": 10, "IIIb": 10, "IIIc": 10})
    slide_size: int = 512
    tile: int = 128
    blank_fraction: float = 0.0
    stain_jitter_deg: float = 6.0
    concentration_range: tuple = (0.6, 1.4)
    noise: float = 0.03
    test_fraction: float = 0.3
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.blank_fraction <= 1.0:
            raise ArgumentError("blank_fraction must lie in [0, 1]")
        if self.slide_size < self.tile or self.slide_size % self.tile:
            raise ArgumentError("slide_size must be a positive multiple of tile")
        total = sum(self.n_slides.values()) + sum(self.n_celiac.values())
        if total == 0:
            raise ArgumentError("spec produces no slides")
        if self.blank_fraction >= 1.0:
            raise ArgumentError("blank_fraction 1.0 leaves no labelled tissue tiles")
        for k in self.n_slides:
            if k not in PARENT_TEXTURES:
                raise ArgumentError(f"unknown non-Celiac parent class {k!r}")
        for k in self.n_celiac:
            if k not in CHILD_TEXTURES:
                raise ArgumentError(f"unknown severity grade {k!r}")
        return self

    @property
    def tiles_per_slide(self):
        return (self.slide_size // self.tile) ** 2


def filter_spec(seed=0) -> SyntheticSpec:
    """Corpus for the patch-filter check: 72 slides x 25 tiles = 1800 patches, 30% blank."""
    return SyntheticSpec(n_slides={"Normal": 12, "EE": 12},
                         n_celiac={"I": 12, "IIIa": 12, "IIIb": 12, "IIIc": 12},
                         slide_size=640, tile=128, blank_fraction=0.3, seed=seed)


def texture_params(parent, child=None):
    if parent == "Celiac":
        return CELIAC_HUE + (CHILD_TEXTURES[child or "I"][1],)
    return PARENT_TEXTURES[parent]


def rotate_toward(v, angle_deg, rng):
    """Tilt unit vector ``v`` by ``angle_deg`` in a random direction, staying nonnegative."""
    d = rng.normal(size=3)
    d -= d.dot(v) * v
    d /= np.linalg.norm(d)
    a = np.deg2rad(angle_deg)
    out = np.abs(np.cos(a) * v + np.sin(a) * d)
    return out / np.linalg.norm(out)


def slide_stains(rng, jitter_deg):
    cols = [rotate_toward(REFERENCE_STAINS[:, j], rng.uniform(0, jitter_deg), rng) for j in (0, 1)]
    return np.stack(cols, axis=1)


def grating(size, freq, rng, orientation=None):
    """Cosine grating in [0, 1].

    With ``orientation`` (degrees) a single grating near that angle, otherwise the
    product of two random-orientation gratings.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.ones((size, size))
    for _ in range(1 if orientation is not None else 2):
        if orientation is None:
            theta = rng.uniform(0, np.pi)
        else:
            theta = np.deg2rad(orientation + rng.uniform(-ORIENTATION_JITTER, ORIENTATION_JITTER))
        phase = rng.uniform(0, 2 * np.pi)
        f = freq * rng.uniform(0.92, 1.08)
        out *= 0.5 + 0.5 * np.cos(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return out


def tissue_concentrations(size, parent, child, rng, noise=0.03):
    """Two ``(size, size)`` concentration maps (hematoxylin, eosin)."""
    h_amp, e_amp, freq = texture_params(parent, child)
    orient = CHILD_TEXTURES[child or "I"][0] if parent == "Celiac" else None
    g = grating(size, freq, rng, orient)
    ch = h_amp * (0.15 + 0.85 * g) + noise * rng.normal(size=g.shape)
    ce = e_amp * (0.35 + 0.65 * (1 - g)) + noise * rng.normal(size=g.shape)
    return np.clip(ch, 0, None), np.clip(ce, 0, None)


def render_od(stains, ch, ce):
    od = stains[:, 0] * ch[..., None] + stains[:, 1] * ce[..., None]
    return np.exp(-od)


def blank_tile(size, rng):
    level = rng.uniform(0.88, 0.98)
    tint = rng.uniform(-0.01, 0.01, size=3)
    return np.clip(level + tint + 0.005 * rng.normal(size=(size, size, 3)), 0, 1)


def tissue_tile(size, parent, child, stains, scale, rng, noise=0.03):
    ch, ce = tissue_concentrations(size, parent, child, rng, noise)
    return render_od(stains, scale * ch, scale * ce)


@dataclass
class SyntheticSlide:
    slide_id: str
    label_parent: str
    label_child: object
    pixels: np.ndarray
    blank: np.ndarray  # (rows, cols) bool
    stains: np.ndarray
    scale: float


def _slide_list(spec):
    out = []
    for parent, n in spec.n_slides.items():
        out += [(parent, None)] * n
    for child, n in spec.n_celiac.items():
        out += [("Celiac", child)] * n
    return out


def make_slide(slide_id, parent, child, spec: SyntheticSpec, rng) -> SyntheticSlide:
    grid = spec.slide_size // spec.tile
    n_tiles = grid * grid
    n_blank = int(round(spec.blank_fraction * n_tiles))
    blank = np.zeros(n_tiles, bool)
    blank[rng.permutation(n_tiles)[:n_blank]] = True
    blank = blank.reshape(grid, grid)
    stains = slide_stains(rng, spec.stain_jitter_deg)
    scale = float(rng.uniform(*spec.concentration_range))
    pixels = np.empty((spec.slide_size, spec.slide_size, 3))
    t = spec.tile
    for r in range(grid):
        for c in range(grid):
            if blank[r, c]:
                tile = blank_tile(t, rng)
            else:
                tile = tissue_tile(t, parent, child, stains, scale, rng, spec.noise)
            pixels[r * t:(r + 1) * t, c * t:(c + 1) * t] = tile
    return SyntheticSlide(slide_id, parent, child, pixels.astype(np.float32), blank, stains, scale)


def generate_slides(spec: SyntheticSpec):
    """Yield slides in a fixed order; slide ``i`` uses its own child seed of ``spec.seed``."""
    spec.validate()
    kinds = _slide_list(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(kinds))
    for i, ((parent, child), ss) in enumerate(zip(kinds, seeds)):
        tag = parent if child is None else f"{parent}-{child}"
        yield make_slide(f"syn{i:03d}_{tag}", parent, child, spec, np.random.default_rng(ss))


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir=None, write_patches=False):
    """Build the corpus in memory and optionally write it to disk.

    Returns ``(records, patches, blank_flags, slides)``.  ``records`` carry the
    labels and slide-level splits.  ``blank_flags`` is the per-tile ground
    truth.  ``patches`` is an ``(N, t, t, 3)`` float32 array quantized to 8
    bits, so in-memory values equal what a PNG round trip would give.

    With ``out_dir`` set, the slides go to ``slides/<id>.png`` together with
    ``labels.csv`` and ``ground_truth.jsonl`` (one line per tile with its blank
    flag).  With ``write_patches`` also set, patches and ``manifest.jsonl`` go
    under ``patches/``.
    """
    slides = list(generate_slides(spec))
    strata = {s.slide_id: f"{s.label_parent}/{s.label_child}" for s in slides}
    split = assign_splits([s.slide_id for s in slides], spec.test_fraction, spec.seed, strata)
    records, patches, blanks = [], [], []
    t = spec.tile
    for s in slides:
        q = to_uint8(s.pixels).astype(np.float32) / 255.0
        grid = spec.slide_size // t
        for r in range(grid):
            for c in range(grid):
                records.append(PatchRecord(s.slide_id, f"{s.slide_id}_{r}_{c}", r, c,
                                           f"{s.slide_id}/{r}_{c}.png", s.label_parent,
                                           s.label_child, None, split[s.slide_id]))
                patches.append(q[r * t:(r + 1) * t, c * t:(c + 1) * t])
                blanks.append(bool(s.blank[r, c]))
    patches = np.stack(patches) if patches else np.zeros((0, t, t, 3), np.float32)
    if out_dir is not None:
        write_dataset(out_dir, spec, slides, records, patches, blanks, split, write_patches)
    return records, patches, np.array(blanks, bool), slides


def write_dataset(out_dir, spec, slides, records, patches, blanks, split, write_patches=False):
    import json

    out = Path(out_dir)
    for s in slides:
        save_png(s.pixels, out / "slides" / f"{s.slide_id}.png")
    write_slide_labels({s.slide_id: {"label_parent": s.label_parent, "label_child": s.label_child,
                                     "split": split[s.slide_id]} for s in slides},
                       out / "labels.csv")
    with open(out / "ground_truth.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec, b in zip(records, blanks):
            fh.write(json.dumps({"patch_id": rec.patch_id, "blank": bool(b),
                                 "label_parent": rec.label_parent,
                                 "label_child": rec.label_child}) + "\n")
    spec_dict = asdict(spec)
    spec_dict["concentration_range"] = list(spec.concentration_range)
    (out / "spec.json").write_text(json.dumps(spec_dict, indent=2, sort_keys=True) + "\n")
    if write_patches:
        for rec, p in zip(records, patches):
            save_png(p, out / "patches" / rec.path)
        write_manifest(records, out / "patches" / "manifest.jsonl")


def planted_quadrant_patches(n, size=128, seed=0, freq=14.0):
    """Grad-CAM check corpus.

    Class 0 tiles are low-frequency Normal-like tissue.  Class 1 tiles are the
    same background with a high-frequency, hematoxylin-heavy patch confined to
    one randomly chosen quadrant.  Returns ``(patches, labels, quadrants)``;
    the quadrant is -1 for class 0 and otherwise 0..3 in row-major order
    (0 top-left, 3 bottom-right).
    """
    rng = np.random.default_rng(seed)
    half = size // 2
    out = np.empty((n, size, size, 3), np.float32)
    labels = np.zeros(n, np.int64)
    quads = np.full(n, -1, np.int64)
    for i in range(n):
        ch, ce = tissue_concentrations(size, "Normal", None, rng)
        label = i % 2
        if label:
            q = int(rng.integers(4))
            g = grating(half, freq * half / size, rng)
            r0, c0 = (q // 2) * half, (q % 2) * half
            ch[r0:r0 + half, c0:c0 + half] = 1.1 * (0.1 + 0.9 * g)
            ce[r0:r0 + half, c0:c0 + half] = 0.3 * (0.3 + 0.7 * (1 - g))
            quads[i] = q
        labels[i] = label
        out[i] = render_od(REFERENCE_STAINS, ch, ce)
    return out, labels, quads
