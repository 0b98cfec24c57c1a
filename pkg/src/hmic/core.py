"""Patch classifiers, slide aggregation and the two-level hierarchy.

The parent classifier separates Normal, EE and Celiac.  The child classifier
grades Celiac patches as I, IIIa, IIIb or IIIc.  Each model records its input
preprocessing in ``train_config["preprocess"]`` so that training and inference
always agree:

* ``{"mode": "color_balance", "percent": p}`` applies gray-world balancing at
  strength ``p``; the gains come from all patches of the slide;
* ``{"mode": "stain_normalize", "target": <profile dict>}`` estimates a stain
  profile from the slide's patches and maps them onto the target;
* ``{"mode": "none"}``.

Patches whose size differs from the model input are area-resized afterwards.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import stain
from . import tensor_nn as nn
from .bundle import CHILD_CLASSES, FLAT_CLASSES, PARENT_CLASSES, ModelBundle
from .errors import ArgumentError, ConfigurationError, DataError, DimensionError, EmptySlideError
from .patch_filter import resize_area

log = logging.getLogger(__name__)

DEFAULT_CB_PERCENT = 10.0


def default_workers() -> int:
    env = os.environ.get("HMIC_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"HMIC_WORKERS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigurationError("HMIC_WORKERS must be at least 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Labels and training data
# ---------------------------------------------------------------------------

def class_names_for(level):
    if level == "parent":
        return PARENT_CLASSES
    if level == "child":
        return CHILD_CLASSES
    if level in ("flat", "flat_baseline", "flat_cnn", "flat_mlp"):
        return FLAT_CLASSES
    raise ArgumentError(f"unknown level {level!r}")


def record_label(rec, level) -> Optional[str]:
    """Class name of ``rec`` at ``level``, or None when it does not take part."""
    if level == "parent":
        return rec.label_parent
    if level == "child":
        return rec.label_child if rec.label_parent == "Celiac" else None
    if rec.label_parent == "Celiac":
        return f"Celiac/{rec.label_child}" if rec.label_child else None
    return rec.label_parent


def select_records(records, level, split="train", class_names=None):
    """Indices and integer labels of the useful ``split`` patches that belong to ``level``.

    Raises DataError naming the first class with no patches.
    """
    class_names = list(class_names or class_names_for(level))
    idx, labels = [], []
    for i, rec in enumerate(records):
        if split is not None and rec.split != split:
            continue
        if rec.cluster == "not_useful":
            continue
        name = record_label(rec, level)
        if name is None:
            continue
        if name not in class_names:
            raise DataError(f"patch {rec.patch_id}: label {name!r} not among {class_names}")
        idx.append(i)
        labels.append(class_names.index(name))
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=len(class_names))
    for name, c in zip(class_names, counts):
        if c == 0:
            raise DataError(f"no {split or 'labelled'} patches for class {name!r} at level {level!r}")
    return np.asarray(idx, dtype=np.int64), np.asarray(labels, dtype=np.int64)


@dataclass
class TrainConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    pool_dropout: float = 0.25
    dense_dropout: float = 0.5
    seed: int = 0
    level: str = "parent"
    early_stop: bool = False
    patience: int = 3
    min_rel_improvement: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ArgumentError("batch_size must be >= 1 and epochs >= 0")
        if self.alpha <= 0:
            raise ArgumentError("learning rate must be positive")


def _set_dropout(model: ModelBundle, config: TrainConfig):
    """Apply the config's dropout rates to the model's dropout layers."""
    n_drop = sum(1 for l in model.layers if l["type"] == "dropout")
    seen = 0
    for i, spec in enumerate(model.layers):
        if spec["type"] != "dropout":
            continue
        seen += 1
        prev = model.layers[i - 1]["type"] if i else ""
        spec["rate"] = config.pool_dropout if prev in ("maxpool", "avgpool") else config.dense_dropout
    return seen == n_drop


def _check_shape(model, x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise DimensionError(f"model expects {model.input_shape} inputs, got {x.shape[1:]}")
    return x


def input_stats(x):
    """Per-channel mean and std of a training batch, as stored in ``train_config``."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 1, 2))
    std = np.maximum(x.std(axis=(0, 1, 2)), 1e-3)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def _check_batch(model, x):
    """Shape-checked float32 batch, standardized with the model's stored input stats."""
    x = _check_shape(model, x)
    norm = model.train_config.get("input_norm")
    if norm:
        x = ((x - np.asarray(norm["mean"], np.float32)) / np.asarray(norm["std"], np.float32))
    return x.astype(np.float32)


def evaluate_loss(model, x, labels, batch_size=64):
    total, correct = 0.0, 0
    for s in range(0, len(x), batch_size):
        logits, _ = nn.forward(model.layers, model.weights, x[s:s + batch_size])
        loss, probs, _ = nn.softmax_cross_entropy(logits.astype(np.float64), labels[s:s + batch_size])
        total += loss * len(logits)
        correct += int((np.argmax(probs, axis=1) == labels[s:s + batch_size]).sum())
    return total / len(x), correct / len(x)


def fit(model: ModelBundle, x, labels, config: TrainConfig):
    """Minibatch Adam on mean sparse categorical cross-entropy.

    Deterministic for a fixed ``config.seed``; the same generator drives both
    the shuffling and the dropout masks.  Returns the per-epoch history.
    """
    x = _check_shape(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels) or len(x) == 0:
        raise DataError("training needs a non-empty set of labelled patches")
    if "input_norm" not in model.train_config:
        model.train_config["input_norm"] = input_stats(x)
    x = _check_batch(model, x)
    _set_dropout(model, config)
    rng = np.random.default_rng(config.seed)
    state = nn.AdamState(alpha=config.alpha, beta1=config.beta1, beta2=config.beta2,
                         epsilon=config.epsilon)
    init_loss, init_acc = evaluate_loss(model, x, labels)
    history = {"initial_loss": init_loss, "initial_accuracy": init_acc, "loss": [], "accuracy": []}
    best, stale = np.inf, 0
    n = len(x)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for s in range(0, n, config.batch_size):
            b = order[s:s + config.batch_size]
            logits, caches = nn.forward(model.layers, model.weights, x[b], training=True, rng=rng)
            loss, probs, grad = nn.softmax_cross_entropy(logits, labels[b])
            grads, _ = nn.backward(model.layers, model.weights, caches, grad.astype(np.float32))
            nn.adam_step(model.weights, grads, state)
            total += loss * len(b)
            correct += int((np.argmax(probs, axis=1) == labels[b]).sum())
        history["loss"].append(total / n)
        history["accuracy"].append(correct / n)
        log.info("epoch %d: loss %.4f acc %.4f", epoch + 1, total / n, correct / n)
        if config.early_stop:
            cur = history["loss"][-1]
            if not np.isfinite(best) or best - cur > config.min_rel_improvement * abs(best):
                best, stale = cur, 0
            else:
                stale += 1
                if stale >= config.patience:
                    history["stopped_early"] = epoch + 1
                    break
    return history


def train_level(model: ModelBundle, records, patches, config: TrainConfig, split="train"):
    """Train ``model`` on the useful ``split`` patches of its level.

    ``patches`` is aligned with ``records`` and must already be preprocessed
    (see :func:`prepare_slides`).  Child training uses only Celiac patches.
    Returns ``(model, history)``.
    """
    level = "flat" if model.level.startswith("flat") else model.level
    idx, labels = select_records(records, level, split, model.class_names)
    history = fit(model, np.asarray(patches)[idx], labels, config)
    cfg = asdict(config)
    model.train_config.update({"train": cfg, "n_train": int(len(idx)),
                               "final_loss": history["loss"][-1] if history["loss"] else None})
    return model, history


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def preprocess_slide(patches, spec, seed=0):
    """Apply one model's recorded preprocessing to all patches of a single slide."""
    x = np.asarray(patches, dtype=np.float32)
    mode = (spec or {}).get("mode", "none")
    if mode == "none" or len(x) == 0:
        return x
    if mode == "color_balance":
        params = stain.cb_percent_to_params(float(spec.get("percent", DEFAULT_CB_PERCENT)), x)
        return stain.color_balance(x, params)
    if mode == "stain_normalize":
        target = stain.StainProfile.from_dict(spec["target"])
        source = stain.estimate_stain_profile(x.reshape(-1, 1, 3), seed=seed, max_pixels=5000)
        return stain.normalize_stain(x, source, target).astype(np.float32)
    raise ConfigurationError(f"unknown preprocessing mode {mode!r}")


def prepare_slides(records, patches, spec, input_size=None, seed=0):
    """Preprocess ``patches`` slide by slide and resize to ``input_size``."""
    x = np.asarray(patches, dtype=np.float32)
    out = np.empty((len(x),) + ((input_size, input_size, 3) if input_size else x.shape[1:]),
                   np.float32)
    by_slide = {}
    for i, rec in enumerate(records):
        by_slide.setdefault(rec.slide_id, []).append(i)
    for sid in sorted(by_slide):
        ix = np.asarray(by_slide[sid])
        y = preprocess_slide(x[ix], spec, seed)
        out[ix] = resize_area(y, input_size) if input_size else y
    return out


def prepare_for_model(model: ModelBundle, patches, seed=0):
    """Preprocess one slide's patches the way ``model`` was trained."""
    x = preprocess_slide(patches, model.train_config.get("preprocess"), seed)
    if x.shape[1:] != model.input_shape:
        x = resize_area(x, model.input_shape[0])
    return x


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class PatchPrediction:
    probs: np.ndarray
    label: int

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs, int(np.argmax(probs)))  # first maximum wins


@dataclass
class SlidePrediction:
    slide_id: str
    n_patches: int
    patch_probs: list
    aggregate: np.ndarray
    label: int
    class_name: str = ""
    child: Optional["SlidePrediction"] = None

    def to_dict(self, include_patches=False):
        d = {"slide_id": self.slide_id, "n_patches": self.n_patches,
             "aggregate": [float(v) for v in self.aggregate], "label": self.label,
             "class_name": self.class_name}
        if include_patches:
            d["patch_probs"] = [[float(v) for v in p] for p in self.patch_probs]
        if self.child is not None:
            d["child"] = self.child.to_dict(include_patches)
        return d


def predict_proba(model: ModelBundle, patches, batch_size=32, workers=1) -> np.ndarray:
    """Softmax probabilities ``(N, C)`` in float64.

    Batches may run on ``workers`` threads.  Each batch is independent and the
    results are stored by position, so the output does not depend on the
    worker count.
    """
    x = _check_batch(model, patches)
    starts = list(range(0, len(x), batch_size))
    out = np.empty((len(x), model.n_classes))

    def run(s):
        logits, _ = nn.forward(model.layers, model.weights, x[s:s + batch_size])
        out[s:s + batch_size] = nn.softmax(logits.astype(np.float64), axis=1)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(run, starts))
    else:
        for s in starts:
            run(s)
    return out


def classify_patch(model: ModelBundle, patch) -> PatchPrediction:
    return PatchPrediction.from_probs(predict_proba(model, patch)[0])


def classify_slide(patch_predictions, slide_id="", class_names=None) -> SlidePrediction:
    """Slide label = argmax of the summed patch probabilities; aggregate = sum / N."""
    if len(patch_predictions) == 0:
        raise EmptySlideError(f"slide {slide_id!r} has no patches to classify")
    probs = [np.asarray(p.probs if isinstance(p, PatchPrediction) else p, dtype=np.float64)
             for p in patch_predictions]
    total = np.zeros_like(probs[0])
    for p in probs:
        total = total + p
    label = int(np.argmax(total))
    name = class_names[label] if class_names else ""
    return SlidePrediction(slide_id, len(probs), probs, total / len(probs), label, name)


def hierarchical_predict(parent_model: ModelBundle, child_model: Optional[ModelBundle], patches,
                         slide_id="", seed=0, workers=1) -> SlidePrediction:
    """Parent verdict for the slide; Celiac slides also get a nested severity grade.

    ``patches`` are the slide's filtered raw patches; each model applies its own
    recorded preprocessing.
    """
    x = np.asarray(patches, dtype=np.float32)
    if len(x) == 0:
        raise EmptySlideError(f"slide {slide_id!r} has no patches to classify")
    probs = predict_proba(parent_model, prepare_for_model(parent_model, x, seed), workers=workers)
    result = classify_slide(probs, slide_id, parent_model.class_names)
    if result.class_name == "Celiac":
        if child_model is None:
            raise ConfigurationError(f"slide {slide_id!r} is Celiac but no child model was given")
        cprobs = predict_proba(child_model, prepare_for_model(child_model, x, seed), workers=workers)
        result.child = classify_slide(cprobs, slide_id, child_model.class_names)
    return result


def hierarchical_patch_labels(parent_model, child_model, patches, seed=0, workers=1):
    """Per-patch routing: each patch the parent calls Celiac gets the child's grade.

    Returns six-way class names (``"Normal"``, ``"EE"``, ``"Celiac/<grade>"``)
    for all patches of a single slide.
    """
    x = np.asarray(patches, dtype=np.float32)
    pp = predict_proba(parent_model, prepare_for_model(parent_model, x, seed), workers=workers)
    parent_lab = np.argmax(pp, axis=1)
    names = [parent_model.class_names[i] for i in parent_lab]
    celiac = np.array([n == "Celiac" for n in names])
    if celiac.any():
        if child_model is None:
            raise ConfigurationError("patches routed to Celiac but no child model was given")
        # Stain statistics come from the whole slide, as in training.
        cx = prepare_for_model(child_model, x, seed)[celiac]
        cl = np.argmax(predict_proba(child_model, cx, workers=workers), axis=1)
        for i, c in zip(np.flatnonzero(celiac), cl):
            names[i] = f"Celiac/{child_model.class_names[c]}"
    return names


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def feature_layer_index(model: ModelBundle) -> int:
    """Index of the last spatial feature map: the pool after the last conv, else the conv."""
    last_conv = max((i for i, l in enumerate(model.layers) if l["type"] == "conv"), default=None)
    if last_conv is None:
        raise ArgumentError("Grad-CAM needs a model with at least one conv layer")
    idx = last_conv
    for i in range(last_conv + 1, len(model.layers)):
        kind = model.layers[i]["type"]
        if kind in ("maxpool", "avgpool"):
            idx = i
        elif kind != "dropout":
            break
    return idx


def bilinear_resize(m, out_h, out_w) -> np.ndarray:
    """Bilinear upsampling of a 2-D map with half-pixel centres and edge clamping."""
    m = np.asarray(m, dtype=np.float64)

    def weights(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        R = np.zeros((n_out, n_in))
        R[np.arange(n_out), lo] += 1 - frac
        R[np.arange(n_out), hi] += frac
        return R

    return weights(m.shape[0], out_h) @ m @ weights(m.shape[1], out_w).T


def grad_cam(model: ModelBundle, patch, target_class, return_raw=False):
    """Gradient-weighted class activation map of ``target_class`` for one patch.

    The target-class logit is differentiated with respect to the last feature
    map.  Each channel's gradient is averaged into a weight, and the weighted
    channel sum is passed through ReLU.  The result is upsampled bilinearly to
    the input size and divided by its maximum.  Returns ``(H, W, 1)`` in
    [0, 1].  A map that is zero everywhere produces a warning and comes back
    as zeros.
    """
    if not 0 <= target_class < model.n_classes:
        raise ArgumentError(f"target class {target_class} out of range for {model.n_classes} classes")
    x = _check_batch(model, patch)[:1].astype(np.float64)
    params = {k: v.astype(np.float64) for k, v in model.weights.items()}
    k = feature_layer_index(model)
    logits, caches = nn.forward(model.layers, params, x)
    g_out = np.zeros_like(logits)
    g_out[0, target_class] = 1.0
    _, g = nn.backward(model.layers, params, caches, g_out, stop_at=k)
    acts = caches[k + 1]["x"] if k + 1 < len(caches) else logits
    w = g[0].mean(axis=(0, 1))
    cam = np.maximum((acts[0] * w).sum(axis=2), 0.0)
    h, wd = model.input_shape[:2]
    up = np.maximum(bilinear_resize(cam, h, wd), 0.0)
    peak = up.max()
    if peak <= 0:
        warnings.warn(f"degenerate Grad-CAM for class {target_class}: map is zero everywhere")
        heat = np.zeros((h, wd, 1))
    else:
        heat = (up / peak)[..., None]
    return (heat, cam) if return_raw else heat
