"""Dataset-level training and evaluation of the hierarchy and the flat baselines.

Everything here works on a manifest (list of PatchRecord) plus the aligned raw
patch array.  Preprocessing is per slide and is recorded in each model's
``train_config["preprocess"]`` so prediction can repeat it.
"""

from __future__ import annotations

import logging

import numpy as np

from . import core, evaluation, stain
from .bundle import ModelBundle, build_architecture
from .errors import ArgumentError, DataError

log = logging.getLogger(__name__)

# CLI level name -> architecture level
ARCHITECTURES = {
    "parent": "parent",
    "child": "child",
    "flat": "flat_baseline",
    "flat-cnn": "flat_cnn",
    "flat-mlp": "flat_mlp",
}


def useful(records, split=None):
    """Indices of records in ``split`` (all splits if None) not marked not_useful."""
    return [i for i, r in enumerate(records)
            if (split is None or r.split == split) and r.cluster != "not_useful"]


def slide_groups(records, split=None):
    """``{slide_id: [record indices]}`` over the useful patches, slide ids sorted."""
    groups = {}
    for i in useful(records, split):
        groups.setdefault(records[i].slide_id, []).append(i)
    return {k: groups[k] for k in sorted(groups)}


def reference_profile(records, patches, split="train", lambda_sparsity=stain.DEFAULT_LAMBDA,
                      seed=0) -> stain.StainProfile:
    """Target stain profile from the first useful Celiac training patch.

    Slides are taken in sorted id order and patches in grid order, so the choice
    is deterministic.
    """
    for sid, ix in slide_groups(records, split).items():
        if records[ix[0]].label_parent == "Celiac":
            first = min(ix, key=lambda i: (records[i].row, records[i].col))
            return stain.estimate_stain_profile(np.asarray(patches[first], np.float32),
                                                lambda_sparsity=lambda_sparsity, seed=seed)
    raise DataError(f"no useful Celiac {split} patch to use as stain reference")


def preprocess_spec(mode, cb_percent=core.DEFAULT_CB_PERCENT, target=None) -> dict:
    if mode == "none":
        return {"mode": "none"}
    if mode == "color_balance":
        return {"mode": "color_balance", "percent": float(cb_percent)}
    if mode == "stain_normalize":
        if target is None:
            raise ArgumentError("stain_normalize needs a target profile")
        return {"mode": "stain_normalize", "target": target.to_dict()}
    raise ArgumentError(f"unknown preprocessing mode {mode!r}")


def train_model(level, records, patches, config: core.TrainConfig, preprocess, input_size,
                pools=None, split="train"):
    """Build, preprocess and train one model.  Returns ``(model, history)``.

    ``level`` is a CLI level name (see ``ARCHITECTURES``).
    """
    if level not in ARCHITECTURES:
        raise ArgumentError(f"unknown level {level!r}; expected one of {sorted(ARCHITECTURES)}")
    model = build_architecture(ARCHITECTURES[level], input_size=input_size, pools=pools,
                               seed=config.seed, pool_dropout=config.pool_dropout,
                               dense_dropout=config.dense_dropout)
    model.train_config["preprocess"] = preprocess
    if level == "child":
        keep = [i for i, r in enumerate(records) if r.label_parent == "Celiac"]
    else:
        keep = list(range(len(records)))
    sub = [records[i] for i in keep]
    x = core.prepare_slides(sub, np.asarray(patches)[keep], preprocess, input_size, config.seed)
    return core.train_level(model, sub, x, config, split)


def _flat_truth(rec):
    return rec.label_parent if rec.label_parent != "Celiac" else f"Celiac/{rec.label_child}"


def evaluate_hierarchy(parent: ModelBundle, child: ModelBundle, records, patches, split="test",
                       seed=0, workers=1, n_bootstrap=evaluation.N_BOOTSTRAP) -> dict:
    """Patch- and slide-level evaluation of the two-level classifier.

    Returns a dict with EvalReports ``parent_patch``, ``child_patch``,
    ``parent_slide``, ``child_slide`` and ``hier_patch`` (six-way, per-patch
    routing), ``hier_slide_accuracy`` (slide correct only if the parent label
    and, for Celiac, the grade are both right) and the per-slide predictions.
    """
    patches = np.asarray(patches)
    groups = slide_groups(records, split)
    if not groups:
        raise DataError(f"no useful {split} patches to evaluate")
    pt, pp, ct, cp, ht, hp = [], [], [], [], [], []
    st, sp, cst, csp, slides = [], [], [], [], []
    hier_correct = 0
    for sid, ix in groups.items():
        x = patches[ix]
        recs = [records[i] for i in ix]
        probs = core.predict_proba(parent, core.prepare_for_model(parent, x, seed), workers=workers)
        pl = np.argmax(probs, axis=1)
        pt += [r.label_parent for r in recs]
        pp += [parent.class_names[i] for i in pl]
        truth_parent = recs[0].label_parent
        if truth_parent == "Celiac":
            cprobs = core.predict_proba(child, core.prepare_for_model(child, x, seed),
                                        workers=workers)
            ct += [r.label_child for r in recs]
            cp += [child.class_names[i] for i in np.argmax(cprobs, axis=1)]
            cslide = core.classify_slide(cprobs, sid, child.class_names)
            cst.append(recs[0].label_child)
            csp.append(cslide.class_name)
        ht += [_flat_truth(r) for r in recs]
        hp += core.hierarchical_patch_labels(parent, child, x, seed, workers)
        pred = core.hierarchical_predict(parent, child, x, sid, seed, workers)
        st.append(truth_parent)
        sp.append(pred.class_name)
        ok = pred.class_name == truth_parent and (
            truth_parent != "Celiac" or pred.child.class_name == recs[0].label_child)
        hier_correct += int(ok)
        slides.append({"slide_id": sid, "truth_parent": truth_parent,
                       "truth_child": recs[0].label_child, "correct": ok, **pred.to_dict()})

    def rep(truth, pred, classes, level):
        cm = evaluation.confusion_matrix(truth, pred, classes)
        return evaluation.metrics(cm, level, n_bootstrap, seed)

    flat_names = core.class_names_for("flat")
    out = {
        "parent_patch": rep(pt, pp, parent.class_names, "parent_patch"),
        "parent_slide": rep(st, sp, parent.class_names, "parent_slide"),
        "hier_patch": rep(ht, hp, flat_names, "hierarchical_patch"),
        "hier_slide_accuracy": hier_correct / len(groups),
        "slides": slides,
    }
    if ct:
        out["child_patch"] = rep(ct, cp, child.class_names, "child_patch")
        out["child_slide"] = rep(cst, csp, child.class_names, "child_slide")
    out["hier_patch_macro_f1"] = evaluation.macro_f1(ht, hp, flat_names)
    return out


def evaluate_flat(model: ModelBundle, records, patches, split="test", seed=0, workers=1,
                  n_bootstrap=evaluation.N_BOOTSTRAP) -> dict:
    """Six-way patch-level evaluation of a flat baseline."""
    patches = np.asarray(patches)
    truth, pred = [], []
    for sid, ix in slide_groups(records, split).items():
        probs = core.predict_proba(model, core.prepare_for_model(model, patches[ix], seed),
                                   workers=workers)
        truth += [_flat_truth(records[i]) for i in ix]
        pred += [model.class_names[i] for i in np.argmax(probs, axis=1)]
    if not truth:
        raise DataError(f"no useful {split} patches to evaluate")
    cm = evaluation.confusion_matrix(truth, pred, model.class_names)
    return {"flat_patch": evaluation.metrics(cm, "flat_patch", n_bootstrap, seed),
            "flat_patch_macro_f1": evaluation.macro_f1(truth, pred, model.class_names)}
