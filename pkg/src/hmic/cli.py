"""``hmic`` command-line interface.

Every subcommand reads the TOML pipeline config (``--config``), applies flag
overrides, runs one stage and writes ``runs/<timestamp>.json`` with the
effective config, its sha256 and the seed.

Exit codes: 0 success, 1 stage failure (module error printed verbatim),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import core, evaluation, patch_filter, patching, pipeline, stain, synthetic
from .bundle import load_model, model_hash, save_model
from .config import load_config, train_settings, write_run_record
from .errors import ConfigurationError, DataError, HMICError, ValidationError

log = logging.getLogger("hmic")

MANIFEST = "manifest.jsonl"
FILTER_MODEL = "filter.hmic"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _require(path, what):
    if not Path(path).exists():
        raise ConfigurationError(f"{what} {path} does not exist")
    return Path(path)


def _workers(cfg):
    if cfg.get("workers"):
        return int(cfg["workers"])
    return core.default_workers()


def _manifest(cfg):
    return _require(Path(cfg["paths"]["patches"]) / MANIFEST, "manifest")


def _load_corpus(cfg):
    path = _manifest(cfg)
    records = patching.read_manifest(path)
    if not records:
        raise DataError(f"manifest {path} lists no patches")
    return records, patching.load_patches(records, path.parent)


def _model_path(cfg, level):
    return Path(cfg["paths"]["models"]) / f"{level}.hmic"


def _train_config(cfg, level):
    s = train_settings(cfg, level)
    names = {f.name for f in fields(core.TrainConfig)}
    kw = {k: v for k, v in s.items() if k in names}
    return core.TrainConfig(seed=int(cfg["seed"]), level=level, **kw), s


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, args):
    seed = int(cfg["seed"])
    spec = synthetic.filter_spec(seed) if args.preset == "filter" else synthetic.SyntheticSpec(seed=seed)
    if args.slides_per_class is not None:
        n = int(args.slides_per_class)
        spec.n_slides = {k: n for k in spec.n_slides}
        spec.n_celiac = {k: n for k in spec.n_celiac}
    if args.slide_size is not None:
        spec.slide_size = int(args.slide_size)
    if args.blank_fraction is not None:
        spec.blank_fraction = float(args.blank_fraction)
    spec.validate()
    out = Path(args.out)
    records, _, blanks, slides = synthetic.generate_synthetic_dataset(
        spec, out, write_patches=args.write_patches)
    return {"out": str(out), "slides": len(slides), "tiles": len(records),
            "blank_tiles": int(np.sum(blanks))}


def cmd_patch(cfg, args):
    p = cfg["paths"]
    slides = _require(p["slides"], "slides directory")
    labels = _require(p["labels"], "labels file")
    records = patching.patch_directory(slides, labels, p["patches"],
                                       int(cfg["patching"]["patch_size"]),
                                       cfg["patching"]["stride"],
                                       float(cfg["patching"]["test_fraction"]), int(cfg["seed"]))
    return {"patches": len(records), "manifest": str(Path(p["patches"]) / MANIFEST)}


def cmd_filter_train(cfg, args):
    records, patches = _load_corpus(cfg)
    train = [i for i, r in enumerate(records) if r.split == "train"] or list(range(len(records)))
    f = cfg["filter"]
    model, hist = patch_filter.train_autoencoder(
        patches[train], epochs=int(f["epochs"]), seed=int(cfg["seed"]),
        batch_size=int(f["batch_size"]), alpha=float(f["alpha"]))
    out = Path(args.out or Path(cfg["paths"]["models"]) / FILTER_MODEL)
    save_model(model.bundle, out)
    return {"model": str(out), "initial_loss": hist["initial_loss"], "loss": hist["loss"]}


def cmd_filter_apply(cfg, args):
    path = _manifest(cfg)
    records, patches = _load_corpus(cfg)
    mpath = _require(args.model or Path(cfg["paths"]["models"]) / FILTER_MODEL, "filter model")
    model = patch_filter.AutoencoderModel(load_model(mpath))
    mask, state, decision = patch_filter.filter_patches(model, patches, int(cfg["seed"]),
                                                        cfg["filter"]["override"])
    patch_filter.apply_to_records(records, mask)
    patching.write_manifest(records, path)
    result = {"useful": int(mask.sum()), "not_useful": int((~mask).sum()),
              "decision": asdict(decision), "xi": float(state.xi),
              "iterations": int(state.iterations)}
    reports = Path(cfg["paths"]["reports"])
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "filter_decision.json").write_text(json.dumps(result, indent=2, sort_keys=True)
                                                  + "\n", encoding="utf-8")
    return result


def _load_image(path):
    return patching.load_png_rgb(_require(path, "image"))


def cmd_stain_balance(cfg, args):
    img = _load_image(args.input)
    params = stain.cb_percent_to_params(float(cfg["stain"]["cb_percent"]), img)
    patching.save_png(stain.color_balance(img, params), args.output)
    return {"output": str(args.output), "gains": [float(g) for g in params.gains]}


def cmd_stain_profile(cfg, args):
    img = _load_image(args.input)
    prof = stain.estimate_stain_profile(img, lambda_sparsity=float(cfg["stain"]["lambda"]),
                                        seed=int(cfg["seed"]))
    stain.save_profile(prof, args.output)
    return {"output": str(args.output), **prof.to_dict()}


def cmd_stain_normalize(cfg, args):
    img = _load_image(args.input)
    target = stain.load_profile(_require(args.target, "target profile"))
    if args.source_profile:
        source = stain.load_profile(_require(args.source_profile, "source profile"))
    else:
        source = stain.estimate_stain_profile(img, float(cfg["stain"]["lambda"]),
                                              seed=int(cfg["seed"]))
    patching.save_png(stain.normalize_stain(img, source, target), args.output)
    return {"output": str(args.output)}


def _preprocess_for(cfg, level, records, patches):
    key = "flat" if level.startswith("flat") else level
    mode = cfg["stain"][key]
    target = None
    if mode == "stain_normalize":
        ref = cfg["stain"]["reference"]
        if ref:
            target = stain.load_profile(_require(ref, "stain reference profile"))
        else:
            target = pipeline.reference_profile(records, patches,
                                                lambda_sparsity=float(cfg["stain"]["lambda"]),
                                                seed=int(cfg["seed"]))
    return pipeline.preprocess_spec(mode, cfg["stain"]["cb_percent"], target)


def cmd_train(cfg, args):
    level = args.level
    records, patches = _load_corpus(cfg)
    tcfg, settings = _train_config(cfg, level)
    if level == "child":
        # fail early, naming the class, before any preprocessing
        core.select_records(records, "child", "train")
    pre = _preprocess_for(cfg, level, records, patches)
    pools = settings["pools"]
    model, hist = pipeline.train_model(level, records, patches, tcfg, pre,
                                       int(settings["input_size"]), pools)
    out = Path(args.out or _model_path(cfg, level))
    save_model(model, out)
    return {"model": str(out), "model_hash": model_hash(model), "loss": hist["loss"],
            "accuracy": hist["accuracy"]}


def _hier_models(cfg):
    parent = load_model(_require(_model_path(cfg, "parent"), "parent model"))
    cpath = _model_path(cfg, "child")
    child = load_model(cpath) if cpath.exists() else None
    return parent, child


def _slide_prediction(cfg, parent, child, records, patches, sid, ix):
    x = patches[ix]
    pred = core.hierarchical_predict(parent, child, x, sid, int(cfg["seed"]), _workers(cfg))
    d = pred.to_dict()
    if cfg["predict"]["gating"] == "patch":
        d["patch_labels"] = core.hierarchical_patch_labels(parent, child, x, int(cfg["seed"]),
                                                           _workers(cfg))
    return d


def cmd_predict(cfg, args):
    if args.dir:
        cfg["paths"]["patches"] = str(Path(args.dir).resolve())
    records, patches = _load_corpus(cfg)
    parent, child = _hier_models(cfg)
    groups = pipeline.slide_groups(records)
    if args.slide:
        if args.slide not in groups:
            raise DataError(f"slide {args.slide!r} has no useful patches in the manifest")
        out = _slide_prediction(cfg, parent, child, records, patches, args.slide,
                                groups[args.slide])
        _emit(out)
        return out
    preds = [_slide_prediction(cfg, parent, child, records, patches, sid, ix)
             for sid, ix in groups.items()]
    reports = Path(cfg["paths"]["reports"])
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / "predictions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True) + "\n")
    _emit(preds)
    return {"slides": len(preds), "output": str(reports / "predictions.jsonl")}


def cmd_evaluate(cfg, args):
    records, patches = _load_corpus(cfg)
    parent, child = _hier_models(cfg)
    if child is None:
        raise ConfigurationError(f"child model {_model_path(cfg, 'child')} does not exist")
    seed, workers = int(cfg["seed"]), _workers(cfg)
    res = pipeline.evaluate_hierarchy(parent, child, records, patches, args.split, seed, workers,
                                      args.bootstrap)
    reports = [res[k] for k in ("parent_patch", "child_patch", "parent_slide", "child_slide",
                                "hier_patch") if k in res]
    summary = {"hier_slide_accuracy": res["hier_slide_accuracy"],
               "hier_patch_macro_f1": res["hier_patch_macro_f1"]}
    for level in ("flat-cnn", "flat-mlp"):
        path = _model_path(cfg, level)
        if path.exists():
            flat = pipeline.evaluate_flat(load_model(path), records, patches, args.split, seed,
                                          workers, args.bootstrap)
            flat["flat_patch"].level = f"{level}_patch"
            reports.append(flat["flat_patch"])
            summary[f"{level}_patch_macro_f1"] = flat["flat_patch_macro_f1"]
    out = Path(cfg["paths"]["reports"])
    csv_path, txt_path = evaluation.report_tables(reports, out, "evaluation")
    for rep in reports:
        summary[f"{rep.level}_accuracy"] = rep.accuracy
    (out / "slides.jsonl").write_text(
        "".join(json.dumps(s, sort_keys=True) + "\n" for s in res["slides"]), encoding="utf-8")
    summary["tables"] = [str(csv_path), str(txt_path)]
    undefined = [f"{rep.level}:{u}" for rep in reports for u in rep.undefined]
    summary["undefined"] = undefined
    _emit(summary)
    if undefined:
        raise ValidationError("undefined metrics: " + ", ".join(undefined))
    return summary


def cmd_gradcam(cfg, args):
    mpath = _require(args.model or _model_path(cfg, "parent"), "model")
    model = load_model(mpath)
    patch = _load_image(args.patch)
    target = args.target_class
    if target in model.class_names:
        idx = model.class_names.index(target)
    else:
        try:
            idx = int(target)
        except ValueError:
            raise ConfigurationError(
                f"target class {target!r} is not one of {model.class_names}") from None
    x = core.prepare_for_model(model, patch[None], int(cfg["seed"]))
    heat = core.grad_cam(model, x[0], idx)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(patching.to_uint8(heat[..., 0]), mode="L").save(out)
    side = {"target_class": model.class_names[idx], "target_index": idx,
            "model_hash": model_hash(model), "model": str(mpath), "patch": str(args.patch),
            "heatmap": str(out)}
    out.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return side


COMMANDS = {
    "synth": cmd_synth,
    "patch": cmd_patch,
    "filter-train": cmd_filter_train,
    "filter-apply": cmd_filter_apply,
    "stain-balance": cmd_stain_balance,
    "stain-profile": cmd_stain_profile,
    "stain-normalize": cmd_stain_normalize,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcam": cmd_gradcam,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML pipeline config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="worker threads (default: HMIC_WORKERS or cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hmic", description="Hierarchical slide classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic slide corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["default", "filter"], default="default")
    p.add_argument("--slides-per-class", type=int)
    p.add_argument("--slide-size", type=int)
    p.add_argument("--blank-fraction", type=float)
    p.add_argument("--write-patches", action="store_true")

    p = sub.add_parser("patch", parents=[common], help="tile slides into patches + manifest")
    p.add_argument("--slides")
    p.add_argument("--labels")
    p.add_argument("--out", dest="patches")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("filter-train", parents=[common], help="train the patch autoencoder")
    p.add_argument("--patches")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")

    p = sub.add_parser("filter-apply", parents=[common],
                       help="cluster patch codes and mark the manifest useful/not_useful")
    p.add_argument("--patches")
    p.add_argument("--model")
    p.add_argument("--override", type=int, choices=[0, 1])

    p = sub.add_parser("stain-balance", parents=[common], help="color balance one image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--percent", type=float)

    p = sub.add_parser("stain-profile", parents=[common], help="estimate a stain profile")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lambda", dest="lambda_", type=float)

    p = sub.add_parser("stain-normalize", parents=[common], help="normalize to a target profile")
    p.add_argument("--input", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--source-profile")

    p = sub.add_parser("train", parents=[common], help="train one classifier level")
    p.add_argument("--level", required=True, choices=["parent", "child", "flat-cnn", "flat-mlp"])
    p.add_argument("--patches")
    p.add_argument("--epochs", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--out")

    p = sub.add_parser("predict", parents=[common], help="classify slides")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--slide", help="slide id in the configured manifest")
    g.add_argument("--dir", help="patch directory with a manifest; predicts every slide")
    p.add_argument("--gating", choices=["slide", "patch"])

    p = sub.add_parser("evaluate", parents=[common], help="metrics and report tables")
    p.add_argument("--split", default="test")
    p.add_argument("--bootstrap", type=int, default=evaluation.N_BOOTSTRAP)

    p = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmap for one patch")
    p.add_argument("--patch", required=True)
    p.add_argument("--model")
    p.add_argument("--target-class", required=True, help="class name or index")
    p.add_argument("--output", required=True)
    return parser


def _overrides(args) -> dict:
    """Flag values mapped onto dotted config keys (None means not given)."""
    a = vars(args)
    ov = {"seed": a.get("seed"), "workers": a.get("workers")}
    mapping = {
        "slides": "paths.slides", "labels": "paths.labels", "patches": "paths.patches",
        "patch_size": "patching.patch_size", "stride": "patching.stride",
        "test_fraction": "patching.test_fraction", "override": "filter.override",
        "percent": "stain.cb_percent", "lambda_": "stain.lambda", "gating": "predict.gating",
        "input_size": "train.input_size",
    }
    for flag, key in mapping.items():
        if a.get(flag) is not None:
            ov[key] = a[flag]
    if a.get("epochs") is not None:
        ov["filter.epochs" if args.command == "filter-train" else "train.epochs"] = a["epochs"]
    return ov


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "train" and args.epochs is not None:
            # a flag beats per-level tables too
            cfg["train"].get(args.level, {}).pop("epochs", None)
        result = COMMANDS[args.command](cfg, args)
    except (HMICError, OSError, ValueError) as exc:
        sys.stderr.write(f"hmic {args.command}: {exc}\n")
        if cfg is not None:
            write_run_record(cfg, args.command, {"status": "failed", "error": str(exc)})
        return 1
    write_run_record(cfg, args.command, result)
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
