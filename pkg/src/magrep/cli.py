"""Command-line pipeline: synth -> train-ae -> stitch -> experiment -> classify / evaluate.

Every stage reads and writes fixed names under ``--workdir`` unless a path is
given explicitly, and drops a ``provenance.json`` next to its outputs with the
effective config, its hash, the seed, and hashes of all inputs and outputs.
Failures exit non-zero with a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path


from . import autoencoder as ae
from .evaluation import Metrics, accuracy, confusion_matrix, f1_binary
from .experiments import (MODES, REPRESENTATIONS, classify_full_image, config_from_dict, load_classifier,
                          run_experiment, save_classifier)
from .formats import (load_labels, load_raster, save_classified, save_labels, save_raster_f32,
                      save_raster_pgm, write_json)
from .grid import PatchSpec
from .pipeline import train_on_image
from .stitching import build_activation_stack, load_stack, reconstructed_image, save_stack
from .synth import TerrainConfig, generate_terrain

SECTIONS = ("terrain", "train", "patch", "experiment", "paths")
# desk-scale default; pass --patch-size 50 for full-size imagery
DESK_PATCH_SIZE = 16


class CliError(Exception):
    def __init__(self, message, kind="error", **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


class MissingArtifact(CliError):
    def __init__(self, artifact: str, path):
        super().__init__(f"missing artifact: {artifact} ({path})", kind="missing_artifact",
                         artifact=artifact, path=str(path))


# ---------------------------------------------------------------- config

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingArtifact("config", path)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", kind="invalid_config")
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object", kind="invalid_config")
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}", kind="invalid_config")
    return cfg


def _section(cfg: dict, name: str, cls, overrides: dict, seed):
    """Dataclass from defaults <- config section <- flag overrides; seed flows in unless set."""
    values = dict(cfg.get(name, {}))
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise CliError(f"unknown keys in [{name}]: {sorted(unknown)}", kind="invalid_config")
    if "seed" in allowed and "seed" not in values and seed is not None:
        values["seed"] = seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid [{name}] settings: {exc}", kind="invalid_config")


def _global_seed(args, cfg):
    return args.seed if args.seed is not None else cfg.get("seed", 0)


def _path(args, cfg, key, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return Path(flag)
    configured = cfg.get("paths", {}).get(key)
    return Path(configured) if configured is not None else default


# ---------------------------------------------------------------- provenance

def file_hash(path: Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file() and p.name != "provenance.json"):
            h.update(str(child.relative_to(path)).encode())
            h.update(file_hash(child).encode())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_provenance(directory: Path, stage: str, config: dict, seed, inputs: dict, outputs: list):
    write_json(directory / "provenance.json", {
        "stage": stage,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": file_hash(v)} for k, v in sorted(inputs.items())},
        "outputs": {str(Path(p).relative_to(directory)): file_hash(p) for p in sorted(outputs)},
    })


def _require(path: Path, artifact: str) -> Path:
    if not path.exists():
        raise MissingArtifact(artifact, path)
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    seed = _global_seed(args, cfg)
    tcfg = _section(cfg, "terrain", TerrainConfig, {"height": args.height, "width": args.width,
                                                    "n_anomalies": args.n_anomalies}, seed)
    out = Path(args.workdir) / "terrain"
    out.mkdir(parents=True, exist_ok=True)
    terrain = generate_terrain(tcfg)
    files = [out / "image.f32", out / "image.meta.json", out / "image.pgm", out / "labels.pgm",
             out / "ground_truth.pgm"]
    save_raster_f32(files[0], terrain.raster)
    save_raster_pgm(files[2], terrain.raster, bits=16)
    save_labels(files[3], terrain.labels)
    save_labels(files[4], terrain.ground_truth)
    write_provenance(out, "synth", dataclasses.asdict(tcfg), tcfg.seed, {}, files)
    return {"terrain": str(out)}


def _patch_spec(args, cfg):
    cfg = dict(cfg, patch=dict({"patch_size": DESK_PATCH_SIZE}, **cfg.get("patch", {})))
    return _section(cfg, "patch", PatchSpec, {"patch_size": getattr(args, "patch_size", None),
                                              "stride": getattr(args, "stride", None)}, None)


def cmd_train_ae(args, cfg):
    seed = _global_seed(args, cfg)
    wd = Path(args.workdir)
    image_path = _require(_path(args, cfg, "image", wd / "terrain" / "image.f32"), "image")
    spec = _patch_spec(args, cfg)
    subsample = args.subsample
    if subsample is not None and subsample != "all":
        subsample = int(subsample)
    tcfg = _section(cfg, "train", ae.TrainConfig, {
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
        "train_subsample": subsample, "optimizer": args.optimizer}, seed)
    image = load_raster(image_path)
    model, history = train_on_image(image, spec, tcfg)
    out = _path(args, cfg, "model", wd / "model")
    ae.save_model(model, out, tcfg)
    with open(out / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(history, start=1):
            writer.writerow([i, repr(float(loss))])
    config = {"train": dataclasses.asdict(tcfg), "patch": dataclasses.asdict(spec)}
    write_provenance(out, "train-ae", config, tcfg.seed, {"image": image_path},
                     [out / "manifest.json", out / "weights.f32", out / "loss_history.csv"])
    return {"model": str(out), "final_loss": float(history[-1])}


def cmd_stitch(args, cfg):
    wd = Path(args.workdir)
    image_path = _require(_path(args, cfg, "image", wd / "terrain" / "image.f32"), "image")
    model_dir = _path(args, cfg, "model", wd / "model")
    _require(model_dir / "manifest.json", "model")
    spec = _patch_spec(args, cfg)
    image = load_raster(image_path)
    model = ae.load_model(model_dir)
    stack = build_activation_stack(image, model, spec, layers=args.layers, workers=args.threads)
    out = _path(args, cfg, "stack", wd / "stack")
    save_stack(stack, out, {"patch": dataclasses.asdict(spec), "layers": args.layers})
    recon = reconstructed_image(image, model, spec, workers=args.threads)
    save_raster_f32(out / "reconstructed.f32", recon)
    save_raster_pgm(out / "reconstructed.pgm", recon, bits=16)
    # intermediate-layer preview next to the reconstruction
    save_raster_pgm(out / "intermediate.pgm", stack.maps[-1], bits=16)
    config = {"patch": dataclasses.asdict(spec), "layers": args.layers}
    write_provenance(out, "stitch", config, None, {"image": image_path, "model": model_dir},
                     [p for p in out.iterdir() if p.name != "provenance.json"])
    return {"stack": str(out), "maps": len(stack)}


def cmd_experiment(args, cfg):
    seed = _global_seed(args, cfg)
    wd = Path(args.workdir)
    image_path = _require(_path(args, cfg, "image", wd / "terrain" / "image.f32"), "image")
    labels_path = _require(_path(args, cfg, "labels", wd / "terrain" / "labels.pgm"), "labels")
    stack_dir = _path(args, cfg, "stack", wd / "stack")
    _require(stack_dir / "stack.meta.json", "stack")

    if args.all_cells:
        cells = [(m, r) for m in MODES for r in REPRESENTATIONS]
    else:
        cells = [(args.mode or cfg.get("experiment", {}).get("mode", "pixel"),
                  args.representation or cfg.get("experiment", {}).get("representation", "features"))]
    base = dict(cfg.get("experiment", {}))
    base.setdefault("seed", seed)
    for key in ("C", "k"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    if args.positions_per_class is not None:
        base["positions_per_class"] = args.positions_per_class
    if args.kernel is not None:
        base["kernel"] = {"kind": args.kernel, "gamma": args.gamma}
    stack_meta = json.loads((stack_dir / "stack.meta.json").read_text())
    base.setdefault("window_size", stack_meta.get("patch", {}).get("patch_size", 16))

    image = load_raster(image_path)
    labels = load_labels(labels_path)
    stack = load_stack(stack_dir)
    out = Path(wd) / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    written, summary = [], {}
    for mode, rep in cells:
        try:
            config = config_from_dict(dict(base, mode=mode, representation=rep))
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid [experiment] settings: {exc}", kind="invalid_config")
        result = run_experiment(image, labels, None, config, stack=stack)
        path = out / f"{mode}_{rep}.json"
        write_json(path, result.metrics.to_dict())
        written.append(path)
        if rep == "features":
            cdir = wd / "classifiers" / f"{mode}_{rep}"
            save_classifier(result.classifier, cdir)
            written += [cdir / "classifier.json", cdir / "svm.json", cdir / "svm.sv.f32"]
        summary[f"{mode}_{rep}"] = result.metrics.overall_accuracy
    write_provenance(wd, "experiment", {"experiment": base, "cells": cells}, base["seed"],
                     {"image": image_path, "labels": labels_path, "stack": stack_dir}, written)
    return {"metrics": [str(p) for p in written if p.suffix == ".json" and p.parent == out],
            "overall_accuracy": summary}


def cmd_classify(args, cfg):
    wd = Path(args.workdir)
    stack_dir = _path(args, cfg, "stack", wd / "stack")
    _require(stack_dir / "stack.meta.json", "stack")
    cdir = _path(args, cfg, "classifier", wd / "classifiers" / f"{args.mode}_features")
    _require(cdir / "classifier.json", "classifier")
    clf = load_classifier(cdir)
    stack = load_stack(stack_dir)
    classes = classify_full_image(stack, clf).labels
    out = wd / "classified"
    out.mkdir(parents=True, exist_ok=True)
    view, raw = out / f"{args.mode}.pgm", out / f"{args.mode}.raw.pgm"
    save_classified(view, classes, scaled=True)
    save_classified(raw, classes, scaled=False)
    write_provenance(out, "classify", {"mode": args.mode}, clf.config.seed,
                     {"stack": stack_dir, "classifier": cdir}, [view, raw])
    return {"classified": str(view), "deposit_fraction": float(classes.mean())}


def cmd_evaluate(args, cfg):
    """Score a classified map against a reference label map, ignoring unknown (2) pixels."""
    wd = Path(args.workdir)
    pred_path = _require(Path(args.predicted) if args.predicted else wd / "classified" / "pixel.raw.pgm",
                         "classified map")
    ref_path = _require(_path(args, cfg, "ground_truth", wd / "terrain" / "ground_truth.pgm"),
                        "reference labels")
    pred = load_labels(pred_path).labels
    ref = load_labels(ref_path).labels
    if pred.shape != ref.shape:
        raise CliError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    known = ref != 2
    y_true, y_pred = ref[known].astype(int), pred[known].astype(int)
    acc = accuracy(y_true, y_pred)
    metrics = Metrics([acc], acc, f1_binary(y_true, y_pred, 1), confusion_matrix(y_true, y_pred, 1),
                      context={"predicted": str(pred_path), "reference": str(ref_path)})
    out = Path(args.out) if args.out else wd / "classified" / "evaluation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, metrics.to_dict())
    return {"evaluation": str(out), "accuracy": acc}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magrep", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config with terrain/train/patch/experiment/paths sections")
    parser.add_argument("--seed", type=int, help="seed for every stage unless a section sets its own")
    parser.add_argument("--threads", type=int, default=1, help="cap on worker and BLAS threads")
    parser.add_argument("--workdir", default=".", help="directory holding all stage artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic terrain with sparse labels")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--n-anomalies", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", help="train the autoencoder on image patches")
    p.add_argument("--image")
    p.add_argument("--model", help="output model directory")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--subsample", help="training patch count or 'all'")
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("stitch", help="build the stitched activation stack and reconstruction")
    p.add_argument("--image")
    p.add_argument("--model")
    p.add_argument("--stack", help="output stack directory")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--layers", choices=("all", "encoder_only"), default="all")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("experiment", help="cross-validate and fit SVMs on the stack")
    p.add_argument("--image")
    p.add_argument("--labels")
    p.add_argument("--stack")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--representation", choices=REPRESENTATIONS)
    p.add_argument("--all-cells", action="store_true", help="run all four mode/representation cells")
    p.add_argument("--C", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--positions-per-class", type=int)
    p.add_argument("--kernel", choices=("rbf", "linear"))
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("classify", help="classify every pixel with a features-mode SVM")
    p.add_argument("--stack")
    p.add_argument("--classifier")
    p.add_argument("--mode", choices=MODES, default="pixel")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="score a classified map against reference labels")
    p.add_argument("--predicted")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1", kind="invalid_config")
        cfg = load_config(args.config)
        with _thread_limit(args.threads):
            result = args.func(args, cfg)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), "command": args.command}
        err.update(exc.extra)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
