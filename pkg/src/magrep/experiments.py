"""The four pixel/patch x samples/features classification set-ups on an activation stack."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import svm
from .formats import write_json
from .evaluation import Metrics, accuracy, confusion_matrix, f1_binary, kfold_split
from .grid import LABEL_DEPOSIT, LABEL_NONDEPOSIT, LabelMap, PatchSpec, nearest_source_index, reflect_index
from .stitching import ActivationStack, build_activation_stack

MODES = ("pixel", "patch")
REPRESENTATIONS = ("samples", "features")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "pixel"
    representation: str = "features"
    positions_per_class: int = 12
    eval_patch_size: int = 10
    window_size: int = 16  # patch extracted around each position before resizing
    kernel: svm.KernelSpec = svm.KernelSpec()
    C: float = 1.0
    tol: float = 1e-3
    k: int = 5
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        if self.eval_patch_size < 1 or self.window_size < 1:
            raise ValueError("patch sizes must be >= 1")
        if self.stratified and 2 * self.positions_per_class < self.k:
            raise ValueError("too few positions for the requested number of folds")

    def context(self) -> dict:
        return {
            "mode": self.mode,
            "representation": self.representation,
            "kernel": self.kernel.to_dict(),
            "C": self.C,
            "seed": self.seed,
        }


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray  # +1 deposit, -1 non-deposit
    groups: np.ndarray  # position index of every row
    positions: list

    def __post_init__(self):
        if not np.all(np.isfinite(self.X)):
            raise ValueError("dataset contains non-finite values")


def sample_positions(labels: LabelMap, per_class: int, seed: int) -> list[tuple[int, int, int]]:
    """``per_class`` deposit then ``per_class`` non-deposit pixels, drawn without replacement."""
    rng = np.random.default_rng(seed)
    flat = labels.labels.ravel()
    out = []
    for cls in (LABEL_DEPOSIT, LABEL_NONDEPOSIT):
        pool = np.flatnonzero(flat == cls)
        if len(pool) < per_class:
            name = "deposit" if cls == LABEL_DEPOSIT else "non-deposit"
            raise ValueError(
                f"insufficient labeled pixels for class {cls} ({name}): need {per_class}, have {len(pool)}")
        for idx in rng.choice(pool, size=per_class, replace=False):
            r, c = divmod(int(idx), labels.width)
            out.append((r, c, cls))
    return out


def _window_indices(center: int, n: int, window: int, size: int) -> np.ndarray:
    """Reflect-padded source indices of a ``window``-wide span resized to ``size`` samples."""
    offs = PatchSpec(window).offsets[nearest_source_index(window, size)]
    return reflect_index(center + offs, n)


def position_features(arr: np.ndarray, r: int, c: int, config: ExperimentConfig) -> np.ndarray:
    """(N,) pixel values or (N, s*s) resized patches for one position."""
    if config.mode == "pixel":
        return arr[:, r, c]
    _, h, w = arr.shape
    s = config.eval_patch_size
    ri = _window_indices(r, h, config.window_size, s)
    ci = _window_indices(c, w, config.window_size, s)
    return arr[:, ri[:, None], ci[None, :]].reshape(arr.shape[0], s * s)


def build_dataset(stack: ActivationStack, positions, config: ExperimentConfig) -> Dataset:
    arr = stack.array()
    n_maps, h, w = arr.shape
    rows, groups, ys = [], [], []
    for j, (r, c, cls) in enumerate(positions):
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"position {(r, c)} outside stack of shape {(h, w)}")
        feats = position_features(arr, r, c, config)
        label = 1 if cls == LABEL_DEPOSIT else -1
        if config.representation == "features":
            rows.append(feats.reshape(1, -1))
            groups.append(j)
            ys.append(label)
        else:
            rows.append(feats.reshape(n_maps, -1))
            groups.extend([j] * n_maps)
            ys.extend([label] * n_maps)
    return Dataset(np.concatenate(rows, axis=0), np.array(ys), np.array(groups), list(positions))


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    fitted_rows: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def fit(cls, X: np.ndarray, rows: Optional[np.ndarray] = None) -> "Standardizer":
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0), rows)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class FittedClassifier:
    scaler: Standardizer
    model: svm.SvmModel
    config: ExperimentConfig

    def predict(self, X: np.ndarray) -> np.ndarray:
        return svm.predict(self.model, self.scaler.transform(X))


@dataclass
class ExperimentResult:
    metrics: Metrics
    classifier: FittedClassifier
    dataset: Dataset
    fold_audit: list  # per fold: {"train_rows", "test_rows", "scaler"}


def _fit(X, y, rows, config: ExperimentConfig) -> FittedClassifier:
    scaler = Standardizer.fit(X[rows], rows)
    model = svm.train_smo(scaler.transform(X[rows]), y[rows], C=config.C, kernel=config.kernel,
                          tol=config.tol, seed=config.seed)
    return FittedClassifier(scaler, model, config)


def evaluate_dataset(data: Dataset, config: ExperimentConfig) -> ExperimentResult:
    """k-fold CV over positions (rows of one position stay together), then refit on everything."""
    n_pos = len(data.positions)
    pos_labels = np.array([1 if cls == LABEL_DEPOSIT else -1 for _, _, cls in data.positions])
    folds = kfold_split(n_pos, config.k, pos_labels, config.stratified, config.seed)
    fold_acc, audit = [], []
    for fold in folds:
        test_rows = np.flatnonzero(np.isin(data.groups, fold))
        train_rows = np.flatnonzero(~np.isin(data.groups, fold))
        clf = _fit(data.X, data.y, train_rows, config)
        fold_acc.append(accuracy(data.y[test_rows], clf.predict(data.X[test_rows])))
        audit.append({"train_rows": train_rows, "test_rows": test_rows, "scaler": clf.scaler})

    all_rows = np.arange(len(data.y))
    final = _fit(data.X, data.y, all_rows, config)
    pred = final.predict(data.X)
    ctx = config.context()
    ctx["kernel"] = dict(ctx["kernel"], resolved_gamma=final.model.kernel.gamma
                         if final.model.kernel.kind == "rbf" else None)
    metrics = Metrics(
        fold_accuracies=fold_acc,
        overall_accuracy=accuracy(data.y, pred),
        f1=f1_binary(data.y, pred, positive_label=1),
        confusion=confusion_matrix(data.y, pred, positive_label=1),
        context=ctx,
    )
    return ExperimentResult(metrics, final, data, audit)


def run_experiment(image, labels: LabelMap, model, config: ExperimentConfig,
                   stack: Optional[ActivationStack] = None, patch_spec: Optional[PatchSpec] = None
                   ) -> ExperimentResult:
    """Stack (built unless supplied) -> positions -> dataset -> CV + refit."""
    labels.check_matches(image)
    if stack is None:
        stack = build_activation_stack(image, model, patch_spec or PatchSpec(config.window_size))
    if stack.shape != labels.shape:
        raise ValueError(f"stack {stack.shape} does not match labels {labels.shape}")
    positions = sample_positions(labels, config.positions_per_class, config.seed)
    return evaluate_dataset(build_dataset(stack, positions, config), config)


def classify_full_image(stack: ActivationStack, classifier: FittedClassifier,
                        block_rows: int = 8) -> LabelMap:
    """Per-pixel 0/1 map from a features-representation classifier."""
    config = classifier.config
    if config.representation != "features":
        raise ValueError("full-image classification needs a features-representation classifier")
    arr = stack.array()
    n_maps, h, w = arr.shape
    dim = n_maps if config.mode == "pixel" else n_maps * config.eval_patch_size ** 2
    if dim != classifier.model.n_features:
        raise ValueError(f"stack yields {dim} features but the classifier expects "
                         f"{classifier.model.n_features}")
    out = np.zeros((h, w), dtype=np.uint8)
    s = config.eval_patch_size
    cols = np.arange(w)
    for start in range(0, h, block_rows):
        rows = np.arange(start, min(start + block_rows, h))
        if config.mode == "pixel":
            X = arr[:, rows, :].transpose(1, 2, 0).reshape(-1, n_maps)
        else:
            ri = np.stack([_window_indices(r, h, config.window_size, s) for r in rows])
            ci = np.stack([_window_indices(c, w, config.window_size, s) for c in cols])
            # (N, rows, cols, s, s) -> (rows*cols, N*s*s)
            block = arr[:, ri[:, None, :, None], ci[None, :, None, :]]
            X = block.transpose(1, 2, 0, 3, 4).reshape(len(rows) * w, -1)
        pred = classifier.predict(X)
        out[rows] = (pred > 0).reshape(len(rows), w).astype(np.uint8)
    return LabelMap(out)


def config_to_dict(config: ExperimentConfig) -> dict:
    d = {f: getattr(config, f) for f in config.__dataclass_fields__}
    d["kernel"] = config.kernel.to_dict()
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    k = d.pop("kernel", None)
    if isinstance(k, dict):
        d["kernel"] = svm.KernelSpec(k.get("kind", "rbf"), k.get("gamma") or "scale")
    unknown = set(d) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown experiment settings: {sorted(unknown)}")
    return ExperimentConfig(**d)


def save_classifier(clf: FittedClassifier, directory) -> None:
    directory = Path(directory)
    svm.save_svm(clf.model, directory)
    write_json(directory / "classifier.json", {
        "config": config_to_dict(clf.config),
        "scaler": {"mean": clf.scaler.mean.tolist(), "scale": clf.scaler.scale.tolist()},
        "svm": "svm.json",
    })


def load_classifier(directory) -> FittedClassifier:
    directory = Path(directory)
    meta = json.loads((directory / "classifier.json").read_text())
    scaler = Standardizer(np.asarray(meta["scaler"]["mean"]), np.asarray(meta["scaler"]["scale"]))
    return FittedClassifier(scaler, svm.load_svm(directory / meta["svm"]),
                            config_from_dict(meta["config"]))
