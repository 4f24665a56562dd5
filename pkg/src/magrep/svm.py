"""Binary kernel SVM trained with sequential minimal optimization.

The solver works on the dual

    max_a  sum(a) - 1/2 a^T Q a,   Q_ij = y_i y_j K(x_i, x_j)
    s.t.   0 <= a_i <= C,  sum(y_i a_i) = 0

picking the pair (i, j) by maximal violation for i and second-order gain for j,
and stops once the KKT gap m(a) - M(a) drops below ``tol``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist

TAU = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: Union[float, str] = "scale"

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and self.gamma != "scale" and not float(self.gamma) > 0:
            raise ValueError("rbf gamma must be > 0")

    def resolve(self, X: np.ndarray) -> "KernelSpec":
        """Fix a numeric gamma; "scale" means 1 / (n_features * X.var())."""
        if self.kind != "rbf" or self.gamma != "scale":
            return self
        var = float(np.var(X))
        return KernelSpec("rbf", 1.0 / (X.shape[1] * var) if var > 0 else 1.0)

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return A @ B.T
        if self.gamma == "scale":
            raise ValueError("resolve() the kernel before evaluating it")
        return np.exp(-float(self.gamma) * cdist(A, B, "sqeuclidean"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma if self.kind == "rbf" else None}


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    coeffs: np.ndarray  # alpha_i * y_i
    bias: float
    kernel: KernelSpec
    C: float
    # training diagnostics, not needed for prediction
    alpha: np.ndarray = field(default=None, repr=False)
    support_indices: np.ndarray = field(default=None, repr=False)
    n_iter: int = 0
    converged: bool = True

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]


def _validate(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"X must be (n, d) matching y, got {X.shape} and {y.shape}")
    if len(X) < 2:
        raise ValueError("need at least two training points")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate labels: both classes are required")
    return X, y.astype(np.float64)


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def train_smo(X, y, C: float = 1.0, kernel: KernelSpec = KernelSpec(), tol: float = 1e-3,
              max_passes: int = 10, seed: int = 0) -> SvmModel:
    """Fit the soft-margin dual by SMO.

    The working-set rule is deterministic, so ``seed`` does not influence the
    result; it is accepted for interface symmetry with the rest of the pipeline.
    The iteration budget is ``max_passes * max(n**2, 1000)`` pair updates.
    """
    X, y = _validate(X, y)
    if not C > 0:
        raise ValueError("C must be > 0")
    kernel = kernel.resolve(X)
    n = len(X)
    K = kernel(X, X)
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    max_iter = max_passes * max(n * n, 1000)

    it = 0
    converged = False
    while it < max_iter:
        yG = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(yG[up])])
        gmax = yG[i]
        gmin = yG[low].min()
        if gmax - gmin < tol:
            converged = True
            break
        cand = low & (yG < gmax)
        b = gmax - yG[cand]
        a = diag[i] + diag[cand] - 2.0 * y[i] * y[cand] * Q[i, cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])

        old_ai, old_aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = diag[i] + diag[j] + 2.0 * Q[i, j]
            delta = (-G[i] - G[j]) / max(quad, TAU)
            diff = old_ai - old_aj
            ai, aj = old_ai + delta, old_aj + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = diag[i] + diag[j] - 2.0 * Q[i, j]
            delta = (G[i] - G[j]) / max(quad, TAU)
            total = old_ai + old_aj
            ai, aj = old_ai - delta, old_aj + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        G += Q[:, i] * (ai - old_ai) + Q[:, j] * (aj - old_aj)
        it += 1

    if not converged:
        warnings.warn(f"SMO stopped after {it} iterations without reaching tol={tol}")

    bias = _bias(alpha, y, G, C)
    sv = np.flatnonzero(alpha > 0)
    return SvmModel(
        support_vectors=X[sv].copy(),
        coeffs=(alpha * y)[sv],
        bias=bias,
        kernel=kernel,
        C=float(C),
        alpha=alpha,
        support_indices=sv,
        n_iter=it,
        converged=converged,
    )


def _bias(alpha, y, G, C) -> float:
    """Average y_i G_i over free multipliers, else the midpoint of the feasible interval."""
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        r = float(yG[free].mean())
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
        ub = yG[ub_mask].min() if ub_mask.any() else np.inf
        lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
        r = float((ub + lb) / 2) if np.isfinite(ub) and np.isfinite(lb) else float(
            ub if np.isfinite(ub) else lb)
    return -r


def decision_function(model: SvmModel, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None] if single else X
    if X2.shape[1] != model.n_features:
        raise ValueError(f"feature dimension {X2.shape[1]} != model's {model.n_features}")
    if len(model.coeffs) == 0:
        f = np.full(len(X2), model.bias)
    else:
        f = model.kernel(X2, model.support_vectors) @ model.coeffs + model.bias
    return float(f[0]) if single else f


def predict(model: SvmModel, X) -> np.ndarray:
    """Sign of the decision function; an exact zero maps to +1."""
    f = np.atleast_1d(decision_function(model, np.atleast_2d(X)))
    return np.where(f >= 0, 1, -1)


def kkt_violations(model: SvmModel, X, y, tol: float) -> np.ndarray:
    """Indices of training points whose (alpha, margin) pair breaks the KKT conditions."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    margin = y * decision_function(model, X)
    a, C = model.alpha, model.C
    bad = np.zeros(len(y), dtype=bool)
    at_zero = a <= 0
    at_c = a >= C
    free = ~at_zero & ~at_c
    bad |= at_zero & (margin < 1 - tol)
    bad |= free & (np.abs(margin - 1) > tol)
    bad |= at_c & (margin > 1 + tol)
    return np.flatnonzero(bad)


def save_svm(model: SvmModel, directory, stem: str = "svm") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sv = np.ascontiguousarray(model.support_vectors, dtype="<f4")
    (directory / f"{stem}.sv.f32").write_bytes(sv.tobytes())
    manifest = {
        "kernel": model.kernel.to_dict(),
        "C": model.C,
        "bias": model.bias,
        "coeffs": [float(c) for c in model.coeffs],
        "n_support": int(sv.shape[0]),
        "n_features": int(sv.shape[1]),
        "support_vectors_file": f"{stem}.sv.f32",
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_svm(path) -> SvmModel:
    path = Path(path)
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["support_vectors_file"]).read_bytes()
    sv = np.frombuffer(raw, dtype="<f4").reshape(manifest["n_support"], manifest["n_features"])
    k = manifest["kernel"]
    kernel = KernelSpec(k["kind"], k["gamma"] if k["kind"] == "rbf" else "scale")
    return SvmModel(sv.astype(np.float64), np.asarray(manifest["coeffs"], dtype=np.float64),
                    float(manifest["bias"]), kernel, float(manifest["C"]))
