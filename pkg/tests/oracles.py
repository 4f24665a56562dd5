"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np

from magrep import autoencoder as ae


def conv_nested_loop(x, weights, bias):
    """Same-padded 3x3 cross-correlation of a (C_in, H, W) tensor, pixel by pixel."""
    c_in, h, w = x.shape
    out = np.zeros((weights.shape[0], h, w))
    for o in range(weights.shape[0]):
        for r in range(h):
            for c in range(w):
                s = bias[o]
                for i in range(c_in):
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            rr, cc = r + dr, c + dc
                            if 0 <= rr < h and 0 <= cc < w:
                                s += weights[o, i, dr + 1, dc + 1] * x[i, rr, cc]
                out[o, r, c] = s
    return out


def finite_difference_grads(model, batch, h=1e-5):
    """Central differences of the mean batch MSE w.r.t. every conv weight and bias."""
    out = {}
    for i in model.conv_layers:
        layer = model.layers[i]
        pair = []
        for arr in (layer.weights, layer.bias):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                keep = flat[k]
                flat[k] = keep + h
                up = ae._batch_loss(model, batch)
                flat[k] = keep - h
                down = ae._batch_loss(model, batch)
                flat[k] = keep
                gflat[k] = (up - down) / (2 * h)
            pair.append(g)
        out[i] = tuple(pair)
    return out


def relative_errors(analytic, numeric, floor=1e-8):
    errs = []
    for i, (dw, db) in analytic.items():
        for a, n in ((dw, numeric[i][0]), (db, numeric[i][1])):
            errs.append(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))
    return np.concatenate([e.ravel() for e in errs])


def random_small_model(seed, p=8):
    """2-filter model with random weights and biases plus a random batch."""
    rng = np.random.default_rng(seed)
    model = ae.build_model((2, 2, 2, 2), seed=seed)
    for i in model.conv_layers:
        model.layers[i].bias = rng.normal(scale=0.1, size=model.layers[i].out_filters)
    batch = rng.random((3, p, p))
    return model, batch


def project_box_hyperplane(v, y, C):
    """Euclidean projection of v onto {0 <= a <= C, y'a = 0} for labels y in {-1, +1}.

    a(mu) = clip(v - mu*y, 0, C) and s(mu) = y'a(mu) is piecewise linear and
    non-increasing in mu, so the root is found exactly between breakpoints.
    """
    def s(mu):
        return np.clip(v - mu * y, 0, C) @ y

    knots = np.unique(np.concatenate([y * v, y * (v - C)]))
    vals = np.array([s(k) for k in knots])
    if vals[0] <= 0:
        mu = knots[0]
    elif vals[-1] >= 0:
        mu = knots[-1]
    else:
        j = int(np.flatnonzero(vals <= 0)[0])
        k0, k1, s0, s1 = knots[j - 1], knots[j], vals[j - 1], vals[j]
        mu = k0 + (k1 - k0) * s0 / (s0 - s1)
    return np.clip(v - mu * y, 0, C)


def projected_gradient_dual(K, y, C, iters=200000, tol=1e-12):
    """Minimise 0.5 a'Qa - 1'a over {0<=a<=C, y'a=0} with accelerated projected gradient.

    Returns (alpha, objective).
    """
    y = np.asarray(y, dtype=float)
    Q = (y[:, None] * y[None, :]) * K
    step = 1.0 / max(np.linalg.eigvalsh(Q).max(), 1e-12)
    a = np.zeros(len(y))
    z, t = a.copy(), 1.0
    for _ in range(iters):
        a_new = project_box_hyperplane(z - step * (Q @ z - 1.0), y, C)
        if np.max(np.abs(a_new - a)) < tol:
            a = a_new
            break
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = a_new + (t - 1) / t_new * (a_new - a)
        if (a_new - a) @ (Q @ a_new - 1.0) > 0:  # restart when the objective would rise
            z, t_new = a_new.copy(), 1.0
        a, t = a_new, t_new
    return a, 0.5 * a @ Q @ a - a.sum()


def oracle_bias(alpha, y, K, C, eps=1e-8):
    """Bias from free support vectors, else the midpoint of the feasible interval."""
    y = np.asarray(y, dtype=float)
    f0 = K @ (alpha * y)
    free = (alpha > eps) & (alpha < C - eps)
    if free.any():
        return float(np.mean(y[free] - f0[free]))
    lo, hi = -np.inf, np.inf
    for i in range(len(y)):
        r = y[i] - f0[i]
        at_zero = alpha[i] <= eps
        # alpha=0: y f >= 1 ; alpha=C: y f <= 1
        if (y[i] > 0) == at_zero:
            lo = max(lo, r)
        else:
            hi = min(hi, r)
    if np.isfinite(lo) and np.isfinite(hi):
        return 0.5 * (lo + hi)
    return lo if np.isfinite(lo) else hi
