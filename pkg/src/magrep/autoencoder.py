"""Small convolutional autoencoder trained on raster patches with hand-written backprop.

Public tensors are (batch, channels, height, width); internally the network
runs on (channels, batch, height, width) so each convolution is a single GEMM
over an im2col matrix. All convolutions are 3x3 with zero "same" padding, so
only pooling and upsampling change the spatial size.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import Raster

CONV, MAXPOOL, UPSAMPLE = "conv", "maxpool", "upsample"
RELU, LINEAR = "relu", "linear"


@dataclass
class LayerSpec:
    kind: str
    out_filters: int = 0
    activation: str = LINEAR
    weights: Optional[np.ndarray] = field(default=None, repr=False)  # (out, in, 3, 3)
    bias: Optional[np.ndarray] = field(default=None, repr=False)
    factor: int = 2

    def __post_init__(self):
        if self.kind not in (CONV, MAXPOOL, UPSAMPLE):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV:
            if self.activation not in (RELU, LINEAR):
                raise ValueError(f"unknown activation {self.activation!r}")
            if self.weights is None or self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
                raise ValueError("conv layers need (out, in, 3, 3) weights")
            if not np.all(np.isfinite(self.weights)):
                raise ValueError("conv weights must be finite")
            self.out_filters = self.weights.shape[0]
            if self.bias is None:
                self.bias = np.zeros(self.out_filters)
            if self.bias.shape != (self.out_filters,):
                raise ValueError("bias must have one entry per filter")
        elif self.factor != 2:
            raise ValueError("pool/upsample factor must be 2")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class AutoencoderModel:
    layers: list
    encoder_end: int = 3
    norm_min: float = 0.0
    norm_max: float = 1.0

    def __post_init__(self):
        channels = 1
        for layer in self.layers:
            if layer.kind == CONV:
                if layer.in_channels != channels:
                    raise ValueError(
                        f"channel mismatch: layer expects {layer.in_channels}, gets {channels}")
                channels = layer.out_filters
        if channels != 1:
            raise ValueError("reconstruction must have a single channel")
        if not 1 <= self.encoder_end <= len(self.layers):
            raise ValueError("encoder_end out of range")

    @property
    def conv_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == CONV]

    @property
    def dtype(self):
        convs = self.conv_layers
        return self.layers[convs[0]].weights.dtype if convs else np.dtype(np.float64)

    def astype(self, dtype) -> "AutoencoderModel":
        out = copy.deepcopy(self)
        for i in out.conv_layers:
            out.layers[i].weights = out.layers[i].weights.astype(dtype)
            out.layers[i].bias = out.layers[i].bias.astype(dtype)
        return out

    def normalize(self, x):
        scale = self.norm_max - self.norm_min
        return (np.asarray(x, dtype=np.float64) - self.norm_min) / (scale if scale > 0 else 1.0)

    def denormalize(self, x):
        scale = self.norm_max - self.norm_min
        return np.asarray(x) * (scale if scale > 0 else 1.0) + self.norm_min


def glorot_uniform(rng: np.random.Generator, out_ch: int, in_ch: int) -> np.ndarray:
    fan_in, fan_out = in_ch * 9, out_ch * 9
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(out_ch, in_ch, 3, 3))


def build_model(filters=(16, 8, 8, 16), seed: int = 0, encoder_end: int = 3) -> AutoencoderModel:
    """Conv(f0) -> MaxPool -> Conv(f1) | Conv(f2) -> Upsample -> Conv(f3) -> Conv(1, linear).

    Layers up to ``encoder_end`` (default: the second conv) form the encoder.
    """
    rng = np.random.default_rng(seed)
    f0, f1, f2, f3 = filters

    def conv(out_ch, in_ch, act):
        return LayerSpec(CONV, activation=act, weights=glorot_uniform(rng, out_ch, in_ch),
                         bias=np.zeros(out_ch))

    layers = [
        conv(f0, 1, RELU),
        LayerSpec(MAXPOOL),
        conv(f1, f0, RELU),
        conv(f2, f1, RELU),
        LayerSpec(UPSAMPLE),
        conv(f3, f2, RELU),
        conv(1, f3, LINEAR),
    ]
    return AutoencoderModel(layers, encoder_end=encoder_end)


# ---------------------------------------------------------------- layer kernels

def _batched(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W) tensor, got shape {x.shape}")
    return x, False


def _shift_bounds(d: int, n: int):
    """Destination/source slices for a window tap at offset d - 1 with zero padding."""
    lo, hi = max(0, 1 - d), min(n, n + 1 - d)
    return slice(lo, hi), slice(lo + d - 1, hi + d - 1)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, B, H, W) -> (C*9, B*H*W) column matrix for 3x3 same-padded windows."""
    c, b, h, w = x.shape
    cols = np.zeros((c, 3, 3, b, h, w), dtype=x.dtype)
    for di in range(3):
        rd, rs = _shift_bounds(di, h)
        for dj in range(3):
            cd, cs = _shift_bounds(dj, w)
            cols[:, di, dj, :, rd, cd] = x[:, :, rs, cs]
    return cols.reshape(c * 9, b * h * w)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    c, b, h, w = shape
    dcols = dcols.reshape(c, 3, 3, b, h, w)
    dx = dcols[:, 1, 1].copy()
    for di in range(3):
        rd, rs = _shift_bounds(di, h)
        for dj in range(3):
            if di == 1 and dj == 1:
                continue
            cd, cs = _shift_bounds(dj, w)
            dx[:, :, rs, cs] += dcols[:, di, dj, :, rd, cd]
    return dx


def _conv_pre(x: np.ndarray, layer: LayerSpec):
    """Pre-activation on a (C, B, H, W) tensor; returns (pre, cols)."""
    if x.shape[0] != layer.in_channels:
        raise ValueError(f"channel mismatch: layer expects {layer.in_channels}, got {x.shape[0]}")
    _, b, h, w = x.shape
    cols = _im2col(x)
    wmat = layer.weights.reshape(layer.out_filters, -1)
    pre = wmat @ cols + layer.bias[:, None]
    return pre.reshape(layer.out_filters, b, h, w), cols


def _activate(pre, activation):
    return np.maximum(pre, 0.0) if activation == RELU else pre


def conv2d_forward(x, layer: LayerSpec) -> np.ndarray:
    if layer.kind != CONV:
        raise ValueError("conv2d_forward needs a conv layer")
    xb, single = _batched(x)
    pre, _ = _conv_pre(xb.transpose(1, 0, 2, 3), layer)
    out = _activate(pre, layer.activation).transpose(1, 0, 2, 3)
    return out[0] if single else out


def maxpool2_forward(x):
    """2x2 max pooling; odd edges pool over the cells that exist.

    Returns (pooled, argmax) with argmax in 0..3 indexing the window row-major.
    """
    xb, single = _batched(x)
    b, c, h, w = xb.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    padded = np.full((b, c, 2 * h2, 2 * w2), -np.inf, dtype=xb.dtype)
    padded[:, :, :h, :w] = xb
    windows = padded.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def _maxpool2_backward(dout, idx, in_shape):
    b, c, h, w = in_shape
    h2, w2 = idx.shape[2:]
    dwin = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    return dx[:, :, :h, :w]


def upsample2_forward(x):
    xb, single = _batched(x)
    out = xb.repeat(2, axis=2).repeat(2, axis=3)
    return out[0] if single else out


def _upsample2_backward(dout):
    b, c, h2, w2 = dout.shape
    return dout.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------- network passes

def _check_patch_batch(model: AutoencoderModel, patches) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"expected square patches, got shape {x.shape}")
    if x.shape[1] % 2:
        raise ValueError(f"patch size {x.shape[1]} is not divisible by 2")
    return model.normalize(x).astype(model.dtype, copy=False)[None]


def _forward_batch(model: AutoencoderModel, x: np.ndarray, stop: Optional[int] = None, cache=False):
    """Run layers[:stop] on an already-normalised (1, B, P, P) batch."""
    outs, caches = [], []
    for layer in model.layers[:stop]:
        if layer.kind == CONV:
            pre, cols = _conv_pre(x, layer)
            y = _activate(pre, layer.activation)
            aux = (cols, pre, x.shape)
        elif layer.kind == MAXPOOL:
            y, idx = maxpool2_forward(x)
            aux = (idx, x.shape)
        else:
            y = upsample2_forward(x)
            aux = None
        if cache:
            caches.append(aux)
        outs.append(y)
        x = y
    return outs, caches


def forward(model: AutoencoderModel, patch):
    """Full pass on one patch; returns (reconstruction Raster, per-layer activations)."""
    x = _check_patch_batch(model, patch.values if isinstance(patch, Raster) else patch)
    if x.shape[1] != 1:
        raise ValueError("forward takes a single patch; use reconstruct_batch for batches")
    outs, _ = _forward_batch(model, x)
    recon = model.denormalize(outs[-1][0, 0])
    return Raster(recon), [o[:, 0] for o in outs]


def reconstruct_batch(model: AutoencoderModel, patches) -> np.ndarray:
    """Reconstructions in input units, shape (B, P, P)."""
    outs, _ = _forward_batch(model, _check_patch_batch(model, patches))
    return model.denormalize(outs[-1][0])


def mse_loss(reconstruction, target) -> float:
    a = reconstruction.values if isinstance(reconstruction, Raster) else np.asarray(reconstruction)
    b = target.values if isinstance(target, Raster) else np.asarray(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def compute_gradients(model: AutoencoderModel, batch):
    """Gradients of the mean batch MSE (in normalised units) w.r.t. every conv layer.

    Returns ({layer_index: (dW, db)}, loss).
    """
    grads, per_sample = _gradients(model, batch)
    return grads, float(per_sample.mean())


def _gradients(model: AutoencoderModel, batch):
    """Gradients plus the float64 loss of every sample in the batch."""
    x = _check_patch_batch(model, batch)
    outs, caches = _forward_batch(model, x, cache=True)
    diff = outs[-1] - x
    per_sample = np.mean(np.square(diff[0], dtype=np.float64), axis=(1, 2))
    grad = 2.0 * diff / diff.size
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.kind == CONV:
            cols, pre, in_shape = caches[i]
            if layer.activation == RELU:
                grad = grad * (pre > 0)
            o = grad.shape[0]
            g2 = grad.reshape(o, -1)
            grads[i] = ((g2 @ cols.T).reshape(layer.weights.shape), g2.sum(axis=1))
            if i > 0:
                wmat = layer.weights.reshape(o, -1)
                grad = _col2im(wmat.T @ g2, in_shape)
        elif layer.kind == MAXPOOL:
            idx, in_shape = caches[i]
            grad = _maxpool2_backward(grad, idx, in_shape)
        else:
            grad = _upsample2_backward(grad)
    return grads, per_sample


def _batch_loss(model, batch) -> float:
    x = _check_patch_batch(model, batch)
    outs, _ = _forward_batch(model, x)
    return float(np.mean((outs[-1] - x) ** 2))


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    train_subsample: object = 20000  # int or "all"
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"  # compute precision during training; stored weights are float64

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.train_subsample != "all" and int(self.train_subsample) < 1:
            raise ValueError("train_subsample must be a positive count or 'all'")


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        corr1 = 1 - c.beta1 ** self.t
        corr2 = 1 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.eps)


class _Sgd:
    def __init__(self, params, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


def select_training_patches(n_available: int, config: TrainConfig) -> np.ndarray:
    """Seeded subsample of patch indices (all of them if the budget covers them)."""
    if config.train_subsample == "all" or int(config.train_subsample) >= n_available:
        return np.arange(n_available)
    rng = np.random.default_rng([config.seed, 1])
    return np.sort(rng.choice(n_available, size=int(config.train_subsample), replace=False))


def train(model: AutoencoderModel, patches, config: TrainConfig, norm_range=None):
    """Mini-batch training on MSE reconstruction loss.

    ``norm_range`` is the (min, max) of the source raster; if omitted it is
    taken from the patches themselves. Returns (trained copy, per-epoch loss).
    Each history entry is the mean per-sample loss seen during that epoch,
    summed exactly so it does not depend on the batch order.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or len(patches) == 0:
        raise ValueError("need a non-empty (n, P, P) patch array")
    model = model.astype(np.dtype(config.dtype))
    if norm_range is None:
        norm_range = (float(patches.min()), float(patches.max()))
    model.norm_min, model.norm_max = float(norm_range[0]), float(norm_range[1])

    chosen = select_training_patches(len(patches), config)
    data = patches[chosen]
    conv_idx = model.conv_layers
    params = []
    for i in conv_idx:
        params += [model.layers[i].weights, model.layers[i].bias]
    opt = (_Adam if config.optimizer == "adam" else _Sgd)(params, config)
    rng = np.random.default_rng([config.seed, 2])

    history = []
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            grads, per_sample = _gradients(model, batch)
            losses.extend(per_sample.tolist())
            flat = []
            for i in conv_idx:
                flat += list(grads[i])
            opt.step(params, flat)
        history.append(math.fsum(losses) / n)
    return model.astype(np.float64), history


# ---------------------------------------------------------------- encoder features

def encoder_layers(model: AutoencoderModel, layers: str = "all") -> list[int]:
    """Conv layer indices whose outputs form the feature maps.

    ``"all"`` takes every conv layer up to and including the encoder layer;
    ``"encoder_only"`` takes just the encoder layer.
    """
    last = model.encoder_end - 1
    if layers == "encoder_only":
        if model.layers[last].kind != CONV:
            raise ValueError("encoder layer is not a conv layer")
        return [last]
    if layers != "all":
        raise ValueError(f"unknown layer selection {layers!r}")
    return [i for i in model.conv_layers if i <= last]


def encode_batch(model: AutoencoderModel, patches, layers: str = "all"):
    """Encoder activations for a batch of raw patches.

    Returns a list of (layer_index, array (B, C, h, w)) in ascending layer order.
    """
    x = _check_patch_batch(model, patches)
    outs, _ = _forward_batch(model, x, stop=model.encoder_end)
    return [(i, outs[i].transpose(1, 0, 2, 3)) for i in encoder_layers(model, layers)]


def activation_provenance(model: AutoencoderModel, layers: str = "all") -> list[tuple[int, int]]:
    """(1-based layer number, filter index) for every flattened feature map."""
    return [(i + 1, f) for i in encoder_layers(model, layers)
            for f in range(model.layers[i].out_filters)]


def encode_activations(model: AutoencoderModel, patch, layers: str = "all") -> list[np.ndarray]:
    arr = patch.values if isinstance(patch, Raster) else patch
    maps = []
    for _, act in encode_batch(model, arr, layers):
        maps.extend(act[0])
    return maps


# ---------------------------------------------------------------- serialization

def save_model(model: AutoencoderModel, directory, config: Optional[TrainConfig] = None) -> Path:
    """JSON manifest plus a little-endian float32 weight blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    specs = []
    for layer in model.layers:
        spec = {"kind": layer.kind}
        if layer.kind == CONV:
            spec["activation"] = layer.activation
            spec["out_filters"] = layer.out_filters
            spec["in_channels"] = layer.in_channels
            for name in ("weights", "bias"):
                arr = np.ascontiguousarray(getattr(layer, name), dtype="<f4")
                spec[name] = {"offset": len(blob), "shape": list(arr.shape)}
                blob += arr.tobytes()
        else:
            spec["factor"] = layer.factor
        specs.append(spec)
    manifest = {
        "format": "magrep-autoencoder/1",
        "layers": specs,
        "encoder_end": model.encoder_end,
        "normalization": {"min": model.norm_min, "max": model.norm_max},
        "weights_file": "weights.f32",
        "config": asdict(config) if config is not None else None,
    }
    (directory / "weights.f32").write_bytes(bytes(blob))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory / "manifest.json"


def load_model(directory) -> AutoencoderModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / manifest["weights_file"]).read_bytes()

    def tensor(ref):
        count = int(np.prod(ref["shape"]))
        end = ref["offset"] + 4 * count
        if end > len(blob):
            raise ValueError("weight blob truncated")
        raw = np.frombuffer(blob[ref["offset"]:end], dtype="<f4")
        return raw.reshape(ref["shape"]).astype(np.float64)

    layers = []
    for spec in manifest["layers"]:
        if spec["kind"] == CONV:
            layers.append(LayerSpec(CONV, activation=spec["activation"],
                                    weights=tensor(spec["weights"]), bias=tensor(spec["bias"])))
        else:
            layers.append(LayerSpec(spec["kind"], factor=spec.get("factor", 2)))
    norm = manifest["normalization"]
    return AutoencoderModel(layers, encoder_end=manifest["encoder_end"],
                            norm_min=norm["min"], norm_max=norm["max"])
