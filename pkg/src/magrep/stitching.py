"""Full-resolution activation maps built by encoding every per-pixel patch and stitching."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from .formats import load_raster_f32, save_raster_f32, write_json
from .grid import PatchSpec, Raster, StitchAccumulator, center_grid, extract_patches, nearest_source_index


@dataclass
class ActivationStack:
    maps: list
    provenance: list  # (layer number, filter index) per map
    coverage: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.maps) != len(self.provenance):
            raise ValueError("one provenance entry per map required")
        shapes = {m.shape for m in self.maps}
        if len(shapes) > 1:
            raise ValueError(f"stack maps disagree on shape: {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps[0].shape

    def __len__(self):
        return len(self.maps)

    def array(self) -> np.ndarray:
        """(N, H, W) view of the stack."""
        return np.stack([m.values for m in self.maps])


def check_normalization(image: Raster, model: ae.AutoencoderModel, rtol: float = 1e-6) -> None:
    lo, hi = float(image.values.min()), float(image.values.max())
    span = max(hi - lo, abs(hi), 1.0)
    if abs(lo - model.norm_min) > rtol * span or abs(hi - model.norm_max) > rtol * span:
        raise ValueError(
            f"normalization mismatch: image range [{lo}, {hi}] vs model "
            f"[{model.norm_min}, {model.norm_max}]")


def _blocks(rows: np.ndarray, block_rows: int):
    for start in range(0, len(rows), block_rows):
        yield rows[start:start + block_rows]


def _stitch_stream(image: Raster, spec: PatchSpec, n_maps: int, patch_fn, block_rows: int,
                   workers: int) -> tuple[np.ndarray, np.ndarray]:
    """Feed patch-function outputs for every center into one accumulator.

    ``patch_fn`` maps an (n, P, P) patch batch to (n, n_maps, P, P). Row blocks
    are computed (optionally in threads) but always accumulated in lattice
    order, so the sums do not depend on ``workers``.
    """
    h, w = image.shape
    rows, cols = center_grid((h, w), spec.stride)
    acc = StitchAccumulator(h, w, spec.patch_size, n_maps)

    def work(block):
        centers = np.stack(np.meshgrid(block, cols, indexing="ij"), axis=-1).reshape(-1, 2)
        out = patch_fn(extract_patches(image, centers, spec))
        p = spec.patch_size
        return block, out.reshape(len(block), len(cols), n_maps, p, p).transpose(2, 0, 1, 3, 4)

    blocks = list(_blocks(rows, block_rows))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for block, values in pool.map(work, blocks):
                acc.add_grid(block, cols, values)
    else:
        for block in blocks:
            _, values = work(block)
            acc.add_grid(block, cols, values)
    covered = acc.counts > 0
    out = np.zeros_like(acc.sums)
    out[:, covered] = acc.sums[:, covered] / acc.counts[covered]
    return out, acc.counts


def _resize_to_patch(act: np.ndarray, p: int) -> np.ndarray:
    """Nearest-neighbour resize of (B, C, h, w) activations to (B, C, P, P)."""
    ri = nearest_source_index(act.shape[2], p)
    ci = nearest_source_index(act.shape[3], p)
    return act[:, :, ri[:, None], ci[None, :]]


def build_activation_stack(image: Raster, model: ae.AutoencoderModel, spec: PatchSpec,
                           layers: str = "all", block_rows: int = 4, workers: int = 1,
                           check_norm: bool = True) -> ActivationStack:
    if check_norm:
        check_normalization(image, model)
    if spec.patch_size % 2:
        raise ValueError(f"patch size {spec.patch_size} is not divisible by 2")
    provenance = ae.activation_provenance(model, layers)
    p = spec.patch_size

    def patch_fn(patches):
        acts = [_resize_to_patch(a, p) for _, a in ae.encode_batch(model, patches, layers)]
        return np.concatenate(acts, axis=1)

    maps, counts = _stitch_stream(image, spec, len(provenance), patch_fn, block_rows, workers)
    return ActivationStack([Raster(m) for m in maps], provenance, counts)


def reconstructed_image(image: Raster, model: ae.AutoencoderModel, spec: PatchSpec,
                        block_rows: int = 4, workers: int = 1, check_norm: bool = True) -> Raster:
    """Stitch of the decoder output, in the raster's own units."""
    if check_norm:
        check_normalization(image, model)
    if spec.patch_size % 2:
        raise ValueError(f"patch size {spec.patch_size} is not divisible by 2")

    def patch_fn(patches):
        return ae.reconstruct_batch(model, patches)[:, None]

    maps, _ = _stitch_stream(image, spec, 1, patch_fn, block_rows, workers)
    return Raster(maps[0])


def save_stack(stack: ActivationStack, directory, extra_meta=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for (layer, filt), m in zip(stack.provenance, stack.maps):
        name = f"{layer}_{filt}.f32"
        save_raster_f32(directory / name, m)
        files.append({"file": name, "layer": layer, "filter": filt})
    h, w = stack.shape
    meta = {
        "height": h,
        "width": w,
        "maps": files,
        "uncovered_pixels": int(np.count_nonzero(stack.coverage == 0)) if stack.coverage is not None else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_json(directory / "stack.meta.json", meta)
    return directory / "stack.meta.json"


def load_stack(directory) -> ActivationStack:
    directory = Path(directory)
    meta_path = directory / "stack.meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no activation stack at {directory} (missing stack.meta.json)")
    meta = json.loads(meta_path.read_text())
    maps, prov = [], []
    for entry in meta["maps"]:
        maps.append(load_raster_f32(directory / entry["file"]))
        prov.append((int(entry["layer"]), int(entry["filter"])))
    stack = ActivationStack(maps, prov)
    if stack.shape != (meta["height"], meta["width"]):
        raise ValueError("stack maps do not match manifest dimensions")
    return stack
