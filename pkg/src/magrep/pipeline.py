"""End-to-end helpers: patch sampling for training, and a one-call synthetic run."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autoencoder as ae
from .experiments import ExperimentConfig, ExperimentResult, run_experiment
from .grid import PatchSpec, Raster, center_grid, extract_patches
from .stitching import ActivationStack, build_activation_stack
from .synth import Terrain, TerrainConfig, generate_terrain


def training_patches(image: Raster, spec: PatchSpec, config: ae.TrainConfig) -> np.ndarray:
    """Patches at the seeded training subsample of centers; never materialises the full set."""
    rows, cols = center_grid(image.shape, spec.stride)
    chosen = ae.select_training_patches(len(rows) * len(cols), config)
    centers = np.stack([rows[chosen // len(cols)], cols[chosen % len(cols)]], axis=1)
    return extract_patches(image, centers, spec)


def train_on_image(image: Raster, spec: PatchSpec, config: ae.TrainConfig,
                   filters=(16, 8, 8, 16)):
    """Fresh model trained on ``image`` patches, normalised by the raster's own range."""
    model = ae.build_model(filters, seed=config.seed)
    patches = training_patches(image, spec, config)
    lo, hi = float(image.values.min()), float(image.values.max())
    return ae.train(model, patches, config, norm_range=(lo, hi))


@dataclass
class SyntheticRun:
    terrain: Terrain
    model: ae.AutoencoderModel
    loss_history: list
    stack: ActivationStack

    def experiment(self, config: ExperimentConfig) -> ExperimentResult:
        return run_experiment(self.terrain.raster, self.terrain.labels, self.model, config,
                              stack=self.stack)


def synthetic_run(terrain_cfg: TerrainConfig, train_cfg: ae.TrainConfig, spec: PatchSpec,
                  layers: str = "all") -> SyntheticRun:
    terrain = generate_terrain(terrain_cfg)
    model, history = train_on_image(terrain.raster, spec, train_cfg)
    stack = build_activation_stack(terrain.raster, model, spec, layers=layers)
    return SyntheticRun(terrain, model, history, stack)
