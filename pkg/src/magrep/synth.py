"""Synthetic single-band "magnetic" terrains with planted dipole anomalies and sparse labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import LABEL_DEPOSIT, LABEL_NONDEPOSIT, LABEL_UNKNOWN, LabelMap, Raster


@dataclass(frozen=True)
class TerrainConfig:
    height: int = 128
    width: int = 96
    n_anomalies: int = 6
    anomaly_amplitude: float = 5.0
    anomaly_radius: int = 5
    background_smoothness: float = 4.0
    noise_level: float = 1.0
    labeled_deposit: int = 14
    labeled_nondeposit: int = 17
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.n_anomalies, self.labeled_deposit,
               self.labeled_nondeposit) < 1:
            raise ValueError("dimensions and counts must be >= 1")
        if self.anomaly_radius < 1:
            raise ValueError("anomaly_radius must be >= 1")
        if self.noise_level < 0 or self.background_smoothness < 0:
            raise ValueError("noise_level and background_smoothness must be >= 0")


@dataclass
class Terrain:
    raster: Raster
    labels: LabelMap
    ground_truth: LabelMap
    anomaly_centers: np.ndarray  # positive lobe centres; deposits are disks around them
    negative_lobes: np.ndarray


def lobe_sigma(radius: float) -> float:
    """Gaussian width of a lobe of the given radius (the disk holds ~86% of its mass)."""
    return radius / 2.0


def _place_anomalies(rng, cfg: TerrainConfig, max_tries: int = 10000):
    """Integer anomaly centres plus dipole axes.

    Each deposit disk must lie inside the raster, its negative lobe (2r away
    along the axis) must stay inside too, and disks must not overlap.
    """
    r = cfg.anomaly_radius
    h, w = cfg.height, cfg.width
    if h <= 2 * r + 1 or w <= 2 * r + 1:
        raise ValueError(f"anomalies of radius {r} do not fit in {h}x{w}")
    centers, axes = [], []
    tries = 0
    while len(centers) < cfg.n_anomalies:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {cfg.n_anomalies} disjoint anomalies of radius {r}")
        c = np.array([rng.integers(r, h - r), rng.integers(r, w - r)])
        angle = rng.uniform(0, 2 * np.pi)
        axis = np.array([np.sin(angle), np.cos(angle)])
        neg = c - 2 * r * axis
        if not (0 <= neg[0] <= h - 1 and 0 <= neg[1] <= w - 1):
            continue
        if all(np.hypot(*(c - o)) > 2 * r + 1 for o in centers):
            centers.append(c)
            axes.append(axis)
    return np.array(centers), np.array(axes)


def _gaussian(rr, cc, center, sigma):
    return np.exp(-((rr - center[0]) ** 2 + (cc - center[1]) ** 2) / (2 * sigma * sigma))


def generate_terrain(cfg: TerrainConfig) -> Terrain:
    rng = np.random.default_rng(cfg.seed)
    h, w, r = cfg.height, cfg.width, cfg.anomaly_radius

    field = np.zeros((h, w))
    if cfg.noise_level > 0:
        bg = gaussian_filter(rng.standard_normal((h, w)), cfg.background_smoothness, mode="reflect")
        std = bg.std()
        field += cfg.noise_level * (bg / std if std > 0 else bg)

    centers, axes = _place_anomalies(rng, cfg)
    rr, cc = np.mgrid[0:h, 0:w]
    sigma = lobe_sigma(r)
    neg_lobes = centers - 2 * r * axes
    truth = np.zeros((h, w), dtype=np.uint8)
    for pos, neg in zip(centers, neg_lobes):
        field += cfg.anomaly_amplitude * (_gaussian(rr, cc, pos, sigma) - _gaussian(rr, cc, neg, sigma))
        truth[(rr - pos[0]) ** 2 + (cc - pos[1]) ** 2 <= r * r] = LABEL_DEPOSIT

    labels = np.full((h, w), LABEL_UNKNOWN, dtype=np.uint8)
    for cls, count in ((LABEL_DEPOSIT, cfg.labeled_deposit), (LABEL_NONDEPOSIT, cfg.labeled_nondeposit)):
        pool = np.flatnonzero(truth.ravel() == cls)
        if count > len(pool):
            raise ValueError(f"cannot reveal {count} pixels of class {cls}: only {len(pool)} exist")
        chosen = rng.choice(pool, size=count, replace=False)
        labels.ravel()[chosen] = cls

    return Terrain(Raster(field), LabelMap(labels), LabelMap(truth), centers, neg_lobes)


def analytic_anomaly_fraction(cfg: TerrainConfig) -> float:
    """Disk-area estimate of the deposit pixel fraction."""
    return cfg.n_anomalies * np.pi * cfg.anomaly_radius ** 2 / (cfg.height * cfg.width)
