import numpy as np
import pytest

from magrep.grid import LABEL_DEPOSIT, LABEL_NONDEPOSIT, LABEL_UNKNOWN
from magrep.synth import TerrainConfig, analytic_anomaly_fraction, generate_terrain, lobe_sigma


def test_single_anomaly_peak():
    a = 3.0
    for seed in range(5):
        cfg = TerrainConfig(noise_level=0, n_anomalies=1, anomaly_amplitude=a, seed=seed)
        t = generate_terrain(cfg)
        r, c = t.anomaly_centers[0]
        # closed form at the positive centre: a * (1 - exp(-(2r)^2 / (2 sigma^2)))
        d = 2 * cfg.anomaly_radius
        expected = a * (1 - np.exp(-d * d / (2 * lobe_sigma(cfg.anomaly_radius) ** 2)))
        assert t.raster.values[r, c] == pytest.approx(expected, rel=1e-12)
        assert t.raster.values.max() == pytest.approx(a, rel=0.01)
        assert np.unravel_index(t.raster.values.argmax(), t.raster.shape) == (r, c)


def test_label_counts_exact():
    t = generate_terrain(TerrainConfig(seed=4))
    assert t.labels.count(LABEL_DEPOSIT) == 14
    assert t.labels.count(LABEL_NONDEPOSIT) == 17
    assert t.labels.count(LABEL_UNKNOWN) == 128 * 96 - 31


def test_deterministic():
    a = generate_terrain(TerrainConfig(seed=11))
    b = generate_terrain(TerrainConfig(seed=11))
    assert a.raster.values.tobytes() == b.raster.values.tobytes()
    assert a.labels == b.labels and a.ground_truth == b.ground_truth
    c = generate_terrain(TerrainConfig(seed=12))
    assert a.raster.values.tobytes() != c.raster.values.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_labels_agree_with_truth(seed):
    t = generate_terrain(TerrainConfig(seed=seed))
    lab, truth = t.labels.labels, t.ground_truth.labels
    known = lab != LABEL_UNKNOWN
    np.testing.assert_array_equal(lab[known], truth[known])


def test_anomaly_fraction_near_disk_estimate():
    cfg = TerrainConfig()
    fracs = [np.mean(generate_terrain(TerrainConfig(seed=s)).ground_truth.labels == 1) for s in range(20)]
    est = analytic_anomaly_fraction(cfg)
    for f in fracs:
        assert abs(f - est) <= 0.2 * est


def test_disks_inside_and_disjoint():
    cfg = TerrainConfig(seed=3)
    t = generate_terrain(cfg)
    r = cfg.anomaly_radius
    c = t.anomaly_centers
    assert np.all(c >= r) and np.all(c[:, 0] < cfg.height - r) and np.all(c[:, 1] < cfg.width - r)
    for i in range(len(c)):
        for j in range(i):
            assert np.hypot(*(c[i] - c[j])) > 2 * r
    np.testing.assert_allclose(np.hypot(*(t.anomaly_centers - t.negative_lobes).T), 2 * r)


def test_infeasible_configs():
    with pytest.raises(ValueError):
        generate_terrain(TerrainConfig(labeled_deposit=10_000))
    with pytest.raises(ValueError):
        generate_terrain(TerrainConfig(height=8, width=8))
    with pytest.raises(ValueError):
        TerrainConfig(anomaly_radius=0)
    with pytest.raises(ValueError):
        generate_terrain(TerrainConfig(n_anomalies=500))
