import math

import numpy as np
import pytest

from heatchange.experiments import (ExperimentConfig, RateFit, clt_sd, fisher_target, fit_rate, preset, run,
                                    run_clt, run_rate_experiment, run_tiling_identification)
from heatchange.geometry import TileGrid
from heatchange.kernel import Kernel

SMALL = dict(fine_cells=None, fine_ratio=8, steps=200, replicates=4)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"scenario": "fisher-check", "grid_sizes": [4], "truth": {}, "bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="fisher-check", grid_sizes=(4,), truth={}, replicates=0)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="fisher-check", grid_sizes=(3,), truth={}, fine_cells=16, fine_ratio=None)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="nope", grid_sizes=(4,), truth={})


def test_config_round_trip():
    cfg = preset("clt")
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_fit_rate_recovers_exact_power_law():
    deltas = np.array([0.25, 0.125, 0.0625])
    fit = fit_rate(deltas, 0.7 * deltas**1.3)
    assert fit.slope == pytest.approx(1.3, rel=1e-12)
    assert fit.intercept == pytest.approx(math.log(0.7), rel=1e-12)
    assert np.allclose(fit.residuals, 0, atol=1e-12)
    assert fit.strictly_decreasing
    with pytest.raises(ValueError):
        fit_rate(deltas[:2], deltas[:2])


def test_fit_rate_interval_and_monotonicity():
    deltas = [0.25, 0.125, 0.0625, 0.03125]
    risks = [0.1, 0.06, 0.06, 0.02]
    fit = fit_rate(deltas, risks)
    assert fit.slope_ci[0] < fit.slope < fit.slope_ci[1]
    assert not fit.strictly_decreasing
    assert math.isnan(fit_rate(deltas, [0.1, 0.0, 0.0, 0.0]).slope)


def test_fisher_target_scalings():
    k = Kernel(2)
    g8, g4 = TileGrid(2, 8), TileGrid(2, 4)
    assert fisher_target(k, g8, 2.0, 1.0) == pytest.approx(0.5 * fisher_target(k, g8, 1.0, 1.0))
    assert fisher_target(k, g4, 1.0, 1.0) / fisher_target(k, g8, 1.0, 1.0) == pytest.approx(0.25)
    assert fisher_target(k, g8, 1.0, 1.0) == pytest.approx(0.5 * k.grad_norm_squared * 64)


def test_clt_variance_ratio():
    k = Kernel(2)
    ratio = clt_sd(k, 1.0, 3.0, 0.25) ** 2 / clt_sd(k, 1.0, 1.0, 0.75) ** 2
    assert ratio == pytest.approx((3.0 / 0.25) / (1.0 / 0.75))


def test_fisher_check_smoke_and_determinism():
    cfg = preset("fisher-check", grid_sizes=[4], mode_capture=None, **SMALL)
    a, b = run(cfg), run(cfg)
    assert "max_relative_deviation" in a.summary
    assert a.summary["per_grid"][0]["off_boundary_tiles"] == 16
    assert a.rows == b.rows and a.summary == b.summary


def test_rate_experiment_needs_three_grids():
    with pytest.raises(ValueError):
        run_rate_experiment(preset("rate-model-a", grid_sizes=[4, 8]))


def test_grid_aligned_interface_has_zero_risk():
    truth = {"kind": "graph", "tau": "constant", "params": {"level": 0.5}}
    cfg = preset("rate-model-a", grid_sizes=[2, 4, 8], truth=truth, fine_cells=32, steps=200, replicates=3)
    rep = run(cfg)
    assert list(rep.summary["rate_fit"]["mean_risk"]) == [0.0, 0.0, 0.0]
    assert all(r["risk"] == 0.0 for r in rep.rows)


def test_tiling_and_clt_share_records():
    cfg = preset("tiling-ident", fine_cells=32, steps=300, replicates=6)
    ident = run_tiling_identification(cfg)
    assert ident.summary["replicates"] == 6
    assert 0.0 <= ident.summary["identification_frequency"] <= 1.0
    clt = run_clt(ExperimentConfig.from_dict({**cfg.to_dict(), "scenario": "clt"}), ident.rows)
    assert set(clt.summary["sides"]) == {"minus", "plus"}
    assert len(clt.rows) == 12


def test_tiling_identification_needs_grid_anchored_truth():
    cfg = preset("tiling-ident", truth={"kind": "ball", "center": [0.5, 0.5], "radius": 0.3},
                 fine_cells=32, steps=100, replicates=2)
    with pytest.raises(ValueError):
        run_tiling_identification(cfg)


def test_convex_consistency_smoke():
    cfg = preset("convex-hausdorff", grid_sizes=[4, 8], fine_cells=32, steps=200, replicates=2)
    rep = run(cfg)
    assert len(rep.summary["per_grid"]) == 2
    assert all(r["hausdorff"] >= 0 for r in rep.rows)


def test_z_identity_runner():
    rep = run(preset("z-identity"))
    assert rep.summary["fixtures"] == 100
    assert rep.summary["max_gap"] <= 1e-9


def test_rate_fit_is_serializable():
    fit = fit_rate([0.5, 0.25, 0.125], [0.4, 0.2, 0.1])
    assert isinstance(fit, RateFit) and fit.slope == pytest.approx(1.0)
