"""Smoke tests for the pymhe extension module."""

import math

import numpy as np
import pytest

import pymhe


def test_manifold_euclidean():
    m = pymhe.Manifold.euclidean(3)
    assert m.ambient_dim == 3
    assert m.tangent_dim == 3
    x = np.array([1.0, 2.0, 3.0])
    d = np.array([0.1, -0.2, 0.3])
    y = m.boxplus(x, d)
    np.testing.assert_allclose(y, x + d)
    np.testing.assert_allclose(m.boxminus(y, x), d, atol=1e-12)


def test_manifold_angle_wraps():
    m = pymhe.Manifold.angle()
    y = m.boxplus(np.array([3.0]), np.array([1.0]))
    assert -math.pi < y[0] <= math.pi
    assert y[0] == pytest.approx(4.0 - 2.0 * math.pi)
    assert pymhe.wrap_angle(4.0) == pytest.approx(4.0 - 2.0 * math.pi)


def test_manifold_quaternion_roundtrip():
    m = pymhe.Manifold.unit_quaternion()
    assert m.ambient_dim == 4
    assert m.tangent_dim == 3
    q = np.array([1.0, 0.0, 0.0, 0.0])
    d = np.array([0.3, -0.1, 0.2])
    y = m.boxplus(q, d)
    assert np.linalg.norm(y) == pytest.approx(1.0)
    np.testing.assert_allclose(m.boxminus(y, q), d, atol=1e-12)
    assert m.is_valid(y)


def test_config_dict_roundtrip():
    cfg = pymhe.SimConfig.from_dict({"seed": 3, "duration": 5.0})
    d = cfg.to_dict()
    assert d["seed"] == 3
    assert d["duration"] == 5.0
    again = pymhe.SimConfig.from_dict(d)
    assert again.hash() == cfg.hash()


def test_config_rejects_bad_values():
    with pytest.raises(pymhe.ConfigError):
        pymhe.SimConfig.from_dict({"duration": -1.0})


def test_simulate_run_roundtrip():
    cfg = pymhe.SimConfig.from_dict(
        {
            "seed": 5,
            "duration": 6.0,
            "noise": {
                "gyro": 0.01,
                "accel": 0.05,
                "landmark_pos": 0.02,
                "landmark_heading": 0.01,
            },
            "estimator": {"batch_size": 4},
        }
    )
    ds = pymhe.simulate(cfg)
    assert ds.num_events > 0

    # Dataset survives a dict round trip.
    ds2 = pymhe.SimDataset.from_dict(ds.to_dict())
    assert ds2.num_events == ds.num_events

    result = pymhe.run_mhe(ds, cfg)
    assert result.estimator == "mhe"
    assert result.num_rows > 0
    assert math.isfinite(result.metrics.rms_position_error)
    assert result.metrics.rms_position_error < 0.5
    assert result.metrics.total_solves > 0

    baseline = pymhe.run_iekf(ds, cfg)
    assert baseline.estimator == "iekf"
    assert math.isfinite(baseline.metrics.rms_position_error)

    # Determinism: same inputs, same metrics.
    repeat = pymhe.run_mhe(ds, cfg)
    assert repeat.metrics.rms_position_error == result.metrics.rms_position_error


def test_iekf_rejects_dual_process_models():
    cfg = pymhe.SimConfig.from_dict(
        {
            "seed": 5,
            "duration": 4.0,
            "sensors": {"landmark_a": True, "constvel": True, "diffdrive": True},
        }
    )
    ds = pymhe.simulate(cfg)
    with pytest.raises(pymhe.ConfigError, match="cannot directly"):
        pymhe.run_iekf(ds, cfg)


def test_write_report(tmp_path):
    cfg = pymhe.SimConfig.from_dict({"seed": 2, "duration": 4.0})
    ds = pymhe.simulate(cfg)
    result = pymhe.run_mhe(ds, cfg)
    pymhe.write_report(result, cfg, str(tmp_path), "csv")
    assert (tmp_path / "mhe_summary.json").exists()
    assert (tmp_path / "mhe_steps.csv").exists()
