"""Tests for the CV transition, measurement and noise matrices."""
import numpy as np
import pytest
from pydantic import ValidationError

from lakf.errors import DomainError
from lakf.geometry import StateMode
from lakf.linear_models import (
    LinearModelConfig,
    build_measurement,
    build_measurement_noise,
    build_process_noise,
    build_transition,
)


def state(cx=0.0, cy=0.0, p3=0.5, h=100.0):
    x = np.zeros(8)
    x[::2] = [cx, cy, p3, h]
    return x


class TestLinearModelConfig:
    """Test configuration validation."""

    def test_defaults(self):
        cfg = LinearModelConfig()
        assert cfg.mode is StateMode.XYAH
        assert cfg.dt == 1.0
        assert cfg.alpha_p == 0.05
        assert cfg.alpha_v == 0.00625

    @pytest.mark.parametrize("field", ["dt", "alpha_p", "alpha_v"])
    def test_rejects_non_positive(self, field):
        with pytest.raises(ValidationError):
            LinearModelConfig(**{field: 0.0})

    def test_rejects_unknown_field(self):
        with pytest.raises(ValidationError):
            LinearModelConfig(alpha_q=1.0)


class TestTransition:
    """Test build_transition."""

    def test_unit_dt_blocks(self):
        F = build_transition(LinearModelConfig())
        for k in range(4):
            np.testing.assert_array_equal(F[2 * k:2 * k + 2, 2 * k:2 * k + 2], [[1, 1], [0, 1]])
        assert np.count_nonzero(F) == 12

    def test_half_dt(self):
        F = build_transition(LinearModelConfig(dt=0.5))
        x = np.array([0, 2, 0, 0, 0, 0, 0, 0], dtype=float)
        assert (F @ x)[0] == pytest.approx(1.0)

    def test_zero_state(self):
        np.testing.assert_array_equal(build_transition(LinearModelConfig()) @ np.zeros(8), np.zeros(8))

    def test_mode_independent(self):
        np.testing.assert_array_equal(build_transition(LinearModelConfig(mode="XYAH")),
                                      build_transition(LinearModelConfig(mode="XYWH")))


class TestMeasurement:
    """Test build_measurement."""

    def test_selects_positions(self):
        H = build_measurement()
        np.testing.assert_array_equal(H @ np.array([1, 9, 2, 9, 3, 9, 4, 9], dtype=float), [1, 2, 3, 4])

    def test_orthonormal_rows(self):
        H = build_measurement()
        assert H.shape == (4, 8)
        np.testing.assert_array_equal(H @ H.T, np.eye(4))


class TestProcessNoise:
    """Test build_process_noise."""

    def test_xyah_worked_example(self):
        Q = build_process_noise(LinearModelConfig(), state(h=100.0))
        expected = [25, 0.390625, 25, 0.390625, 1e-4, 1e-10, 25, 0.390625]
        np.testing.assert_allclose(np.diag(Q), expected, rtol=1e-12)
        np.testing.assert_array_equal(Q, np.diag(np.diag(Q)))

    def test_xywh_worked_example(self):
        cfg = LinearModelConfig(mode="XYWH")
        Q = build_process_noise(cfg, state(p3=100.0, h=100.0))
        np.testing.assert_allclose(np.diag(Q), [25, 0.390625] * 4, rtol=1e-12)

    def test_quadratic_in_height(self):
        cfg = LinearModelConfig()
        q1 = np.diag(build_process_noise(cfg, state(h=100.0)))
        q2 = np.diag(build_process_noise(cfg, state(h=200.0)))
        scaled = [0, 1, 2, 3, 6, 7]
        np.testing.assert_allclose(q2[scaled], 4 * q1[scaled], rtol=1e-12)
        np.testing.assert_allclose(q2[[4, 5]], q1[[4, 5]], rtol=1e-12)

    def test_rejects_non_positive_height(self):
        with pytest.raises(DomainError):
            build_process_noise(LinearModelConfig(), state(h=0.0))

    def test_rejects_non_positive_width(self):
        with pytest.raises(DomainError):
            build_process_noise(LinearModelConfig(mode="XYWH"), state(p3=-1.0))


class TestMeasurementNoise:
    """Test build_measurement_noise."""

    def test_xyah_worked_example(self):
        R = build_measurement_noise(LinearModelConfig(), state(h=100.0))
        np.testing.assert_allclose(np.diag(R), [25, 25, 0.01, 25], rtol=1e-12)

    def test_xywh_worked_example(self):
        R = build_measurement_noise(LinearModelConfig(mode="XYWH"), state(p3=50.0, h=100.0))
        np.testing.assert_allclose(np.diag(R), [6.25, 25, 6.25, 25], rtol=1e-12)

    def test_positive_definite(self):
        R = build_measurement_noise(LinearModelConfig(alpha_p=0.4), state(h=30.0))
        assert np.all(np.linalg.eigvalsh(R) > 0)

    def test_zero_alpha_rejected_by_config(self):
        with pytest.raises(ValidationError):
            LinearModelConfig(alpha_p=0)
