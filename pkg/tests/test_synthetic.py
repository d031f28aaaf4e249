"""Tests for synthetic ground-truth generators."""
import numpy as np

from lakf.synthetic import constant_velocity_tracks, maneuvering_tracks


class TestConstantVelocityTracks:
    """Test constant_velocity_tracks."""

    def test_shape_and_labels(self):
        tracks = constant_velocity_tracks(5, 12, seed=0)
        assert len(tracks) == 5
        assert all(len(t) == 12 for t in tracks)
        assert {t.category for t in tracks} == {"Pedestrian"}
        assert [t.track_id for t in tracks] == [1, 2, 3, 4, 5]

    def test_constant_velocity(self):
        for track in constant_velocity_tracks(5, 12, seed=1):
            np.testing.assert_allclose(np.diff(track.gt[:, :2], n=2, axis=0), 0.0, atol=1e-9)
            assert np.ptp(track.gt[:, 2]) == 0
            assert np.ptp(track.gt[:, 3]) == 0

    def test_deterministic(self):
        a = constant_velocity_tracks(3, 10, seed=4)
        b = constant_velocity_tracks(3, 10, seed=4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.gt, y.gt)


class TestManeuveringTracks:
    """Test maneuvering_tracks."""

    def test_valid_boxes(self):
        tracks = maneuvering_tracks(20, 100, seed=0)
        assert {t.category for t in tracks} == {"Dancer"}
        for track in tracks:
            assert np.all(track.gt[:, 2:] > 0)

    def test_velocity_changes(self):
        track = maneuvering_tracks(1, 100, seed=2)[0]
        accel = np.diff(track.gt[:, 0], n=2)
        assert np.abs(accel).max() > 0.1

    def test_deterministic(self):
        a = maneuvering_tracks(3, 40, seed=5)
        b = maneuvering_tracks(3, 40, seed=5)
        c = maneuvering_tracks(3, 40, seed=6)
        np.testing.assert_array_equal(a[0].gt, b[0].gt)
        assert not np.array_equal(a[0].gt, c[0].gt)
