"""Tests for MOT ingestion, measurement simulation, splits and dataset files."""
import json

import numpy as np
import pytest

from lakf.dataio import (
    SCHEMA_VERSION,
    DatasetSplit,
    Trajectory,
    dataset_aiou_report,
    load_mot_root,
    make_splits,
    parse_mot_gt,
    read_dataset,
    read_seqinfo,
    simulate_dataset,
    simulate_measurements,
    to_mode,
    write_dataset,
)
from lakf.errors import DomainError, FormatError, ParseError
from lakf.geometry import StateMode, paired_iou
from lakf.synthetic import constant_velocity_tracks


def make_traj(length=10, track_id=1, h=100.0, category="Pedestrian", dataset="ds", sequence="seq"):
    gt = np.tile([50.0, 60.0, 0.5, h], (length, 1))
    return Trajectory(dataset=dataset, sequence=sequence, track_id=track_id, category=category,
                      img_w=640, img_h=480, frames=np.arange(1, length + 1), gt=gt)


class TestTrajectory:
    """Test Trajectory invariants."""

    def test_too_short(self):
        with pytest.raises(DomainError):
            make_traj(length=1)

    def test_frames_must_increase(self):
        with pytest.raises(DomainError):
            Trajectory("d", "s", 1, "c", 10, 10, np.array([2, 1]), np.ones((2, 4)))

    def test_consecutive_runs(self):
        traj = Trajectory("d", "s", 1, "c", 10, 10, np.array([1, 2, 3, 7, 8]), np.ones((5, 4)))
        runs = traj.consecutive_runs()
        assert [r.tolist() for r in runs] == [[0, 1, 2], [3, 4]]


class TestParseMotGt:
    """Test MOTChallenge ground-truth parsing."""

    def test_single_row_conversion(self):
        text = "1,7,100,200,50,100,1,1,1.0\n2,7,102,200,50,100,1,1,1.0\n"
        trajs = parse_mot_gt(text, "ds", "seq", 1920, 1080)
        assert len(trajs) == 1
        assert trajs[0].track_id == 7
        np.testing.assert_allclose(trajs[0].gt[0], [125, 250, 0.5, 100])

    def test_ignore_rows_dropped(self):
        text = "1,1,0,0,10,20,1,1,1\n2,1,0,0,10,20,0,1,1\n3,1,0,0,10,20,1,1,1\n"
        trajs = parse_mot_gt(text, "ds", "seq", 100, 100)
        assert trajs[0].frames.tolist() == [1, 3]

    def test_frames_sorted(self):
        text = "2,3,0,0,10,20,1,1,1\n1,3,5,5,10,20,1,1,1\n"
        trajs = parse_mot_gt(text, "ds", "seq", 100, 100)
        assert trajs[0].frames.tolist() == [1, 2]
        assert trajs[0].gt[0, 0] == pytest.approx(10.0)

    def test_category_mapping(self):
        text = "1,1,0,0,10,20,1,1,1\n2,1,0,0,10,20,1,1,1\n1,2,0,0,10,20,1,7,1\n2,2,0,0,10,20,1,7,1\n"
        trajs = parse_mot_gt(text, "ds", "seq", 100, 100, categories={1: "Pedestrian"})
        assert [t.track_id for t in trajs] == [1]
        assert trajs[0].category == "Pedestrian"

    def test_single_frame_track_skipped(self):
        text = "1,1,0,0,10,20,1,1,1\n1,2,0,0,10,20,1,1,1\n2,2,0,0,10,20,1,1,1\n"
        assert [t.track_id for t in parse_mot_gt(text, "ds", "seq", 100, 100)] == [2]

    def test_empty_input(self):
        assert parse_mot_gt("", "ds", "seq", 100, 100) == []

    def test_malformed_row(self):
        text = "1,1,0,0,10,20,1,1,1\n2,1,zero,0,10,20,1,1,1\n"
        with pytest.raises(ParseError) as exc_info:
            parse_mot_gt(text, "ds", "seq", 100, 100)
        assert exc_info.value.line_number == 2
        assert "line 2" in str(exc_info.value)

    def test_duplicate_track_frame(self):
        text = "1,1,0,0,10,20,1,1,1\n2,1,1,0,10,20,1,1,1\n2,2,5,5,10,20,1,1,1\n2,1,2,0,10,20,1,1,1\n"
        with pytest.raises(ParseError) as exc_info:
            parse_mot_gt(text, "ds", "seq", 100, 100)
        assert exc_info.value.line_number == 4
        assert "line 2" in str(exc_info.value)

    def test_too_few_columns(self):
        with pytest.raises(ParseError):
            parse_mot_gt("1,1,0,0\n", "ds", "seq", 100, 100)

    def test_load_mot_root(self, temp_dir):
        seq = temp_dir / "dance-01"
        (seq / "gt").mkdir(parents=True)
        (seq / "gt" / "gt.txt").write_text("1,1,0,0,10,20,1,1,1\n2,1,1,0,10,20,1,1,1\n", encoding="utf-8")
        (seq / "seqinfo.ini").write_text(
            "[Sequence]\nname=dance-01\nimWidth=1280\nimHeight=720\nseqLength=2\n", encoding="utf-8")
        assert read_seqinfo(seq / "seqinfo.ini")["imWidth"] == 1280
        trajs = load_mot_root(temp_dir, "DanceTrack", default_category="Dancer")
        assert len(trajs) == 1
        assert (trajs[0].sequence, trajs[0].img_w, trajs[0].img_h) == ("dance-01", 1280, 720)
        assert trajs[0].category == "Dancer"

    def test_load_mot_root_without_gt(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            load_mot_root(temp_dir, "empty")


class TestSimulateMeasurements:
    """Test semi-simulated measurement generation."""

    def test_zero_noise_passthrough(self):
        traj = make_traj()
        sim = simulate_measurements(traj, 0.0, seed=1)
        np.testing.assert_array_equal(sim.meas, traj.gt)

    def test_negative_alpha_rejected(self):
        with pytest.raises(DomainError):
            simulate_measurements(make_traj(), -0.1, seed=1)

    def test_deterministic(self):
        traj = make_traj()
        a = simulate_measurements(traj, 0.05, seed=3)
        b = simulate_measurements(traj, 0.05, seed=3)
        c = simulate_measurements(traj, 0.05, seed=4)
        np.testing.assert_array_equal(a.meas, b.meas)
        assert not np.array_equal(a.meas, c.meas)

    def test_clamped_sizes(self):
        sim = simulate_measurements(make_traj(length=200, h=1.0), 5.0, seed=0)
        assert np.all(sim.meas[:, 2:] >= 1e-4)

    def test_empirical_covariance(self):
        traj = make_traj(length=10_000, h=100.0)
        sim = simulate_measurements(traj, 0.05, seed=9)
        var = np.var(sim.meas - traj.gt, axis=0)
        np.testing.assert_allclose(var, [25.0, 25.0, 0.01, 25.0], rtol=0.1)

    def test_measurement_iou_levels(self):
        gt = constant_velocity_tracks(500, 10, seed=0, aspect_range=(1.0, 1.0))
        means = []
        for alpha in (0.05, 0.1, 0.2, 0.4):
            sims = simulate_dataset(gt, alpha, seed=1)
            means.append(np.concatenate([paired_iou(s.meas, s.base.gt, StateMode.XYAH) for s in sims]).mean())
        assert 0.72 <= means[0] <= 0.86
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_dataset_order_independent(self):
        gt = constant_velocity_tracks(6, 8, seed=0)
        forward = simulate_dataset(gt, 0.1, seed=2)
        backward = simulate_dataset(list(reversed(gt)), 0.1, seed=2, workers=3)
        for a, b in zip(forward, reversed(backward)):
            np.testing.assert_array_equal(a.meas, b.meas)

    def test_to_mode(self):
        boxes = np.array([[10, 20, 0.5, 100]], dtype=float)
        np.testing.assert_allclose(to_mode(boxes, StateMode.XYWH), [[10, 20, 50, 100]])


class TestMakeSplits:
    """Test temporal splitting and validation sampling."""

    def test_halves(self):
        sim = simulate_measurements(make_traj(length=600), 0.05, seed=0)
        split = make_splits([sim], val_fraction=0.0)
        assert split.train[0].base.frames.tolist() == list(range(1, 301))
        assert split.test[0].base.frames.tolist() == list(range(301, 601))

    def test_odd_length(self):
        sim = simulate_measurements(make_traj(length=5), 0.05, seed=0)
        split = make_splits([sim], val_fraction=0.0)
        assert (len(split.train[0]), len(split.test[0])) == (2, 3)

    def test_validation_fraction(self):
        sims = [simulate_measurements(make_traj(length=8, track_id=i), 0.05, seed=i) for i in range(100)]
        split = make_splits(sims, val_fraction=0.1, seed=0)
        assert len(split.val) == 10
        assert len(split.train) == 90
        assert len(split.test) == 100

    def test_short_skipped(self):
        sims = [simulate_measurements(make_traj(length=3), 0.05, seed=0),
                simulate_measurements(make_traj(length=4, track_id=2), 0.05, seed=0)]
        split = make_splits(sims)
        assert split.skipped == 1
        assert len(split.test) == 1

    def test_disjoint_frames(self, small_split):
        train_keys = {(t.base.sequence, t.base.track_id, int(f))
                      for t in small_split.train + small_split.val for f in t.base.frames}
        test_keys = {(t.base.sequence, t.base.track_id, int(f)) for t in small_split.test for f in t.base.frames}
        assert not train_keys & test_keys


class TestDatasetFiles:
    """Test the line-delimited dataset format."""

    def test_round_trip_bit_exact(self, small_split, temp_dir):
        path = write_dataset(small_split, temp_dir / "ds.jsonl")
        loaded = read_dataset(path)
        for name in ("train", "val", "test"):
            original, restored = small_split.parts()[name], loaded.parts()[name]
            assert len(original) == len(restored)
            for a, b in zip(original, restored):
                assert a.base.key == b.base.key
                np.testing.assert_array_equal(a.meas, b.meas)
                np.testing.assert_array_equal(a.base.gt, b.base.gt)
                np.testing.assert_array_equal(a.base.frames, b.base.frames)

    def test_header_and_fields(self, small_split, temp_dir):
        path = write_dataset(small_split, temp_dir / "ds.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0]) == {"schema_version": SCHEMA_VERSION}
        assert set(json.loads(lines[1])) == {"dataset", "sequence", "track_id", "category", "img_w", "img_h",
                                             "alpha_p", "seed", "frames", "gt", "meas", "split"}

    def test_empty_file(self, temp_dir):
        path = temp_dir / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        split = read_dataset(path)
        assert (split.train, split.val, split.test) == ([], [], [])

    def test_unknown_field_rejected(self, small_split, temp_dir):
        path = write_dataset(small_split, temp_dir / "ds.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        record = json.loads(lines[1])
        record["color"] = "red"
        path.write_text("\n".join([lines[0], json.dumps(record)]) + "\n", encoding="utf-8")
        with pytest.raises(FormatError) as exc_info:
            read_dataset(path)
        assert exc_info.value.field == "color"

    def test_version_mismatch(self, temp_dir):
        path = temp_dir / "old.jsonl"
        path.write_text(json.dumps({"schema_version": "lakf-ds-v0"}) + "\n", encoding="utf-8")
        with pytest.raises(FormatError) as exc_info:
            read_dataset(path)
        assert exc_info.value.field == "schema_version"

    def test_write_is_deterministic(self, small_split, temp_dir):
        a = write_dataset(small_split, temp_dir / "a.jsonl").read_bytes()
        b = write_dataset(small_split, temp_dir / "b.jsonl").read_bytes()
        assert a == b

    def test_empty_split_round_trip(self, temp_dir):
        path = write_dataset(DatasetSplit(), temp_dir / "none.jsonl")
        assert read_dataset(path).parts() == {"train": [], "val": [], "test": []}


class TestAiouReport:
    """Test the per-category AIoU table."""

    def test_static_dataset(self):
        report = dataset_aiou_report([make_traj(), make_traj(track_id=2)])
        assert report["aiou"].tolist() == [pytest.approx(1.0)]
        assert report["objects"].tolist() == [2]
        assert report["pairs"].tolist() == [18]

    def test_single_pair(self):
        gt = np.array([[1.0, 1.0, 1.0, 2.0], [2.0, 1.0, 1.0, 2.0]])
        traj = Trajectory("d", "s", 1, "Dancer", 10, 10, np.array([1, 2]), gt)
        assert dataset_aiou_report([traj])["aiou"].iloc[0] == pytest.approx(1 / 3)

    def test_categories_are_rows(self):
        report = dataset_aiou_report([make_traj(category="A"), make_traj(track_id=2, category="B")])
        assert report["category"].tolist() == ["A", "B"]

    def test_gaps_are_not_paired(self):
        gt = np.array([[0.0, 0, 1, 2], [0.0, 0, 1, 2], [100.0, 0, 1, 2], [100.0, 0, 1, 2]])
        traj = Trajectory("d", "s", 1, "c", 10, 10, np.array([1, 2, 5, 6]), gt)
        report = dataset_aiou_report([traj])
        assert report["pairs"].iloc[0] == 2
        assert report["aiou"].iloc[0] == pytest.approx(1.0)
