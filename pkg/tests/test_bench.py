import numpy as np
import pytest

from nrsfm import bench, prior
from nrsfm.bench import OccluderSpec
from nrsfm.core import ShapeSequence
from nrsfm.errors import InvalidInputError


class TestOccluderSpec:
    def test_stripes_cover_alternating_bands(self):
        spec = OccluderSpec(pattern="stripes", frame_range=(0, 5),
                            stripe_width=3)
        us = np.arange(12)
        cover = spec.covers(us, np.zeros(12))
        assert cover.tolist() == [True] * 3 + [False] * 3 + [True] * 3 + \
            [False] * 3

    def test_grid_and_box(self):
        grid = OccluderSpec(pattern="grid", frame_range=(0, 1), grid_pitch=4,
                            grid_thickness=1)
        assert grid.covers(0, 2) and grid.covers(2, 4)
        assert not grid.covers(2, 2)
        box = OccluderSpec(pattern="box", frame_range=(0, 1), box=(1, 1, 3, 3))
        assert box.covers(1, 2) and not box.covers(3, 3)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            OccluderSpec(pattern="blob", frame_range=(0, 1))
        with pytest.raises(InvalidInputError):
            OccluderSpec(pattern="box", frame_range=(5, 2))
        with pytest.raises(InvalidInputError):
            OccluderSpec(pattern="stripes", frame_range=(0, 1),
                         stripe_width=0)


class TestScene:
    def test_deterministic(self):
        a = bench.generate_sheet_scene(frames=10)
        b = bench.generate_sheet_scene(frames=10)
        assert np.array_equal(a.gt_w, b.gt_w)
        assert np.array_equal(a.gt_shapes.data, b.gt_shapes.data)

    def test_projection_consistent(self):
        scene = bench.generate_sheet_scene(frames=10)
        assert np.allclose(scene.gt_poses.project(scene.gt_shapes),
                           scene.gt_w, atol=1e-12)

    def test_frames_centered(self):
        scene = bench.generate_sheet_scene(frames=10)
        assert np.allclose(scene.gt_shapes.data.mean(axis=1), 0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            bench.generate_sheet_scene(grid_w=4)
        with pytest.raises(InvalidInputError):
            bench.generate_sheet_scene(frames=5)


class TestApplyOccluder:
    def test_freeze_holds_last_clean_position(self):
        scene = bench.generate_sheet_scene(frames=12)
        spec = OccluderSpec(pattern="stripes", frame_range=(4, 8))
        w, covered = bench.apply_occluder(scene, spec, model="freeze")
        assert covered.any() and not covered.all()
        hold = scene.gt_w[6:8][:, covered]
        for f in range(4, 9):
            assert np.array_equal(w[2 * f:2 * f + 2][:, covered], hold)
        # clean tracks and clean frames are untouched
        assert np.array_equal(w[:, ~covered], scene.gt_w[:, ~covered])
        assert np.array_equal(w[:8], scene.gt_w[:8])
        assert np.array_equal(w[18:], scene.gt_w[18:])

    def test_noise_and_drift_deterministic_by_seed(self):
        scene = bench.generate_sheet_scene(frames=12)
        spec = OccluderSpec(pattern="box", frame_range=(4, 8),
                            box=(0, 0, 10, 10))
        for model in ("noise", "drift"):
            a, _ = bench.apply_occluder(scene, spec, model=model, seed=7)
            b, _ = bench.apply_occluder(scene, spec, model=model, seed=7)
            c, _ = bench.apply_occluder(scene, spec, model=model, seed=8)
            assert np.array_equal(a, b)
            assert not np.array_equal(a, c)

    def test_empty_intersection_warns(self):
        scene = bench.generate_sheet_scene(frames=10)
        spec = OccluderSpec(pattern="box", frame_range=(2, 4),
                            box=(100, 100, 110, 110))
        with pytest.warns(UserWarning):
            w, covered = bench.apply_occluder(scene, spec)
        assert not covered.any()
        assert np.array_equal(w, scene.gt_w)

    def test_unknown_model(self):
        scene = bench.generate_sheet_scene(frames=10)
        spec = OccluderSpec(pattern="stripes", frame_range=(2, 4))
        with pytest.raises(InvalidInputError):
            bench.apply_occluder(scene, spec, model="teleport")


class TestMeanRms:
    def test_zero_on_identity(self):
        scene = bench.generate_sheet_scene(frames=10)
        e, per_frame = bench.mean_rms(scene.gt_shapes, scene.gt_shapes)
        assert e < 1e-12
        assert np.all(per_frame < 1e-12)

    def test_doubled_shapes_without_alignment(self):
        scene = bench.generate_sheet_scene(frames=10)
        doubled = ShapeSequence(data=2 * scene.gt_shapes.data, frames=10,
                                points=scene.gt_shapes.points)
        e, _ = bench.mean_rms(doubled, scene.gt_shapes, align="none")
        assert np.isclose(e, 1.0)
        e_aligned, _ = bench.mean_rms(doubled, scene.gt_shapes)
        assert e_aligned < 1e-12

    def test_similarity_invariance(self):
        rng = np.random.default_rng(0)
        scene = bench.generate_sheet_scene(frames=10)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 2] = -q[:, 2]
        sim = prior.Similarity(scale=1.7, rotation=q,
                               translation=rng.normal(size=3))
        moved = prior.apply_similarity(scene.gt_shapes, sim)
        e, _ = bench.mean_rms(moved, scene.gt_shapes, align="procrustes")
        assert e < 1e-10

    def test_reflection_handled_only_when_requested(self):
        scene = bench.generate_sheet_scene(frames=10)
        mirrored = scene.gt_shapes.data.copy()
        mirrored[2::3] = -mirrored[2::3]
        m = ShapeSequence(data=mirrored, frames=10,
                          points=scene.gt_shapes.points)
        e_proper, _ = bench.mean_rms(m, scene.gt_shapes, align="procrustes")
        e_refl, _ = bench.mean_rms(m, scene.gt_shapes)
        assert e_refl < 1e-10 < e_proper

    def test_validation(self):
        scene = bench.generate_sheet_scene(frames=10)
        short = ShapeSequence(data=scene.gt_shapes.data[:27], frames=9,
                              points=scene.gt_shapes.points)
        with pytest.raises(InvalidInputError):
            bench.mean_rms(short, scene.gt_shapes)
        with pytest.raises(InvalidInputError):
            bench.mean_rms(scene.gt_shapes, scene.gt_shapes, align="icp")


class TestBenchmark:
    def test_report_structure(self):
        config = {"scene": {"grid_w": 10, "grid_h": 10, "frames": 16},
                  "occluder": {"pattern": "stripes", "frame_range": [8, 14]},
                  "configurations": [
                      {"name": "baseline", "mode": "none", "gamma": 0.0},
                      {"name": "seq", "mode": "per_sequence", "gamma": 1e2},
                  ]}
        report = bench.run_benchmark(config)
        assert report["f_sp"] >= 5
        assert [r["name"] for r in report["rows"]] == ["baseline", "seq"]
        for row in report["rows"]:
            assert row["e3d_whole"] > 0
            assert len(row["energy_trace"]) >= 1
        rows = bench.report_csv_rows(report)
        assert rows[0][0] == "configuration"
        assert len(rows) == 3
        assert "baseline" in bench.report_text(report)

    def test_ideal_tensor_marks_occluded_frames(self):
        scene = bench.generate_sheet_scene(frames=12)
        spec = OccluderSpec(pattern="box", frame_range=(6, 9),
                            box=(0, 0, 5, 5))
        tensor = bench.occluder_tensor(scene, spec)
        assert np.all(tensor.maps[:6] == 0)
        assert np.all(tensor.maps[10:] == 0)
        assert tensor.maps[7].max() == 255
