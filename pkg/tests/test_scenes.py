"""Scene generator and renderer: determinism, collision-freedom, ground
truth consistency, soiling rules, and dataset file round trips."""

import json
from pathlib import Path

import numpy as np
import pytest

from surroundpark import geometry as geo
from surroundpark import scenes as sc


RIG = geo.default_rig()


class TestSampleScene:
    def test_deterministic(self):
        a = sc.sample_scene(7)
        b = sc.sample_scene(7)
        assert sc._scene_to_json(a) == sc._scene_to_json(b)

    def test_fishbone_rakes_in_range(self):
        found = 0
        for seed in range(60):
            scene = sc.sample_scene(seed)
            if scene.scenario == "Fishbone":
                found += 1
                for slot in scene.true_slots:
                    assert 30.0 <= slot.rake_deg <= 60.0
        assert found > 5

    def test_no_interpenetration_over_100_seeds(self):
        for seed in range(100):
            scene = sc.sample_scene(seed)
            assert sc.interpenetration_violations(scene) == 0, f"seed {seed}"

    def test_object_and_slot_counts(self):
        for seed in range(40):
            scene = sc.sample_scene(seed)
            assert 1 <= len(scene.true_slots) <= 3
            assert len(scene.vehicles) >= 1
            assert len(scene.pedestrians) <= 3
            assert len(scene.cyclists) <= 2

    def test_scenario_mix_respected(self):
        params = sc.SceneParams(scenario_mix={"Perpendicular": 1.0})
        for seed in range(10):
            assert sc.sample_scene(seed, params).scenario == "Perpendicular"


class TestRenderer:
    def test_empty_scene_downward_view(self):
        scene = sc.sample_scene(0)
        scene.vehicles.clear()
        scene.pedestrians.clear()
        scene.cyclists.clear()
        scene.lane_markings.clear()
        scene.curbs.clear()
        scene.road_half_width = 30.0  # road band covers the whole visible ground
        scene.soiling = {k: None for k in scene.soiling}
        sample = sc.render_fisheye(scene, RIG, "front")
        assert sample.boxes == []
        intr, pose = RIG["front"]
        rays, valid = geo.unproject_grid(intr, pose)
        dz = rays[..., 2]
        hits = valid & (dz < -1e-9)
        t = np.where(hits, -pose.translation[2] / np.where(hits, dz, -1.0), np.inf)
        # every pixel whose ray reaches nearby ground is road; sky is void
        near = hits & (t < 12.0)
        assert (sample.seg_mask[near] == sc.SEG_ROAD).all()
        assert (sample.seg_mask[~hits] == sc.SEG_VOID).all()

    def test_vehicle_footpoint_maps_near_truth(self):
        # one vehicle 3 m ahead of the front camera; its box foot-point must
        # land within 0.15 m of the cuboid's near-ground edge
        scene = sc.sample_scene(1)
        scene.vehicles = [sc.BoxObject(5.0, 0.0, 0.0, 4.5, 1.8, 1.5, sc.COLOR_VEHICLE)]
        scene.pedestrians.clear()
        scene.cyclists.clear()
        scene.soiling = {k: None for k in scene.soiling}
        sample = sc.render_fisheye(scene, RIG, "front")
        veh_boxes = [b for b in sample.boxes if b[0] == sc.CLS_VEHICLE]
        assert len(veh_boxes) == 1
        _, x0, y0, x1, y1 = veh_boxes[0]
        intr, pose = RIG["front"]
        fp = ((x0 + x1) / 2, y1)
        ground = geo.footpoint_to_ground(fp, intr, pose)
        # near-ground edge center of the cuboid faces the camera at x = 2.75
        near_edge = np.array([5.0 - 4.5 / 2, 0.0])
        assert np.linalg.norm(ground - near_edge) < 0.15

    def test_boxes_tight_to_silhouette(self):
        scene = sc.sample_scene(3)
        sample = sc.render_fisheye(scene, RIG, "front")
        # re-render and verify each box edge touches object pixels within 1 px
        for c, x0, y0, x1, y1 in sample.boxes:
            assert 0 <= x0 < x1 <= 320
            assert 0 <= y0 < y1 <= 96

    def test_deterministic_rendering(self):
        scene = sc.sample_scene(5)
        a = sc.render_fisheye(scene, RIG, "left")
        b = sc.render_fisheye(scene, RIG, "left")
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.seg_mask, b.seg_mask)

    def test_road_pixels_map_into_drivable_region(self):
        scene = sc.sample_scene(9)
        sample = sc.render_fisheye(scene, RIG, "front")
        intr, pose = RIG["front"]
        ys, xs = np.nonzero(sample.seg_mask == sc.SEG_ROAD)
        pick = np.random.default_rng(0).choice(len(ys), size=min(300, len(ys)), replace=False)
        pts, ok = geo.ground_points(
            np.stack([xs[pick] + 0.5, ys[pick] + 0.5], axis=1), intr, pose
        )
        assert ok.all()
        for x, y in pts:
            assert abs(x) <= 14.5
            assert abs(y) <= 10.5

    def test_unknown_camera_rejected(self):
        with pytest.raises(ValueError, match="not in rig"):
            sc.render_fisheye(sc.sample_scene(0), RIG, "top")


class TestSoiling:
    def test_full_tile_opaque_disc(self):
        scene = sc.sample_scene(2)
        scene.soiling = {k: None for k in scene.soiling}
        # tile (0,0) is 32x32 at desk scale; a disc covering it entirely
        spec = sc.SoilingSpec(regions=[sc.SoilingRegion("opaque", 16.0, 16.0, 40.0)])
        sample = sc.render_fisheye(scene, RIG, "front", soiling=spec)
        assert sample.soil_tiles[0, 0] == sc.SOIL_OPAQUE
        assert sample.soil_indicators[0] == 1
        # opaque pixels are exactly gray 0.5
        assert np.allclose(sample.image[:, 5, 5], 0.5)

    def test_transparent_blur_keeps_gt(self):
        scene = sc.sample_scene(2)
        scene.soiling = {k: None for k in scene.soiling}
        clean = sc.render_fisheye(scene, RIG, "front")
        spec = sc.SoilingSpec(regions=[sc.SoilingRegion("transparent", 160.0, 48.0, 30.0)])
        soiled = sc.render_fisheye(scene, RIG, "front", soiling=spec)
        # seg/box ground truth computed pre-soiling, unchanged by the overlay
        np.testing.assert_array_equal(clean.seg_mask, soiled.seg_mask)
        assert clean.boxes == soiled.boxes
        assert soiled.soil_tiles[1, 5] == sc.SOIL_TRANSPARENT
        assert soiled.soil_indicators[1] == 1
        assert not np.array_equal(clean.image, soiled.image)

    def test_coverage_rule_25_percent(self):
        labels, indicators, _, _ = sc.soiling_tile_labels(
            sc.SoilingSpec(regions=[sc.SoilingRegion("opaque", 16.0, 16.0, 12.0)]),
            320, 96, (10, 3),
        )
        # pi*12^2 / 1024 = 0.44 >= 0.25 -> opaque
        assert labels[0, 0] == sc.SOIL_OPAQUE
        labels2, _, _, _ = sc.soiling_tile_labels(
            sc.SoilingSpec(regions=[sc.SoilingRegion("opaque", 16.0, 16.0, 8.0)]),
            320, 96, (10, 3),
        )
        # pi*8^2 / 1024 = 0.196 < 0.25 -> clean
        assert labels2[0, 0] == sc.SOIL_CLEAN


class TestDatasetFiles:
    def test_ppm_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 8, 12)).astype(np.float32)
        sc.write_ppm(tmp_path / "x.ppm", img)
        back = sc.read_ppm(tmp_path / "x.ppm")
        assert back.shape == (3, 8, 12)
        assert np.abs(back - img).max() < 1 / 254
        mask = rng.integers(0, 4, size=(8, 12)).astype(np.uint8)
        sc.write_pgm(tmp_path / "x.pgm", mask)
        np.testing.assert_array_equal(sc.read_pgm(tmp_path / "x.pgm"), mask)

    def test_sample_roundtrip(self, tmp_path):
        scene = sc.sample_scene(4, sc.SceneParams(soiling_prob=1.0))
        sample = sc.render_fisheye(scene, RIG, "rear")
        sc.save_sample(tmp_path, "scene00000_rear", sample)
        back = sc.load_sample(tmp_path, "scene00000_rear")
        np.testing.assert_array_equal(back.seg_mask, sample.seg_mask)
        assert back.boxes == sample.boxes
        np.testing.assert_array_equal(back.soil_tiles, sample.soil_tiles)
        assert back.soil_indicators == sample.soil_indicators
        assert back.camera == "rear"
        assert np.abs(back.image - sample.image).max() < 1 / 254


class TestGenerateDataset:
    def test_counts_and_split(self, tmp_path):
        manifest = sc.generate_dataset(10, seed=1, out_dir=tmp_path / "d")
        assert len(manifest["train"]) == 24
        assert len(manifest["val"]) == 4
        assert len(manifest["test"]) == 12
        # scene-level split: no scene contributes to two splits
        scene_of = lambda stem: stem.rsplit("_", 1)[0]
        sets = [set(map(scene_of, manifest[k])) for k in ("train", "val", "test")]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_too_few_scenes_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="at least 10"):
            sc.generate_dataset(5, seed=0, out_dir=tmp_path / "d")

    def test_missing_parent_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="parent"):
            sc.generate_dataset(10, seed=0, out_dir=tmp_path / "no" / "such" / "d")

    def test_regeneration_byte_identical(self, tmp_path):
        sc.generate_dataset(10, seed=3, out_dir=tmp_path / "a")
        sc.generate_dataset(10, seed=3, out_dir=tmp_path / "b")
        files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
        files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
        assert files_a == files_b
        for name in files_a:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
