import json

import numpy as np
import pytest

from grounding.projection import (
    Region2D,
    best_frame_region,
    compute_scene_regions,
    extend_rect,
    iou_2d,
    iou_3d,
    project_points,
    read_regions,
    regions_cache_path,
    regions_key,
    stale_key_fields,
    write_regions,
)
from grounding.schemas import ExtensionMode, Record
from grounding.scene import AxisAlignedBox3D
from grounding.utils.utils import BundleLoadError
from tests.factories import HEIGHT, WIDTH, cluster, make_frame, make_scene, random_rotation

STAMP = Record.Stamp(config_hash="0123456789abcdef", seed=0, code_version="r1")


class TestProjectPoints:
    def test_principal_point(self):
        uv, visible = project_points(np.array([[0.0, 0.0, 2.0]]), make_frame())
        np.testing.assert_allclose(uv, [[32.0, 24.0]], atol=1e-6)
        assert visible.tolist() == [True]

    def test_off_axis(self):
        uv, visible = project_points(np.array([[1.0, -0.5, 2.0]]), make_frame())
        np.testing.assert_allclose(uv, [[57.0, 11.5]], atol=1e-6)
        assert visible.tolist() == [True]

    def test_behind_the_camera(self):
        uv, visible = project_points(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]), make_frame())
        assert np.isnan(uv).all()
        assert visible.tolist() == [False, False]

    def test_outside_the_image(self):
        _, visible = project_points(np.array([[5.0, 0.0, 2.0]]), make_frame())
        assert visible.tolist() == [False]

    def test_translated_camera(self):
        extrinsics = np.eye(4)
        extrinsics[:3, 3] = [0.0, 0.0, 1.0]
        uv, _ = project_points(np.array([[0.5, 0.0, 1.0]]), make_frame(extrinsics=extrinsics))
        np.testing.assert_allclose(uv, [[44.5, 24.0]], atol=1e-6)

    def test_rigid_motion_does_not_change_pixels(self):
        rng = np.random.default_rng(0)
        points = rng.uniform(-1, 1, size=(50, 3)) + [0, 0, 4]
        frame = make_frame()
        reference, _ = project_points(points, frame)
        for _ in range(100):
            motion = np.eye(4)
            motion[:3, :3] = random_rotation(rng)
            motion[:3, 3] = rng.uniform(-5, 5, size=3)
            moved = points @ motion[:3, :3].T + motion[:3, 3]
            moved_frame = make_frame(extrinsics=frame.extrinsics @ np.linalg.inv(motion))
            uv, _ = project_points(moved, moved_frame)
            np.testing.assert_allclose(uv, reference, atol=1e-5)

    def test_depth_occludes_only_with_the_switch(self):
        depth = np.zeros((HEIGHT, WIDTH), dtype=np.float32)
        depth[24, 32] = 1.0
        frame = make_frame(depth=depth)
        point = np.array([[0.0, 0.0, 2.0]])
        assert project_points(point, frame, use_depth_visibility=False)[1].tolist() == [True]
        assert project_points(point, frame, use_depth_visibility=True)[1].tolist() == [False]

    def test_depth_within_tolerance_is_visible(self):
        depth = np.full((HEIGHT, WIDTH), 2.05, dtype=np.float32)
        frame = make_frame(depth=depth)
        assert project_points(np.array([[0.0, 0.0, 2.0]]), frame, True)[1].tolist() == [True]

    def test_missing_depth_does_not_occlude(self):
        frame = make_frame(depth=np.zeros((HEIGHT, WIDTH), dtype=np.float32))
        assert project_points(np.array([[0.0, 0.0, 2.0]]), frame, True)[1].tolist() == [True]


class TestExtendRect:
    def test_no_extension(self):
        assert extend_rect((10, 10, 20, 10), ExtensionMode.NONE, WIDTH, HEIGHT) == (10, 10, 20, 10)

    def test_boundary_extension_grows_width_and_height(self):
        rect = extend_rect((10, 10, 20, 10), ExtensionMode.BOUNDARY_EXTENDED, WIDTH, HEIGHT)
        assert rect == pytest.approx((10, 10, 24, 12))

    def test_extension_is_clamped(self):
        rect = extend_rect((60, 40, 10, 10), ExtensionMode.BOUNDARY_EXTENDED, WIDTH, HEIGHT)
        assert rect == pytest.approx((60, 40, 4, 8))

    def test_negative_origin_is_clamped(self):
        assert extend_rect((-5, 0, 10, 10), "none", WIDTH, HEIGHT) == (0, 0, 5, 10)

    def test_extension_contains_the_tight_rect(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x, y = rng.uniform(0, 50), rng.uniform(0, 40)
            w, h = rng.uniform(0, 30), rng.uniform(0, 30)
            tight = extend_rect((x, y, w, h), ExtensionMode.NONE, WIDTH, HEIGHT)
            extended = extend_rect((x, y, w, h), ExtensionMode.BOUNDARY_EXTENDED, WIDTH, HEIGHT)
            assert extended[0] == tight[0] and extended[1] == tight[1]
            assert extended[2] >= tight[2] and extended[3] >= tight[3]


class TestBestFrameRegion:
    def _scene(self, frames):
        return make_scene(
            [cluster((0.0, 0.0, 2.0), count=30), cluster((0.0, 0.0, -3.0), seed=1)],
            categories=[0, 1],
            frames=frames,
        )

    def test_single_point_spans_one_pixel(self):
        points = np.array([[1.0, -0.5, 2.0, 0.5, 0.5, 0.5]], dtype=np.float32)
        scene = make_scene([points], frames=(make_frame(),))
        region = best_frame_region(scene.proposals[0], scene, ExtensionMode.NONE)
        assert region == Region2D(frame_id=0, rect=(57.0, 11.0, 1.0, 1.0), visible_point_count=1)

    def test_ties_go_to_the_first_listed_frame(self):
        scene = self._scene((make_frame(5), make_frame(2)))
        region = best_frame_region(scene.proposals[0], scene)
        assert region.frame_id == 5
        assert region.visible_point_count == 30

    def test_frame_with_more_visible_points_wins(self):
        turned = np.eye(4)
        turned[:3, :3] = np.diag([-1.0, 1.0, -1.0])
        scene = self._scene((make_frame(0), make_frame(1, extrinsics=turned)))
        assert best_frame_region(scene.proposals[0], scene).frame_id == 0
        assert best_frame_region(scene.proposals[1], scene).frame_id == 1

    def test_never_visible_proposal(self):
        scene = self._scene((make_frame(0),))
        assert best_frame_region(scene.proposals[1], scene) is None

    def test_scene_regions_skip_unpaired_proposals(self):
        scene = self._scene((make_frame(0),))
        regions = compute_scene_regions(scene)
        assert list(regions) == [0]
        assert regions[0] == best_frame_region(scene.proposals[0], scene)

    def test_regions_stay_inside_the_image(self, synthetic_scene):
        for mode in ExtensionMode:
            for region in compute_scene_regions(synthetic_scene, mode).values():
                frame = next(f for f in synthetic_scene.frames if f.frame_id == region.frame_id)
                x, y, w, h = region.rect
                assert x >= 0 and y >= 0 and w > 0 and h > 0
                assert x + w <= frame.width + 1e-9 and y + h <= frame.height + 1e-9

    def test_extended_regions_are_not_smaller(self, synthetic_scene):
        plain = compute_scene_regions(synthetic_scene, ExtensionMode.NONE)
        extended = compute_scene_regions(synthetic_scene, ExtensionMode.BOUNDARY_EXTENDED)
        assert list(plain) == list(extended)
        for proposal_id, region in plain.items():
            assert extended[proposal_id].frame_id == region.frame_id
            assert extended[proposal_id].rect[2] >= region.rect[2]


class TestIoU:
    def test_iou_2d(self):
        assert iou_2d((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
        assert iou_2d((0, 0, 1, 1), (2, 2, 1, 1)) == 0.0
        assert iou_2d((0, 0, 2, 1), (1, 0, 2, 1)) == pytest.approx(1 / 3)
        assert iou_2d((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0

    def test_iou_3d(self):
        unit = AxisAlignedBox3D(min=(0, 0, 0), max=(1, 1, 1))
        shifted = AxisAlignedBox3D(min=(0.5, 0, 0), max=(1.5, 1, 1))
        flat = AxisAlignedBox3D(min=(0, 0, 0), max=(1, 1, 0))
        assert iou_3d(unit, unit) == 1.0
        assert iou_3d(unit, shifted) == pytest.approx(1 / 3)
        assert iou_3d(flat, flat) == 0.0

    def test_iou_3d_is_symmetric_and_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a_min, b_min = rng.uniform(-1, 1, size=(2, 3))
            a = AxisAlignedBox3D(min=tuple(a_min), max=tuple(a_min + rng.uniform(0, 1, 3)))
            b = AxisAlignedBox3D(min=tuple(b_min), max=tuple(b_min + rng.uniform(0, 1, 3)))
            assert 0.0 <= iou_3d(a, b) <= 1.0
            assert iou_3d(a, b) == pytest.approx(iou_3d(b, a))


class TestRegionsCache:
    def test_write_and_read(self, synthetic_scene, tmp_path):
        regions = compute_scene_regions(synthetic_scene)
        path = regions_cache_path(tmp_path, synthetic_scene.scene_id, ExtensionMode.BOUNDARY_EXTENDED)
        assert path.parts[-3:] == (synthetic_scene.scene_id, "boundary_extended", "regions.json")
        key = regions_key(synthetic_scene, ExtensionMode.BOUNDARY_EXTENDED, False, "toy/d=16")
        write_regions(path, synthetic_scene.scene_id, key, regions, STAMP)
        document, loaded = read_regions(path)
        assert loaded == regions
        assert document.stamp == STAMP
        assert document.key == key

    def test_stale_key_fields(self, synthetic_scene):
        key = regions_key(synthetic_scene, ExtensionMode.BOUNDARY_EXTENDED, False, "toy/d=16")
        assert stale_key_fields(key, key) == []
        flipped = regions_key(synthetic_scene, ExtensionMode.BOUNDARY_EXTENDED, True)
        assert stale_key_fields(key, flipped) == ["use_depth_visibility", "provider"]

    def test_cache_without_key_is_malformed(self, tmp_path):
        path = tmp_path / "regions.json"
        path.write_text(
            json.dumps({"stamp": STAMP.model_dump(), "scene_id": "s", "regions": []}), encoding="utf-8"
        )
        with pytest.raises(BundleLoadError):
            read_regions(path)

    def test_malformed_cache(self, tmp_path):
        path = tmp_path / "regions.json"
        path.write_text('{"regions": 3}', encoding="utf-8")
        with pytest.raises(BundleLoadError):
            read_regions(path)
