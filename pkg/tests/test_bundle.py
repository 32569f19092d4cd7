import struct

import numpy as np
import pytest

from grounding.bundle import (
    FRAMES_DIR,
    POINTS_FILE,
    PROPOSALS_FILE,
    discover_bundles,
    load_scene_bundle,
    write_scene_bundle,
)
from grounding.utils.utils import BundleLoadError, SceneValidationError
from tests.factories import cluster, make_scene


class TestSceneBundle:
    def test_written_bundle_loads_back_equal(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        loaded = load_scene_bundle(path, mode="training")
        assert loaded == synthetic_scene
        assert loaded.queries[0].target_proposal_id == synthetic_scene.queries[0].target_proposal_id

    def test_directory_name_is_the_scene_id(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / "renamed")
        assert load_scene_bundle(path).scene_id == "renamed"

    def test_points_file_layout(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        data = (path / POINTS_FILE).read_bytes()
        (n,) = struct.unpack_from("<Q", data)
        assert n == synthetic_scene.num_points
        assert len(data) == 8 + n * 24

    def test_depth_file_layout(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        data = (path / FRAMES_DIR / "0.depth.bin").read_bytes()
        height, width = struct.unpack_from("<QQ", data)
        assert (height, width) == synthetic_scene.frames[0].depth.shape
        depth = np.frombuffer(data, dtype="<f4", offset=16).reshape(height, width)
        np.testing.assert_array_equal(depth, synthetic_scene.frames[0].depth)

    def test_missing_file_is_named(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        (path / PROPOSALS_FILE).unlink()
        with pytest.raises(BundleLoadError, match=PROPOSALS_FILE):
            load_scene_bundle(path)

    def test_truncated_points_file(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        data = (path / POINTS_FILE).read_bytes()
        (path / POINTS_FILE).write_bytes(data[:-4])
        with pytest.raises(BundleLoadError, match=POINTS_FILE):
            load_scene_bundle(path)

    def test_malformed_proposal_record(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        (path / PROPOSALS_FILE).write_text('[{"id": 0}]', encoding="utf-8")
        with pytest.raises(BundleLoadError, match=PROPOSALS_FILE):
            load_scene_bundle(path)

    def test_frame_without_numeric_id(self, synthetic_scene, tmp_path):
        path = write_scene_bundle(synthetic_scene, tmp_path / synthetic_scene.scene_id)
        frames = path / FRAMES_DIR
        (frames / "0.cam.json").rename(frames / "front.cam.json")
        with pytest.raises(BundleLoadError, match="front.cam.json"):
            load_scene_bundle(path)

    def test_training_needs_frames(self, tmp_path):
        scene = make_scene([cluster((0, 0, 2))], categories=[0])
        path = write_scene_bundle(scene, tmp_path / scene.scene_id)
        assert load_scene_bundle(path, mode="inference").num_frames == 0
        with pytest.raises(SceneValidationError, match="at least one frame"):
            load_scene_bundle(path, mode="training")

    def test_broken_invariant_is_a_validation_error(self, tmp_path):
        scene = make_scene([cluster((0, 0, 2))], categories=[0])
        path = write_scene_bundle(scene, tmp_path / scene.scene_id)
        (path / "categories.json").write_text('["chair", "chair"]', encoding="utf-8")
        with pytest.raises(SceneValidationError):
            load_scene_bundle(path)

    def test_discover_bundles_is_sorted(self, tmp_path):
        for scene_id in ("b", "a", "c"):
            scene = make_scene([cluster((0, 0, 2))], scene_id=scene_id)
            write_scene_bundle(scene, tmp_path / scene_id)
        (tmp_path / "not_a_bundle").mkdir()
        assert [p.name for p in discover_bundles(tmp_path)] == ["a", "b", "c"]

    def test_discover_missing_directory(self, tmp_path):
        with pytest.raises(BundleLoadError):
            discover_bundles(tmp_path / "nowhere")
