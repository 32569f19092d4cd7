import math

import numpy as np
import pytest
import torch

from grounding.encoders import ToyVLM
from grounding.inference import (
    SceneGrounder,
    filter_and_rank,
    ground,
    ground_all,
    read_predictions,
    top_k_categories,
    write_predictions,
)
from grounding.model import GroundingModel
from grounding.schemas import EncoderConfig, ModelConfig, Record
from grounding.utils.utils import EmptySceneError

STAMP = Record.Stamp(config_hash="0123456789abcdef", seed=7, code_version="r1")


def _reference(categories, logits, scores, k):
    """Straight-line filter and rank: sorted lists, no numpy tricks."""
    topk = sorted(range(len(logits)), key=lambda c: (-logits[c], c))[:k]
    candidate = [c in topk for c in categories]
    mask = candidate if any(candidate) else [True] * len(categories)
    reserved = sorted((i for i in range(len(categories)) if mask[i]), key=lambda i: (-scores[i], i))
    dropped = sorted((i for i in range(len(categories)) if not mask[i]), key=lambda i: (-scores[i], i))
    return topk, candidate, mask, reserved + dropped


@pytest.fixture(scope="module")
def model(synthetic_scenes):
    torch.manual_seed(0)
    encoder = EncoderConfig(d=16, point_sample_count=32, point_backbone="mlp", transformer_layers=1, transformer_heads=2)
    return GroundingModel(encoder, ModelConfig(adapter_hidden=16), synthetic_scenes[0].categories).eval()


@pytest.fixture(scope="module")
def vlm(synthetic_scenes):
    return ToyVLM(synthetic_scenes[0].categories, d=16)


class TestFilterAndRank:
    def test_keeps_top_category_proposals(self):
        result = filter_and_rank([0, 1, 2, 1], [0.1, 2.0, 0.5], [0.9, 0.2, 0.8, 0.7], k=1)
        assert result.topk_categories == [1]
        assert result.mask == [False, True, False, True]
        assert result.ranked == [3, 1, 0, 2]
        assert not result.fallback
        assert result.scores[0] == -math.inf and result.scores[3] == 0.7

    def test_falls_back_to_all_proposals(self):
        result = filter_and_rank([0, 0], [0.0, 0.0, 5.0], [0.1, 0.3], k=1)
        assert result.fallback
        assert result.mask == [True, True]
        assert result.candidate_mask == [False, False]
        assert result.ranked == [1, 0]

    def test_filter_switched_off(self):
        result = filter_and_rank([0, 1], [5.0, 0.0], [0.1, 0.3], k=1, use_filter=False)
        assert result.mask == [True, True]
        assert result.candidate_mask == [True, False]
        assert result.ranked == [1, 0]
        assert not result.fallback

    def test_score_ties_go_to_the_lower_index(self):
        assert filter_and_rank([0, 0, 0], [1.0], [0.5, 0.5, 0.5], k=1).ranked == [0, 1, 2]

    def test_logit_ties_go_to_the_lower_category(self):
        assert top_k_categories(np.array([1.0, 3.0, 3.0, 2.0]), 2) == [1, 2]

    def test_k_larger_than_the_vocabulary(self):
        assert filter_and_rank([0, 1], [0.0, 1.0], [0.2, 0.1], k=5).topk_categories == [1, 0]

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            filter_and_rank([0], [1.0], [1.0], k=0)

    def test_no_proposals(self):
        with pytest.raises(EmptySceneError):
            filter_and_rank([], [1.0, 2.0], [], k=1)

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m, num_classes = int(rng.integers(1, 9)), int(rng.integers(1, 6))
            k = int(rng.integers(1, 5))
            categories = rng.integers(0, num_classes, size=m).tolist()
            # Small integer ranges force ties
            logits = rng.integers(0, 3, size=num_classes).astype(float).tolist()
            scores = rng.integers(0, 4, size=m).astype(float).tolist()
            topk, candidate, mask, ranked = _reference(categories, logits, scores, k)
            result = filter_and_rank(categories, logits, scores, k)
            assert result.topk_categories == topk
            assert result.candidate_mask == candidate
            assert result.mask == mask
            assert result.ranked == ranked

    def test_positive_rescaling_changes_nothing(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            categories = rng.integers(0, 4, size=6)
            logits, scores = rng.normal(size=4), rng.normal(size=6)
            scale = rng.uniform(0.1, 10.0)
            a = filter_and_rank(categories, logits, scores, k=2)
            b = filter_and_rank(categories, logits * scale, scores * scale, k=2)
            assert a.ranked == b.ranked and a.mask == b.mask

    def test_candidates_grow_with_k(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            categories = rng.integers(0, 5, size=8)
            logits, scores = rng.normal(size=5), rng.normal(size=8)
            previous = np.zeros(8, dtype=bool)
            for k in range(1, 5):
                candidate = np.array(filter_and_rank(categories, logits, scores, k).candidate_mask)
                assert not (previous & ~candidate).any()
                previous = candidate


class TestSceneGrounder:
    def test_prediction_fields(self, model, vlm, synthetic_scenes):
        scene = synthetic_scenes[0]
        prediction = SceneGrounder(model, vlm).ground(scene.queries[0], scene, k=3)
        ids = [p.proposal_id for p in scene.proposals]
        assert sorted(prediction.ranked_proposal_ids) == sorted(ids)
        assert prediction.predicted_proposal_id == prediction.ranked_proposal_ids[0]
        assert len(prediction.mask) == len(prediction.scores) == len(ids)
        assert len(prediction.topk_categories) == 3
        assert prediction.box_min == scene.proposal(prediction.predicted_proposal_id).box3d.min

    def test_single_query_helper_agrees(self, model, vlm, synthetic_scenes):
        scene = synthetic_scenes[1]
        query = scene.queries[0]
        assert ground(query, scene, model, vlm, k=2) == SceneGrounder(model, vlm).ground(query, scene, 2)

    def test_candidate_masks_nest_on_real_queries(self, model, vlm, synthetic_scenes):
        grounder = SceneGrounder(model, vlm)
        for scene in synthetic_scenes:
            for query in scene.queries:
                masks = [np.array(grounder.ground(query, scene, k).candidate_mask) for k in range(1, 5)]
                for smaller, larger in zip(masks, masks[1:]):
                    assert not (smaller & ~larger).any()

    def test_frames_are_not_needed(self, model, vlm, synthetic_scenes):
        scene = synthetic_scenes[0]
        blind = scene.model_copy(update={"frames": ()})
        grounder = SceneGrounder(model, vlm)
        assert grounder.ground(scene.queries[0], blind, 3) == SceneGrounder(model, vlm).ground(
            scene.queries[0], scene, 3
        )

    def test_random_strategy_is_seeded(self, model, vlm, synthetic_scenes):
        scene = synthetic_scenes[0]
        query = scene.queries[0]
        a = SceneGrounder(model, vlm, strategy="random", seed=3).ground(query, scene)
        b = SceneGrounder(model, vlm, strategy="random", seed=3).ground(query, scene)
        assert a.ranked_proposal_ids == b.ranked_proposal_ids
        assert all(a.mask)
        assert sorted(a.ranked_proposal_ids) == sorted(p.proposal_id for p in scene.proposals)


class TestGroundAll:
    def test_every_query_is_answered(self, model, vlm, synthetic_scenes):
        document = ground_all(synthetic_scenes, model, vlm, STAMP, k=3)
        assert len(document.predictions) == sum(len(s.queries) for s in synthetic_scenes)
        assert document.failures == []
        assert document.stamp == STAMP

    def test_deterministic(self, model, vlm, synthetic_scenes):
        assert ground_all(synthetic_scenes, model, vlm, STAMP) == ground_all(
            synthetic_scenes, model, vlm, STAMP
        )

    def test_scene_without_proposals_is_recorded(self, model, vlm, synthetic_scenes):
        empty = synthetic_scenes[0].model_copy(update={"proposals": ()})
        document = ground_all([empty, synthetic_scenes[1]], model, vlm, STAMP)
        assert len(document.failures) == len(empty.queries)
        assert {f.scene_id for f in document.failures} == {empty.scene_id}
        assert len(document.predictions) == len(synthetic_scenes[1].queries)

    def test_written_file_reads_back(self, model, vlm, synthetic_scenes, tmp_path):
        path = tmp_path / "predictions.json"
        document = ground_all(synthetic_scenes, model, vlm, STAMP, k=1, out_path=path)
        assert read_predictions(path) == document

    def test_filtered_scores_survive_the_file(self, model, vlm, synthetic_scenes, tmp_path):
        document = ground_all(synthetic_scenes[:1], model, vlm, STAMP, k=1)
        prediction = document.predictions[0].model_copy(
            update={"scores": [-math.inf] + document.predictions[0].scores[1:]}
        )
        document = document.model_copy(update={"predictions": [prediction]})
        write_predictions(tmp_path / "p.json", document)
        assert read_predictions(tmp_path / "p.json").predictions[0].scores[0] == -math.inf
