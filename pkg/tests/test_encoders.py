import sys

import numpy as np
import pytest
import torch
from PIL import Image

from grounding.encoders import (
    EmbeddingSet,
    ProposalEncoder,
    SetAbstractionBackbone,
    ToyVLM,
    build_vlm,
    encode_proposals,
    farthest_point_sample,
    query_ball_point,
    read_embedding_cache,
    sample_proposal_points,
    write_embedding_cache,
)
from grounding.losses import total_loss
from grounding.model import GroundingModel
from grounding.projection import compute_scene_regions
from grounding.scene import CategoryVocabulary
from grounding.schemas import EncoderConfig, LossWeights, Modality, ModelConfig, TrainConfig
from grounding.training import prepare_scene, scene_loss_terms
from grounding.utils.utils import (
    BackendUnavailableError,
    BundleLoadError,
    ContractError,
    parameter_checksum,
)


@pytest.fixture(scope="module")
def toy_vlm(synthetic_scene):
    return ToyVLM(synthetic_scene.categories, d=16)


class TestToyVLM:
    def test_label_maps_near_its_basis_vector(self, toy_vlm, synthetic_scene):
        embeddings = toy_vlm.encode_text(synthetic_scene.categories.labels, Modality.TEXT_CATEGORY)
        assert embeddings.modality is Modality.TEXT_CATEGORY
        assert embeddings.vectors.shape == (8, 16)
        assert embeddings.vectors.argmax(dim=1).tolist() == list(range(8))

    def test_first_mention_dominates(self, toy_vlm):
        vector = toy_vlm.encode_text(["the table near the chair"]).vectors[0]
        table, chair = toy_vlm.labels.index("table"), toy_vlm.labels.index("chair")
        assert vector[table] > vector[chair] > 0.1

    def test_deterministic(self, toy_vlm, synthetic_scene):
        again = ToyVLM(synthetic_scene.categories, d=16)
        texts = ["the chair", "a thing", "the lamp beside the sofa"]
        torch.testing.assert_close(
            toy_vlm.encode_text(texts).vectors, again.encode_text(texts).vectors
        )

    def test_empty_text_list(self, toy_vlm):
        assert toy_vlm.encode_text([]).vectors.shape == (0, 16)

    def test_frozen(self, toy_vlm):
        toy_vlm.train()
        assert not toy_vlm.training
        assert all(not p.requires_grad for p in toy_vlm.parameters())

    def test_more_categories_than_dimensions(self, synthetic_scene):
        vlm = ToyVLM(synthetic_scene.categories, d=4)
        vectors = vlm.encode_text(["chair", "table"]).vectors
        assert vectors.shape == (2, 4)
        assert torch.isfinite(vectors).all()

    def test_regions_read_their_category(self, toy_vlm, synthetic_scene):
        regions = compute_scene_regions(synthetic_scene)
        proposal_ids = list(regions)
        encoding = toy_vlm.encode_image_regions(
            {frame.frame_id: frame for frame in synthetic_scene.frames},
            [regions[i] for i in proposal_ids],
        )
        assert encoding.errors == {}
        predicted = encoding.embeddings.vectors.argmax(dim=1).tolist()
        expected = [synthetic_scene.proposal(proposal_ids[i]).category_id for i in encoding.indices]
        hits = sum(p == e for p, e in zip(predicted, expected))
        assert hits >= len(expected) / 2

    def test_unknown_frame_is_reported(self, toy_vlm, synthetic_scene):
        region = next(iter(compute_scene_regions(synthetic_scene).values()))
        encoding = toy_vlm.encode_image_regions({}, [region])
        assert encoding.indices == []
        assert 0 in encoding.errors
        assert encoding.embeddings.vectors.shape == (0, 16)

    def test_custom_palette(self):
        vocabulary = CategoryVocabulary(labels=("chair", "table", "lamp"))
        vlm = ToyVLM(vocabulary, d=8, category_colors=[(1, 1, 0), (0, 1, 1), (1, 0, 1)])
        crop = Image.new("RGB", (8, 8), (0, 255, 255))
        assert vlm.dominant_category(crop) == 1

    def test_ignored_colors_count_for_nothing(self):
        vocabulary = CategoryVocabulary(labels=("chair", "table", "lamp"))
        vlm = ToyVLM(vocabulary, d=8, category_colors=[(1, 1, 0), (0, 1, 1), (1, 0, 1)])
        assert vlm.dominant_category(Image.new("RGB", (8, 8), (0, 0, 0))) is None

    def test_palette_must_cover_the_vocabulary(self):
        vocabulary = CategoryVocabulary(labels=("chair", "table", "lamp"))
        with pytest.raises(ContractError, match="2 category colors for 3"):
            ToyVLM(vocabulary, d=8, category_colors=[(1, 1, 0), (0, 1, 1)])

    def test_identity(self, synthetic_scene):
        vocabulary = synthetic_scene.categories
        identity = ToyVLM(vocabulary, d=16).identity
        assert ToyVLM(vocabulary, d=16).identity == identity
        assert ToyVLM(vocabulary, d=16, seed=1).identity != identity
        assert ToyVLM(vocabulary, d=32).identity != identity
        palette = [(0.1 * (c % 10), 0.2, 0.3) for c in range(len(vocabulary))]
        assert ToyVLM(vocabulary, d=16, category_colors=palette).identity != identity


class TestBuildVLM:
    def test_toy_backend(self, synthetic_scene):
        assert isinstance(build_vlm(EncoderConfig(d=16), synthetic_scene.categories), ToyVLM)

    def test_missing_package_is_not_silently_replaced(self, synthetic_scene, monkeypatch):
        monkeypatch.setitem(sys.modules, "open_clip", None)
        with pytest.raises(BackendUnavailableError):
            build_vlm(EncoderConfig(backend="vlm", d=512), synthetic_scene.categories)


class TestEmbeddingCache:
    def test_round_trip(self, tmp_path):
        embeddings = EmbeddingSet(modality=Modality.IMAGE_REGION, vectors=torch.randn(5, 7))
        write_embedding_cache(tmp_path / "f2d.emb", embeddings)
        loaded = read_embedding_cache(tmp_path / "f2d.emb")
        assert loaded.modality is Modality.IMAGE_REGION
        torch.testing.assert_close(loaded.vectors, embeddings.vectors)
        assert (tmp_path / "f2d.emb").stat().st_size == 6 + 2 + 1 + 8 + 8 + 5 * 7 * 4

    def test_foreign_file(self, tmp_path):
        (tmp_path / "x.emb").write_bytes(b"NOTEMB" + bytes(30))
        with pytest.raises(BundleLoadError):
            read_embedding_cache(tmp_path / "x.emb")

    def test_non_finite_embeddings_are_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingSet(modality=Modality.TEXT_QUERY, vectors=torch.tensor([[float("nan")]]))


class TestSampling:
    def test_shape_and_normalization(self, synthetic_scene):
        proposal = synthetic_scene.proposals[0]
        sample = sample_proposal_points(synthetic_scene, proposal, 64, seed=0)
        assert sample.shape == (64, 6)
        assert sample.dtype == np.float32
        assert np.abs(sample[:, :3]).max() <= 0.5 + 1e-6

    def test_seeded(self, synthetic_scene):
        proposal = synthetic_scene.proposals[0]
        a = sample_proposal_points(synthetic_scene, proposal, 64, seed=0, epoch=1)
        b = sample_proposal_points(synthetic_scene, proposal, 64, seed=0, epoch=1)
        c = sample_proposal_points(synthetic_scene, proposal, 64, seed=0, epoch=2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_small_proposals_are_sampled_with_replacement(self, synthetic_scene):
        proposal = synthetic_scene.proposals[0]
        count = len(proposal.point_indices) + 10
        assert sample_proposal_points(synthetic_scene, proposal, count, seed=0).shape == (count, 6)

    def test_farthest_point_sample(self):
        xyz = torch.tensor([[[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [0.5, 0, 0]]])
        assert farthest_point_sample(xyz, 3).tolist() == [[0, 2, 3]]

    def test_ball_query_pads_with_the_first_hit(self):
        xyz = torch.tensor([[[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0]]])
        idx = query_ball_point(0.2, 3, xyz, xyz[:, :1])
        assert idx.tolist() == [[[0, 1, 0]]]


class TestProposalEncoder:
    def test_output_shape(self):
        encoder = ProposalEncoder(
            EncoderConfig(d=16, point_sample_count=64, transformer_layers=1, transformer_heads=2)
        )
        assert isinstance(encoder.backbone, SetAbstractionBackbone)
        assert encoder(torch.randn(3, 64, 6)).shape == (3, 16)

    def test_equivariant_to_proposal_order(self):
        torch.manual_seed(0)
        encoder = ProposalEncoder(
            EncoderConfig(
                d=16, point_sample_count=32, point_backbone="mlp", transformer_layers=2, transformer_heads=4
            )
        ).eval()
        points = torch.randn(5, 32, 6)
        order = torch.tensor([3, 0, 4, 1, 2])
        with torch.no_grad():
            torch.testing.assert_close(encoder(points)[order], encoder(points[order]), atol=1e-5, rtol=1e-5)

    def test_encode_proposals(self, synthetic_scene):
        encoder = ProposalEncoder(EncoderConfig(d=16, point_sample_count=32, point_backbone="mlp", transformer_heads=2))
        embeddings = encode_proposals(synthetic_scene, synthetic_scene.proposals, encoder)
        assert embeddings.modality is Modality.POINT_PROPOSAL
        assert embeddings.vectors.shape == (4, 16)
        assert embeddings.vectors.requires_grad
        assert encode_proposals(synthetic_scene, (), encoder).vectors.shape == (0, 16)


class TestGradients:
    def test_total_loss_matches_central_differences(self, synthetic_scene, tmp_path):
        encoder_config = EncoderConfig(
            d=8, point_sample_count=16, point_backbone="mlp", transformer_layers=1, transformer_heads=2
        )
        vlm = ToyVLM(synthetic_scene.categories, d=8)
        checksum = parameter_checksum(vlm)
        prepared = prepare_scene(synthetic_scene, vlm, TrainConfig(), cache_dir=tmp_path)
        torch.manual_seed(0)
        model = GroundingModel(encoder_config, ModelConfig(adapter_hidden=8), synthetic_scene.categories)
        model = model.double().train()
        weights = LossWeights()

        def loss() -> torch.Tensor:
            return total_loss(scene_loss_terms(model, prepared, weights), weights)

        model.zero_grad()
        loss().backward()

        rng = np.random.default_rng(0)
        eps = 1e-6
        checked = passed = 0
        with torch.no_grad():
            for parameter in model.parameters():
                if parameter.grad is None:
                    continue
                flat, grad = parameter.view(-1), parameter.grad.view(-1)
                for index in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                    original = flat[index].item()
                    flat[index] = original + eps
                    plus = loss().item()
                    flat[index] = original - eps
                    minus = loss().item()
                    flat[index] = original
                    numeric = (plus - minus) / (2 * eps)
                    analytic = grad[index].item()
                    error = abs(numeric - analytic)
                    checked += 1
                    passed += error <= 1e-4 * max(abs(numeric), abs(analytic)) or error < 1e-7
        assert checked > 40
        assert passed / checked >= 0.95
        assert parameter_checksum(vlm) == checksum
