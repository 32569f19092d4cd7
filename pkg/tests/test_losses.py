import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from grounding.adaptation import ClassificationLogits
from grounding.encoders import EmbeddingSet
from grounding.losses import (
    CSV_COLUMNS,
    LossReport,
    classification_loss,
    contrastive_loss,
    matching_loss,
    total_loss,
)
from grounding.schemas import LossWeights, Modality
from grounding.utils.utils import ContractError, NonFiniteLossError


def _scalar_contrastive(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    """Row-by-row evaluation with plain floats, normalized rows."""
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    m = len(a)
    sim = [[float(np.dot(a[i], b[j])) / tau for j in range(m)] for i in range(m)]
    rows = cols = 0.0
    for i in range(m):
        rows -= math.log(math.exp(sim[i][i]) / sum(math.exp(sim[i][j]) for j in range(m)))
        cols -= math.log(math.exp(sim[i][i]) / sum(math.exp(sim[j][i]) for j in range(m)))
    return rows / m + cols / m


class TestContrastiveLoss:
    def test_matches_scalar_evaluation(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m, d = int(rng.integers(1, 7)), int(rng.integers(1, 9))
            tau = float(rng.choice([0.07, 0.5, 1.0]))
            a, b = rng.normal(size=(m, d)), rng.normal(size=(m, d))
            value = contrastive_loss(torch.from_numpy(a), torch.from_numpy(b), tau)
            assert float(value) == pytest.approx(_scalar_contrastive(a, b, tau), abs=1e-6)

    def test_single_pair_is_zero(self):
        value = contrastive_loss(torch.randn(1, 4), torch.randn(1, 4), 0.07)
        assert float(value) == 0.0

    def test_matched_unit_rows(self):
        eye = torch.eye(2)
        assert float(contrastive_loss(eye, eye, tau=1.0)) == pytest.approx(0.6266, abs=1e-4)

    def test_mismatched_unit_rows(self):
        eye = torch.eye(2)
        swapped = eye[[1, 0]]
        assert float(contrastive_loss(eye, swapped, tau=1.0)) == pytest.approx(2.6266, abs=1e-4)

    def test_accepts_embedding_sets(self):
        a = EmbeddingSet(modality=Modality.IMAGE_REGION, vectors=torch.eye(2))
        b = EmbeddingSet(modality=Modality.POINT_PROPOSAL, vectors=torch.eye(2))
        assert float(contrastive_loss(a, b, tau=1.0)) == pytest.approx(0.6266, abs=1e-4)

    def test_without_normalization_scale_matters(self):
        a = torch.eye(2)
        normalized = contrastive_loss(a, 3 * a, tau=1.0, normalize=True)
        raw = contrastive_loss(a, 3 * a, tau=1.0, normalize=False)
        assert float(raw) < float(normalized)

    def test_empty_batch(self):
        assert float(contrastive_loss(torch.zeros(0, 4), torch.zeros(0, 4))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            contrastive_loss(torch.randn(3, 4), torch.randn(2, 4))

    def test_joint_row_permutation_changes_nothing(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            m = int(rng.integers(2, 7))
            a, b = torch.from_numpy(rng.normal(size=(m, 5))), torch.from_numpy(rng.normal(size=(m, 5)))
            order = torch.from_numpy(rng.permutation(m))
            assert float(contrastive_loss(a[order], b[order])) == pytest.approx(float(contrastive_loss(a, b)))

    def test_matched_pairs_beat_any_derangement(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            m = int(rng.integers(2, 7))
            eye = torch.eye(m, dtype=torch.float64)
            order = rng.permutation(m)
            while (order == np.arange(m)).any():
                order = rng.permutation(m)
            assert float(contrastive_loss(eye, eye)) <= float(contrastive_loss(eye, eye[order]))

    def test_gradient_flows_to_both_sides(self):
        a = torch.randn(3, 4, requires_grad=True)
        b = torch.randn(3, 4, requires_grad=True)
        contrastive_loss(a, b).backward()
        assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


class TestClassificationLoss:
    def test_uniform_logits(self):
        logits = ClassificationLogits(logits=torch.zeros(3, 4), source="proposal3d")
        value = classification_loss(logits, torch.tensor([0, 1, 3]))
        assert float(value) == pytest.approx(math.log(4))

    def test_confident_correct_logits(self):
        logits = ClassificationLogits(logits=torch.tensor([[20.0, 0.0], [0.0, 20.0]]), source="query")
        assert float(classification_loss(logits, torch.tensor([0, 1]))) < 1e-6

    def test_empty(self):
        logits = ClassificationLogits(logits=torch.zeros(0, 4), source="region2d")
        assert float(classification_loss(logits, torch.zeros(0, dtype=torch.long))) == 0.0

    def test_label_out_of_range(self):
        logits = ClassificationLogits(logits=torch.zeros(2, 3), source="region2d")
        with pytest.raises(ContractError):
            classification_loss(logits, torch.tensor([0, 3]))

    def test_label_count_mismatch(self):
        logits = ClassificationLogits(logits=torch.zeros(2, 3), source="region2d")
        with pytest.raises(ContractError):
            classification_loss(logits, torch.tensor([0]))


class TestMatchingLoss:
    def test_hand_case(self):
        eye = torch.eye(2)
        value = matching_loss(eye, eye, torch.tensor([0, 1]), tau=1.0)
        assert float(value) == pytest.approx(math.log(1 + math.exp(-1)))

    def test_queries_without_target_are_skipped(self):
        eye = torch.eye(2)
        both = matching_loss(eye, eye, torch.tensor([0, 1]), tau=1.0)
        one = matching_loss(eye, eye, torch.tensor([-1, 1]), tau=1.0)
        assert float(one) == pytest.approx(float(both))

    def test_no_targets(self):
        assert float(matching_loss(torch.eye(2), torch.eye(3), torch.tensor([-1, -1]))) == 0.0

    def test_wrong_target_is_worse(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            m = int(rng.integers(2, 6))
            proposals = torch.eye(m, dtype=torch.float64)
            query = proposals[:1]
            right = matching_loss(query, proposals, torch.tensor([0]))
            wrong = matching_loss(query, proposals, torch.tensor([int(rng.integers(1, m))]))
            assert float(right) < float(wrong)

    def test_target_count_mismatch(self):
        with pytest.raises(ContractError):
            matching_loss(torch.eye(2), torch.eye(2), torch.tensor([0]))

    def test_target_out_of_range(self):
        with pytest.raises(ContractError):
            matching_loss(torch.eye(2), torch.eye(2), torch.tensor([0, 2]))

    def test_gradient_reaches_the_proposals(self):
        proposals = torch.randn(4, 3, requires_grad=True)
        matching_loss(torch.randn(2, 3), proposals, torch.tensor([1, 3])).backward()
        assert proposals.grad.abs().sum() > 0


class TestTotalLoss:
    def _terms(self, **values):
        return {name: torch.tensor(value, dtype=torch.float64) for name, value in values.items()}

    def test_weighted_sum(self):
        terms = self._terms(l_e=1.0, l_a=2.0, l_cls_2d=3.0, l_cls_3d=4.0, l_cls_q=5.0)
        weights = LossWeights(lambda1=0.5, lambda2=2.0, lambda3=0.0, lambda4=1.0)
        assert float(total_loss(terms, weights)) == pytest.approx(0.5 * 3 + 2 * 3 + 5)

    def test_matching_term_has_its_own_weight(self):
        terms = self._terms(l_e=1.0, l_match=2.0)
        assert float(total_loss(terms, LossWeights(lambda1=0.0, lambda_match=0.5))) == pytest.approx(1.0)

    def test_missing_terms_count_as_zero(self):
        assert float(total_loss(self._terms(l_cls_q=2.0), LossWeights())) == pytest.approx(2.0)

    def test_non_finite_term_is_named(self):
        terms = self._terms(l_e=1.0, l_cls_3d=float("nan"))
        with pytest.raises(NonFiniteLossError) as error:
            total_loss(terms, LossWeights(), step="epoch 2 step 7")
        assert error.value.term == "l_cls_3d"
        assert "epoch 2 step 7" in str(error.value)


class TestLossReport:
    def test_csv_row_has_every_column(self):
        row = LossReport(l_e=1.0, total=1.0).csv_row(step=3, epoch=1, lr=0.0005)
        assert list(row) == list(CSV_COLUMNS)

    def test_mean(self):
        mean = LossReport.mean([LossReport(l_e=1.0, total=1.0), LossReport(l_e=3.0, total=5.0)])
        assert mean.l_e == 2.0 and mean.total == 3.0

    def test_non_finite_values_are_rejected(self):
        with pytest.raises(ValidationError):
            LossReport(total=float("inf"))
