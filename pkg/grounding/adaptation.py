from typing import Literal

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, field_validator

from grounding.encoders import EmbeddingSet
from grounding.utils.utils import ContractError


class ClassificationLogits(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    logits: torch.Tensor
    source: Literal["query", "region2d", "proposal3d"]

    @field_validator("logits")
    @classmethod
    def matrix(cls, logits: torch.Tensor) -> torch.Tensor:
        if logits.dim() != 2:
            raise ValueError(f"logits must be a (n, K) matrix, got shape {tuple(logits.shape)}")
        return logits

    @property
    def num_classes(self) -> int:
        return int(self.logits.shape[1])


class Adapter(nn.Module):
    """
    Two fully connected layers with a ReLU in between, mixed back into its input with ratio alpha.
    """

    def __init__(self, d: int, hidden: int = 512, alpha: float = 0.5):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        self.d = d
        self.alpha = alpha
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, d))

    def forward(self, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        adapted = self.net(embeddings)
        return adapted, mix_residual(embeddings, adapted, self.alpha)


def mix_residual(
    embeddings: torch.Tensor, adapted: torch.Tensor, alpha: float
) -> torch.Tensor:
    """
    R = alpha * A + (1 - alpha) * F.
    """
    return alpha * adapted + (1.0 - alpha) * embeddings


def adapt(embeddings: EmbeddingSet, adapter: Adapter) -> tuple[EmbeddingSet, EmbeddingSet]:
    """
    Runs an adapter over an embedding set, row by row.

    Args:
        embeddings (EmbeddingSet): F, (n, d).
        adapter (Adapter): The modality's adapter.

    Returns:
        tuple[EmbeddingSet, EmbeddingSet]: The adapted set A and the residual set R.

    Raises:
        ContractError: If the embedding width differs from the adapter width.
    """
    if embeddings.d != adapter.d:
        raise ContractError(
            f"Cannot adapt {embeddings.modality.value} embeddings of width {embeddings.d} with an adapter of width {adapter.d}"
        )
    vectors = embeddings.vectors.to(next(adapter.parameters()).dtype)
    adapted, residual = adapter(vectors)
    return (
        EmbeddingSet(modality=embeddings.modality, vectors=adapted),
        EmbeddingSet(modality=embeddings.modality, vectors=residual),
    )


def classify_against_categories(
    residual: EmbeddingSet,
    category_residual: EmbeddingSet,
    source: Literal["region2d", "proposal3d"],
) -> ClassificationLogits:
    """
    Task-aware classification: logits = R · R_Cᵀ, one row per embedding and one column per category.

    Raises:
        ContractError: If the widths differ.
    """
    if residual.d != category_residual.d:
        raise ContractError(
            f"Cannot classify width {residual.d} embeddings against width {category_residual.d} categories"
        )
    category_vectors = category_residual.vectors.to(residual.vectors.dtype)
    return ClassificationLogits(logits=residual.vectors @ category_vectors.T, source=source)


class QueryClassifier(nn.Linear):
    """
    The text classifier predicting a query's category distribution from its residual embedding.
    """

    def __init__(self, d: int, num_categories: int):
        super().__init__(d, num_categories)


def classify_query(query_residual: EmbeddingSet, classifier: QueryClassifier) -> ClassificationLogits:
    if query_residual.d != classifier.in_features:
        raise ContractError(
            f"Query embeddings of width {query_residual.d} do not fit a classifier of width {classifier.in_features}"
        )
    vectors = query_residual.vectors.to(classifier.weight.dtype)
    return ClassificationLogits(logits=classifier(vectors), source="query")
