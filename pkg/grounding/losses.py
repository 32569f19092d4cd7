import math
from typing import Optional, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel, model_validator

from grounding.adaptation import ClassificationLogits
from grounding.encoders import EmbeddingSet
from grounding.schemas import LossWeights
from grounding.utils._logger import training_logger
from grounding.utils.utils import ContractError, NonFiniteLossError

TERMS = ("l_e", "l_a", "l_cls_2d", "l_cls_3d", "l_cls_q", "l_match")
CSV_COLUMNS = ("step", "epoch", *TERMS, "total", "lr")

Embeddings = Union[EmbeddingSet, torch.Tensor]


class LossReport(BaseModel):
    """
    The loss terms and their weighted total, as plain floats. `l_match` is only non-zero when
    training against pseudo or annotated target proposals.
    """

    l_e: float = 0.0
    l_a: float = 0.0
    l_cls_2d: float = 0.0
    l_cls_3d: float = 0.0
    l_cls_q: float = 0.0
    l_match: float = 0.0
    total: float = 0.0

    @model_validator(mode="after")
    def finite(self):
        for name, value in self.model_dump().items():
            if not math.isfinite(value):
                raise ValueError(f"{name} is not finite ({value})")
        return self

    @classmethod
    def from_terms(
        cls, terms: dict[str, torch.Tensor], total: torch.Tensor
    ) -> "LossReport":
        values = {name: float(terms[name].detach()) for name in TERMS if name in terms}
        return cls(**values, total=float(total.detach()))

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        return cls(
            **{
                name: sum(getattr(report, name) for report in reports) / len(reports)
                for name in (*TERMS, "total")
            }
        )

    def csv_row(self, step: int, epoch: int, lr: float) -> dict:
        return {"step": step, "epoch": epoch, **self.model_dump(), "lr": lr}


def _vectors(embeddings: Embeddings) -> torch.Tensor:
    return embeddings.vectors if isinstance(embeddings, EmbeddingSet) else embeddings


def contrastive_loss(
    embeddings_2d: Embeddings,
    embeddings_3d: Embeddings,
    tau: float = 0.07,
    normalize: bool = True,
) -> torch.Tensor:
    """
    Symmetric cross-modal contrastive loss over the M paired rows of one scene.

    Row i of the 2D set pairs with row i of the 3D set. The loss is the mean 2D-to-3D
    cross-entropy over rows plus the mean 3D-to-2D cross-entropy over columns of the similarity
    matrix divided by tau. It is exactly 0 for a single pair.

    Args:
        embeddings_2d (EmbeddingSet | torch.Tensor): (M, d) region embeddings.
        embeddings_3d (EmbeddingSet | torch.Tensor): (M, d) proposal embeddings.
        tau (float): Temperature.
        normalize (bool): L2-normalize rows before the dot products.

    Returns:
        torch.Tensor: Scalar loss; 0 with a warning when there are no pairs.

    Raises:
        ContractError: If the two sets differ in shape.
    """
    a, b = _vectors(embeddings_2d), _vectors(embeddings_3d)
    if a.shape != b.shape:
        raise ContractError(
            f"Contrastive pairs need equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    m = a.shape[0]
    if m == 0:
        training_logger.warning("Contrastive loss over zero pairs; counted as 0.")
        return torch.zeros((), dtype=b.dtype)
    a = a.to(b.dtype)
    if normalize:
        a, b = F.normalize(a, dim=1), F.normalize(b, dim=1)
    logits = a @ b.T / tau
    targets = torch.arange(m, device=logits.device)
    return F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets)


def matching_loss(
    query_embeddings: Embeddings,
    proposal_embeddings: Embeddings,
    targets: torch.Tensor,
    tau: float = 0.07,
    normalize: bool = True,
) -> torch.Tensor:
    """
    Mean cross-entropy of every query over the proposals of its scene, against a target proposal row.

    Scores are the same query-proposal inner products inference ranks by, divided by tau. Queries
    whose target is -1 are skipped.

    Args:
        query_embeddings (EmbeddingSet | torch.Tensor): (Q, d) frozen query embeddings.
        proposal_embeddings (EmbeddingSet | torch.Tensor): (M, d) proposal embeddings.
        targets (torch.Tensor): (Q,) target proposal rows, or -1.
        tau (float): Temperature.
        normalize (bool): L2-normalize rows before the dot products.

    Returns:
        torch.Tensor: Scalar loss; 0 when no query has a target.

    Raises:
        ContractError: If the target count differs from the query count or a target is out of range.
    """
    q, p = _vectors(query_embeddings), _vectors(proposal_embeddings)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != (q.shape[0],):
        raise ContractError(f"{q.shape[0]} queries but {tuple(targets.shape)} matching targets")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    known = targets >= 0
    if not bool(known.any()):
        return torch.zeros((), dtype=p.dtype)
    if int(targets.max()) >= p.shape[0]:
        raise ContractError(f"Matching targets must be below {p.shape[0]}, got {targets.tolist()}")
    q = q[known].to(p.dtype)
    if normalize:
        q, p = F.normalize(q, dim=1), F.normalize(p, dim=1)
    return F.cross_entropy(q @ p.T / tau, targets[known])


def classification_loss(logits: ClassificationLogits, labels: torch.Tensor) -> torch.Tensor:
    """
    Mean softmax cross-entropy of logits against category labels.

    Returns:
        torch.Tensor: Scalar loss; 0 with a warning when there are no rows.

    Raises:
        ContractError: If the label count differs from the row count or a label is out of range.
    """
    values = logits.logits
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (values.shape[0],):
        raise ContractError(
            f"{logits.source} logits have {values.shape[0]} rows but {tuple(labels.shape)} labels"
        )
    if values.shape[0] == 0:
        training_logger.warning(f"Classification loss over zero {logits.source} rows; counted as 0.")
        return torch.zeros((), dtype=values.dtype)
    if int(labels.min()) < 0 or int(labels.max()) >= logits.num_classes:
        raise ContractError(
            f"{logits.source} labels must be in [0, {logits.num_classes}), got {labels.tolist()}"
        )
    return F.cross_entropy(values, labels)


def total_loss(
    terms: dict[str, torch.Tensor],
    weights: LossWeights,
    step: Optional[str] = None,
) -> torch.Tensor:
    """
    The weighted objective: lambda1 * (l_e + l_a) + lambda2 * l_cls_2d + lambda3 * l_cls_3d + lambda4 * l_cls_q
    + lambda_match * l_match.

    Missing terms count as 0.

    Args:
        terms (dict[str, torch.Tensor]): Scalar terms keyed by name.
        weights (LossWeights): The lambdas.
        step (str, optional): Identifies the step in error messages.

    Raises:
        NonFiniteLossError: Naming the first term that is NaN or infinite.
    """
    for name in TERMS:
        if name in terms and not bool(torch.isfinite(terms[name])):
            raise NonFiniteLossError(name, float(terms[name].detach()), step)

    zero = torch.zeros(())
    if terms:
        zero = zero.to(next(iter(terms.values())).dtype)

    def term(name: str) -> torch.Tensor:
        return terms.get(name, zero)

    total = (
        weights.lambda1 * (term("l_e") + term("l_a"))
        + weights.lambda2 * term("l_cls_2d")
        + weights.lambda3 * term("l_cls_3d")
        + weights.lambda4 * term("l_cls_q")
        + weights.lambda_match * term("l_match")
    )
    if not bool(torch.isfinite(total)):
        raise NonFiniteLossError("total", float(total.detach()), step)
    return total
