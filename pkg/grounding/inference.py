from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, ValidationError
from tqdm import tqdm

from decorators import timeit
from grounding.adaptation import classify_against_categories, classify_query
from grounding.encoders import EmbeddingSet, FrozenVLM, encode_proposals
from grounding.model import GroundingModel
from grounding.schemas import Modality, Record
from grounding.scene import GroundingQuery, Scene
from grounding.utils._logger import inference_logger
from grounding.utils.utils import (
    BundleLoadError,
    EmptySceneError,
    read_json,
    stable_seed,
    write_json,
)


class FilterResult(BaseModel):
    """
    The outcome of category-oriented filtering for one query.

    `candidate_mask` is the mask before the all-keep fallback; `mask` is the one used for ranking.
    `ranked` lists proposal row indices, reserved rows first.
    """

    mask: list[bool]
    candidate_mask: list[bool]
    topk_categories: list[int]
    fallback: bool
    ranked: list[int]
    scores: list[float]


class GroundingPrediction(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    query_id: str
    scene_id: str
    mask: list[bool]
    candidate_mask: list[bool]
    scores: list[float]
    predicted_proposal_id: int
    topk_categories: list[int]
    ranked_proposal_ids: list[int]
    fallback: bool
    box_min: tuple[float, float, float]
    box_max: tuple[float, float, float]


class PredictionFailure(BaseModel):
    query_id: str
    scene_id: str
    error: str


class PredictionsFile(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    stamp: Record.Stamp
    k: int
    strategy: Literal["ranked", "random"]
    predictions: list[GroundingPrediction]
    failures: list[PredictionFailure] = []


def top_k_categories(query_logits: np.ndarray, k: int) -> list[int]:
    """
    The k categories with the highest logits, best first; ties go to the lower category id.
    """
    order = np.argsort(-np.asarray(query_logits, dtype=np.float64), kind="stable")
    return [int(c) for c in order[: max(1, k)]]


def _ranked(indices: np.ndarray, scores: np.ndarray) -> list[int]:
    order = np.argsort(-scores[indices], kind="stable")
    return [int(i) for i in indices[order]]


def filter_and_rank(
    proposal_categories: Sequence[int],
    query_logits: Sequence[float],
    scores: Sequence[float],
    k: int,
    use_filter: bool = True,
) -> FilterResult:
    """
    Keeps the proposals whose predicted category is among the query's top-k categories and ranks them.

    If no proposal matches, every proposal is kept. Reserved proposals are ranked by score, ties to
    the lowest index, followed by the filtered ones ranked the same way. Filtered rows report a score
    of -inf.

    Args:
        proposal_categories (Sequence[int]): Predicted category per proposal (M).
        query_logits (Sequence[float]): Query category logits (K).
        scores (Sequence[float]): Proposal-query similarity per proposal (M).
        k (int): Number of query categories to keep, >= 1.
        use_filter (bool): With False every proposal is reserved.

    Returns:
        FilterResult: The masks, top-k categories, fallback flag and ranking.

    Raises:
        EmptySceneError: If there are no proposals.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    categories = np.asarray(proposal_categories, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if categories.size == 0:
        raise EmptySceneError("There are no proposals to ground the query to.")

    topk = top_k_categories(query_logits, k)
    candidate = np.isin(categories, topk)
    if not use_filter:
        mask, fallback = np.ones_like(candidate), False
    elif not candidate.any():
        mask, fallback = np.ones_like(candidate), True
    else:
        mask, fallback = candidate, False

    ranked = _ranked(np.flatnonzero(mask), scores) + _ranked(np.flatnonzero(~mask), scores)
    return FilterResult(
        mask=mask.tolist(),
        candidate_mask=candidate.tolist(),
        topk_categories=topk,
        fallback=fallback,
        ranked=ranked,
        scores=np.where(mask, scores, -np.inf).tolist(),
    )


class SceneGrounder:
    """
    Grounds queries with a trained model, computing the proposal side once per scene.

    Inference never looks at frames. Similarities are inner products of the raw proposal and query
    embeddings, L2-normalized first when `normalize` is set.
    """

    def __init__(
        self,
        model: GroundingModel,
        vlm: FrozenVLM,
        normalize: bool = True,
        strategy: Literal["ranked", "random"] = "ranked",
        seed: int = 0,
    ):
        self.model = model.eval()
        self.vlm = vlm
        self.normalize = normalize
        self.strategy = strategy
        self.seed = seed
        self._scene_cache: dict[str, tuple[torch.Tensor, np.ndarray]] = {}
        with torch.no_grad():
            category_embeddings = vlm.encode_text(model.categories.labels, Modality.TEXT_CATEGORY)
            _, self._category_residual = model.adapt(category_embeddings, model.text_adapter)

    @torch.no_grad()
    def _proposal_side(self, scene: Scene) -> tuple[torch.Tensor, np.ndarray]:
        if scene.scene_id not in self._scene_cache:
            if not scene.proposals:
                raise EmptySceneError(f"Scene {scene.scene_id} has no proposals to ground to.")
            f3d = encode_proposals(scene, scene.proposals, self.model.point_encoder)
            _, r3d = self.model.adapt(f3d, self.model.point_adapter)
            logits = classify_against_categories(r3d, self._category_residual, "proposal3d")
            categories = logits.logits.argmax(dim=1).cpu().numpy()
            self._scene_cache[scene.scene_id] = (f3d.vectors, categories)
        return self._scene_cache[scene.scene_id]

    @torch.no_grad()
    def ground(self, query: GroundingQuery, scene: Scene, k: int = 3) -> GroundingPrediction:
        """
        Grounds one query in its scene.

        Raises:
            EmptySceneError: If the scene has no proposals.
        """
        f3d, categories = self._proposal_side(scene)
        fq = self.vlm.encode_text([query.text]).vectors.to(f3d.dtype)
        _, rq = self.model.adapt(
            EmbeddingSet(modality=Modality.TEXT_QUERY, vectors=fq), self.model.text_adapter
        )
        query_logits = classify_query(rq, self.model.query_classifier).logits[0].cpu().numpy()

        if self.normalize:
            scores = F.normalize(f3d, dim=1) @ F.normalize(fq, dim=1)[0]
        else:
            scores = f3d @ fq[0]
        scores = scores.cpu().numpy()

        if self.strategy == "random":
            result = self._random_result(query, categories, query_logits, scores, k)
        else:
            result = filter_and_rank(
                categories, query_logits, scores, k, self.model.model_config.use_filter
            )

        ids = [proposal.proposal_id for proposal in scene.proposals]
        predicted = scene.proposals[result.ranked[0]]
        return GroundingPrediction(
            query_id=query.query_id,
            scene_id=scene.scene_id,
            mask=result.mask,
            candidate_mask=result.candidate_mask,
            scores=result.scores,
            predicted_proposal_id=predicted.proposal_id,
            topk_categories=result.topk_categories,
            ranked_proposal_ids=[ids[row] for row in result.ranked],
            fallback=result.fallback,
            box_min=predicted.box3d.min,
            box_max=predicted.box3d.max,
        )

    def _random_result(
        self,
        query: GroundingQuery,
        categories: np.ndarray,
        query_logits: np.ndarray,
        scores: np.ndarray,
        k: int,
    ) -> FilterResult:
        # Random proposal selection baseline, seeded per query
        rng = np.random.default_rng(stable_seed("random", self.seed, query.query_id))
        ranked = [int(i) for i in rng.permutation(len(categories))]
        topk = top_k_categories(query_logits, k)
        return FilterResult(
            mask=[True] * len(categories),
            candidate_mask=np.isin(categories, topk).tolist(),
            topk_categories=topk,
            fallback=False,
            ranked=ranked,
            scores=scores.tolist(),
        )


def ground(
    query: GroundingQuery,
    scene: Scene,
    model: GroundingModel,
    vlm: FrozenVLM,
    k: int = 3,
    normalize: bool = True,
) -> GroundingPrediction:
    """
    Grounds a single query; see `SceneGrounder` to ground many queries of a scene.
    """
    return SceneGrounder(model, vlm, normalize).ground(query, scene, k)


@timeit
def ground_all(
    scenes: Sequence[Scene],
    model: GroundingModel,
    vlm: FrozenVLM,
    stamp: Record.Stamp,
    k: int = 3,
    normalize: bool = True,
    strategy: Literal["ranked", "random"] = "ranked",
    out_path: Optional[Path] = None,
    progress: bool = False,
) -> PredictionsFile:
    """
    Grounds every query of every scene. A failing query is recorded in `failures` and the run goes on.

    Scenes are processed in the given order and queries in scene order, so identical inputs produce
    an identical prediction file.

    Args:
        scenes (Sequence[Scene]): The scenes; frames are not needed.
        model (GroundingModel): The trained model.
        vlm (FrozenVLM): The frozen text provider.
        stamp (Record.Stamp): Written into the prediction file.
        k (int): Number of query categories kept by the filter.
        normalize (bool): The normalization switch the model was trained with.
        strategy (str): "ranked", or "random" for the random selection baseline.
        out_path (Path, optional): Where to write the prediction file.
        progress (bool): Show a progress bar.

    Returns:
        PredictionsFile: The predictions and failures.
    """
    grounder = SceneGrounder(model, vlm, normalize, strategy, stamp.seed)
    predictions, failures = [], []
    for scene in tqdm(scenes, desc="Grounding", unit="scene", disable=not progress):
        for query in scene.queries:
            try:
                predictions.append(grounder.ground(query, scene, k))
            except Exception as e:
                inference_logger.error(
                    f"Could not ground query {query.query_id} of scene {scene.scene_id}: {e}",
                    exc_info=e,
                )
                failures.append(
                    PredictionFailure(query_id=query.query_id, scene_id=scene.scene_id, error=str(e))
                )

    document = PredictionsFile(
        stamp=stamp, k=k, strategy=strategy, predictions=predictions, failures=failures
    )
    inference_logger.info(
        f"Grounded {len(predictions)} queries in {len(scenes)} scenes, {len(failures)} failures"
    )
    if out_path is not None:
        write_predictions(out_path, document)
    return document


def write_predictions(path: Path, document: PredictionsFile) -> None:
    # Python's json writes -inf as -Infinity, which read_predictions accepts
    write_json(path, document.model_dump(mode="python"))


def read_predictions(path: Path) -> PredictionsFile:
    """
    Raises:
        BundleLoadError: If the file is missing or malformed.
    """
    try:
        return PredictionsFile.model_validate(read_json(path))
    except ValidationError as e:
        raise BundleLoadError(f"Malformed prediction file {path}: {e}") from e
