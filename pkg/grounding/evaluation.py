from collections import Counter
from typing import Optional, Sequence

from pydantic import BaseModel

from decorators import timeit
from grounding.inference import GroundingPrediction, PredictionsFile
from grounding.projection import iou_3d
from grounding.schemas import MetricConfig, Record
from grounding.scene import AxisAlignedBox3D, Scene
from grounding.utils._logger import evaluation_logger

EASY_MAX_DISTRACTORS = 2

PARTITIONS = {
    "uniqueness": ("Unique", "Multiple"),
    "difficulty": ("Easy", "Hard"),
    "view": ("View-dep.", "View-indep."),
}
OVERALL = "Overall"

Predictions = dict[str, GroundingPrediction]
ProposalBoxes = dict[tuple[str, int], AxisAlignedBox3D]


class GroundTruth(BaseModel):
    """
    Annotated targets of the queries that have one, keyed by query id.
    """

    boxes: dict[str, AxisAlignedBox3D]
    proposal_ids: dict[str, int]
    proposal_boxes: dict[str, AxisAlignedBox3D]

    def proposal_box(self, scene_id: str, proposal_id: int) -> Optional[AxisAlignedBox3D]:
        return self.proposal_boxes.get(f"{scene_id}/{proposal_id}")


class SubsetScores(BaseModel):
    count: int
    metrics: dict[str, float]


class EvalReport(BaseModel):
    ious: list[float]
    n: int
    overall: SubsetScores
    subsets: dict[str, dict[str, SubsetScores]]


class ReportFile(BaseModel):
    stamp: Record.Stamp
    reports: dict[str, EvalReport]
    table: str


def ground_truth_from_scenes(scenes: Sequence[Scene]) -> GroundTruth:
    """
    Collects target boxes and ids from annotated queries, and every proposal box for recall.

    Queries without a target are skipped.
    """
    boxes, proposal_ids, proposal_boxes = {}, {}, {}
    for scene in scenes:
        for proposal in scene.proposals:
            proposal_boxes[f"{scene.scene_id}/{proposal.proposal_id}"] = proposal.box3d
        for query in scene.queries:
            target = query.target_proposal_id
            if target is None:
                continue
            proposal_ids[query.query_id] = target
            boxes[query.query_id] = scene.proposal(target).box3d
    return GroundTruth(boxes=boxes, proposal_ids=proposal_ids, proposal_boxes=proposal_boxes)


def _predicted_box(prediction: GroundingPrediction) -> AxisAlignedBox3D:
    return AxisAlignedBox3D(min=prediction.box_min, max=prediction.box_max)


def _fraction(hits: int, total: int) -> float:
    return hits / total if total else 0.0


def _warn_missing(query_ids: Sequence[str], predictions: Predictions, metric: str) -> None:
    missing = [query_id for query_id in query_ids if query_id not in predictions]
    if missing:
        evaluation_logger.warning(
            f"{metric}: {len(missing)} queries have no prediction and count as incorrect: {missing[:10]}"
        )


def acc_at_iou(
    predictions: Predictions, boxes: dict[str, AxisAlignedBox3D], m: float
) -> float:
    """
    Fraction of queries whose predicted box reaches IoU >= m with the ground truth.

    Args:
        predictions (dict[str, GroundingPrediction]): Predictions keyed by query id.
        boxes (dict[str, AxisAlignedBox3D]): Ground-truth boxes keyed by query id.
        m (float): IoU threshold.

    Returns:
        float: Accuracy in [0, 1]; 0 for no queries.
    """
    _warn_missing(list(boxes), predictions, f"Acc@{m}IoU")
    hits = sum(
        1
        for query_id, box in boxes.items()
        if query_id in predictions and iou_3d(_predicted_box(predictions[query_id]), box) >= m
    )
    return _fraction(hits, len(boxes))


def selection_accuracy(predictions: Predictions, target_ids: dict[str, int]) -> float:
    """
    Fraction of queries whose predicted proposal is the target proposal.
    """
    _warn_missing(list(target_ids), predictions, "Selection accuracy")
    hits = sum(
        1
        for query_id, target in target_ids.items()
        if query_id in predictions and predictions[query_id].predicted_proposal_id == target
    )
    return _fraction(hits, len(target_ids))


def recall_at_n_iou(
    predictions: Predictions,
    ground_truth: GroundTruth,
    n: int,
    m: float,
    query_ids: Optional[Sequence[str]] = None,
) -> float:
    """
    Fraction of queries for which any of the top-n ranked proposals has IoU > m with the ground truth.

    Args:
        predictions (dict[str, GroundingPrediction]): Predictions with ranked proposal ids.
        ground_truth (GroundTruth): Target boxes and the boxes of all proposals.
        n (int): Number of ranked proposals considered.
        m (float): IoU threshold, strict.
        query_ids (Sequence[str], optional): Restricts the queries; defaults to all with a target.
    """
    query_ids = list(ground_truth.boxes) if query_ids is None else list(query_ids)
    _warn_missing(query_ids, predictions, f"R@{n},IoU@{m}")
    hits = 0
    for query_id in query_ids:
        prediction = predictions.get(query_id)
        if prediction is None:
            continue
        target = ground_truth.boxes[query_id]
        for proposal_id in prediction.ranked_proposal_ids[:n]:
            box = ground_truth.proposal_box(prediction.scene_id, proposal_id)
            if box is not None and iou_3d(box, target) > m:
                hits += 1
                break
    return _fraction(hits, len(query_ids))


def bucket_queries(scenes: Sequence[Scene]) -> dict[str, dict[str, list[str]]]:
    """
    Assigns queries to the Unique/Multiple, Easy/Hard and View-dep./View-indep. splits.

    Unique means the scene holds exactly one proposal of the target category. Easy means at most
    two distractors. A query missing the metadata of a split is left out of that split only.

    Returns:
        dict[str, dict[str, list[str]]]: partition -> bucket -> query ids.
    """
    buckets = {partition: {label: [] for label in labels} for partition, labels in PARTITIONS.items()}
    missing = Counter()
    for scene in scenes:
        categories = [proposal.category_id for proposal in scene.proposals]
        counts = Counter(categories)
        for query in scene.queries:
            if None in counts:
                missing["uniqueness"] += 1
            else:
                unique = counts[query.target_category_id] == 1
                buckets["uniqueness"]["Unique" if unique else "Multiple"].append(query.query_id)

            if query.distractor_count is None:
                missing["difficulty"] += 1
            else:
                easy = query.distractor_count <= EASY_MAX_DISTRACTORS
                buckets["difficulty"]["Easy" if easy else "Hard"].append(query.query_id)

            if query.view_dependent is None:
                missing["view"] += 1
            else:
                label = "View-dep." if query.view_dependent else "View-indep."
                buckets["view"][label].append(query.query_id)

    for partition, count in missing.items():
        evaluation_logger.warning(
            f"{count} queries lack the metadata of the {partition} split and are left out of it."
        )
    return buckets


def metric_names(config: MetricConfig) -> list[str]:
    names = []
    for metric in config.metrics:
        if metric == "acc_iou":
            names += [f"acc@{m}" for m in config.ious]
        elif metric == "selection":
            names.append("selection")
        elif metric == "recall":
            names += [f"r@{config.n},iou@{m}" for m in config.ious]
    return names


def _score_subset(
    query_ids: list[str],
    predictions: Predictions,
    ground_truth: GroundTruth,
    config: MetricConfig,
) -> SubsetScores:
    boxes = {q: ground_truth.boxes[q] for q in query_ids}
    metrics = {}
    for metric in config.metrics:
        if metric == "acc_iou":
            for m in config.ious:
                metrics[f"acc@{m}"] = acc_at_iou(predictions, boxes, m)
        elif metric == "selection":
            metrics["selection"] = selection_accuracy(
                predictions, {q: ground_truth.proposal_ids[q] for q in query_ids}
            )
        elif metric == "recall":
            for m in config.ious:
                metrics[f"r@{config.n},iou@{m}"] = recall_at_n_iou(
                    predictions, ground_truth, config.n, m, query_ids
                )
    return SubsetScores(count=len(query_ids), metrics=metrics)


@timeit
def evaluate(
    predictions: PredictionsFile | Sequence[GroundingPrediction],
    scenes: Sequence[Scene],
    config: MetricConfig = MetricConfig(),
) -> EvalReport:
    """
    Scores predictions against the annotated targets of the scenes, overall and per split.

    Only queries with an annotated target are scored.

    Args:
        predictions (PredictionsFile | Sequence[GroundingPrediction]): The predictions.
        scenes (Sequence[Scene]): The scenes the predictions were made on.
        config (MetricConfig): Metrics, IoU thresholds and n.

    Returns:
        EvalReport: Overall and per-subset scores with counts.
    """
    if isinstance(predictions, PredictionsFile):
        predictions = predictions.predictions
    by_query = {prediction.query_id: prediction for prediction in predictions}
    ground_truth = ground_truth_from_scenes(scenes)
    scored = set(ground_truth.boxes)

    subsets = {}
    for partition, buckets in bucket_queries(scenes).items():
        subsets[partition] = {
            label: _score_subset(
                [q for q in query_ids if q in scored], by_query, ground_truth, config
            )
            for label, query_ids in buckets.items()
        }
    overall = _score_subset(list(ground_truth.boxes), by_query, ground_truth, config)
    evaluation_logger.info(f"Evaluated {overall.count} queries: {overall.metrics}")
    return EvalReport(ious=config.ious, n=config.n, overall=overall, subsets=subsets)


def compare_reports(labelled: Sequence[tuple[str, EvalReport]]) -> list[dict[str, str]]:
    """
    Turns labelled reports into table rows, one per label, with percentages per split and metric.
    """
    rows = []
    for label, report in labelled:
        row = {"Method": label}
        for partition, labels in PARTITIONS.items():
            for bucket in labels:
                scores = report.subsets.get(partition, {}).get(bucket)
                for metric, value in (scores.metrics.items() if scores else []):
                    row[f"{bucket} {metric}"] = f"{100 * value:.2f}" if scores.count else "-"
        for metric, value in report.overall.metrics.items():
            row[f"{OVERALL} {metric}"] = f"{100 * value:.2f}"
        rows.append(row)
    return rows


def render_table(rows: list[dict[str, str]]) -> str:
    """
    Renders rows as an aligned text table with a header line.
    """
    if not rows:
        return ""
    columns = list(rows[0])
    for row in rows[1:]:
        columns += [column for column in row if column not in columns]
    widths = {
        column: max(len(column), *(len(row.get(column, "-")) for row in rows))
        for column in columns
    }
    lines = [
        " | ".join(column.ljust(widths[column]) for column in columns),
        "-+-".join("-" * widths[column] for column in columns),
    ]
    for row in rows:
        lines.append(" | ".join(row.get(column, "-").ljust(widths[column]) for column in columns))
    return "\n".join(lines)
