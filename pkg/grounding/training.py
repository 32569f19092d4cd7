import csv
import time
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from decorators import timeit, weakly_supervised
from helpers import MiscHelper, cache_dir as default_cache_dir
from grounding.adaptation import classify_against_categories, classify_query
from grounding.encoders import (
    EmbeddingSet,
    FrozenVLM,
    encode_proposals,
    read_embedding_cache,
)
from grounding.losses import (
    CSV_COLUMNS,
    LossReport,
    classification_loss,
    contrastive_loss,
    matching_loss,
    total_loss,
)
from grounding.model import CheckpointMeta, GroundingModel, save_checkpoint
from grounding.projection import (
    Region2D,
    compute_scene_regions,
    read_regions,
    regions_cache_path,
    regions_key,
    stale_key_fields,
)
from grounding.schemas import (
    LossWeights,
    Modality,
    ModelConfig,
    RunConfig,
    Supervision,
    TrainConfig,
)
from grounding.scene import Scene
from grounding.utils._logger import training_logger
from grounding.utils.utils import (
    BundleLoadError,
    FrozenParameterError,
    SceneValidationError,
    parameter_checksum,
    stable_seed,
)

F2D_CACHE_FILE = "f2d.emb"
CATEGORY_CACHE_FILE = "fc.emb"
TRAIN_LOG_FILE = "train_log.csv"

misc_helper = MiscHelper()


class PreparedScene(BaseModel):
    """
    Everything the training step needs from one scene, with the frozen embeddings resolved.

    `paired_rows` are the positions (in scene proposal order) of the proposals that have a region,
    aligned with the rows of `image_embeddings`. `matching_targets` holds one proposal row per
    query (-1 for none) and is only filled when training against target proposals.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scene: Scene
    regions: dict[int, Region2D]
    paired_rows: list[int]
    image_embeddings: EmbeddingSet
    category_embeddings: EmbeddingSet
    query_embeddings: EmbeddingSet
    proposal_labels: torch.Tensor
    query_labels: torch.Tensor
    matching_targets: torch.Tensor


class TrainingOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    checkpoint: Path
    checkpoints: list[Path]
    history: list[LossReport]
    epoch_means: list[LossReport]
    log_path: Path
    model: GroundingModel


def lr_at_epoch(
    config: TrainConfig, epoch: int, group: Literal["base", "transformer"] = "base"
) -> float:
    """
    The learning rate of a parameter group at a (0-based) epoch.

    The group rate (base_lr, times transformer_lr_multiplier for the transformer) is multiplied by
    decay_factor once for every decay epoch that is not after `epoch`.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    rate = config.base_lr
    if group == "transformer":
        rate = rate * config.transformer_lr_multiplier
    decays = sum(1 for decay_epoch in config.decay_epochs if decay_epoch <= epoch)
    return rate * config.decay_factor**decays


def _cached_scene_embeddings(
    scene: Scene, config: TrainConfig, vlm: FrozenVLM, cache_dir: Path
) -> Optional[tuple[dict[int, Region2D], EmbeddingSet]]:
    regions_path = regions_cache_path(cache_dir, scene.scene_id, config.extension_mode)
    f2d_path = regions_path.parent / F2D_CACHE_FILE
    if not (regions_path.is_file() and f2d_path.is_file()):
        return None
    try:
        document, regions = read_regions(regions_path)
        embeddings = read_embedding_cache(f2d_path)
    except BundleLoadError as e:
        training_logger.warning(f"Ignoring unreadable cache of scene {scene.scene_id}: {e}")
        return None

    expected = regions_key(
        scene, config.extension_mode, config.use_depth_visibility, vlm.identity
    )
    stale = stale_key_fields(document.key, expected)
    if stale:
        training_logger.warning(
            f"Ignoring stale cache of scene {scene.scene_id} (written by run "
            f"{document.stamp.config_hash}): {', '.join(stale)} changed, re-encoding the regions"
        )
        return None
    if embeddings.n != len(regions) or embeddings.d != vlm.d:
        training_logger.warning(
            f"Ignoring cache of scene {scene.scene_id}: {embeddings.n}x{embeddings.d} embeddings "
            f"for {len(regions)} regions at d={vlm.d}"
        )
        return None
    return regions, embeddings


def encode_scene_regions(
    scene: Scene, vlm: FrozenVLM, config: TrainConfig
) -> tuple[dict[int, Region2D], EmbeddingSet]:
    """
    Projects a scene and encodes its regions; regions that fail to encode are dropped.
    """
    regions = compute_scene_regions(scene, config.extension_mode, config.use_depth_visibility)
    proposal_ids = list(regions)
    encoding = vlm.encode_image_regions(
        {frame.frame_id: frame for frame in scene.frames}, [regions[i] for i in proposal_ids]
    )
    kept = {proposal_ids[i]: regions[proposal_ids[i]] for i in encoding.indices}
    return kept, encoding.embeddings


def pseudo_label_targets(
    query_embeddings: EmbeddingSet,
    image_embeddings: EmbeddingSet,
    paired_rows: Sequence[int],
    normalize: bool = True,
) -> torch.Tensor:
    """
    For every query, the proposal row whose image region the frozen provider matches best.

    Ties go to the first region. Queries of a scene without regions get -1.

    Returns:
        torch.Tensor: (Q,) long proposal rows.
    """
    if image_embeddings.n == 0:
        return torch.full((query_embeddings.n,), -1, dtype=torch.long)
    queries = query_embeddings.vectors
    regions = image_embeddings.vectors.to(queries.dtype)
    if normalize:
        queries, regions = F.normalize(queries, dim=1), F.normalize(regions, dim=1)
    best = (queries @ regions.T).argmax(dim=1)
    return torch.as_tensor(list(paired_rows), dtype=torch.long)[best]


def annotated_targets(scene: Scene) -> torch.Tensor:
    """
    The annotated target proposal row of every query, -1 for queries without one.

    Reads target proposal ids, so the audit rejects it inside weakly supervised training.
    """
    rows = {proposal.proposal_id: row for row, proposal in enumerate(scene.proposals)}
    return torch.tensor(
        [
            rows.get(query.target_proposal_id, -1) if query.has_target else -1
            for query in scene.queries
        ],
        dtype=torch.long,
    )


@timeit
def prepare_scene(
    scene: Scene,
    vlm: FrozenVLM,
    config: TrainConfig,
    cache_dir: Optional[Path] = None,
    category_embeddings: Optional[EmbeddingSet] = None,
) -> PreparedScene:
    """
    Resolves the frozen embeddings of a scene, from the preprocess caches when they are current.

    With ground truth supervision the 2D branch is skipped and frames are not read.

    Args:
        scene (Scene): A scene, with at least one frame unless supervision is ground_truth.
        vlm (FrozenVLM): The frozen text/image provider.
        config (TrainConfig): Selects the extension mode, depth visibility and supervision.
        cache_dir (Path, optional): Root of the preprocess caches; defaults to the configured one.
        category_embeddings (EmbeddingSet, optional): F^C shared across scenes.

    Returns:
        PreparedScene: The prepared scene.
    """
    query_embeddings = vlm.encode_text([query.text for query in scene.queries])
    if config.supervision is Supervision.GROUND_TRUTH:
        regions = {}
        image_embeddings = EmbeddingSet(
            modality=Modality.IMAGE_REGION, vectors=torch.zeros(0, vlm.d)
        )
    else:
        cached = _cached_scene_embeddings(
            scene, config, vlm, default_cache_dir() if cache_dir is None else Path(cache_dir)
        )
        if cached is None:
            regions, image_embeddings = encode_scene_regions(scene, vlm, config)
        else:
            regions, image_embeddings = cached

    rows = {proposal.proposal_id: row for row, proposal in enumerate(scene.proposals)}
    paired_rows = [rows[proposal_id] for proposal_id in regions]
    if config.supervision is Supervision.PSEUDO_LABEL:
        matching_targets = pseudo_label_targets(
            query_embeddings, image_embeddings, paired_rows, config.loss_weights.normalize
        )
    elif config.supervision is Supervision.GROUND_TRUTH:
        matching_targets = annotated_targets(scene)
    else:
        matching_targets = torch.full((len(scene.queries),), -1, dtype=torch.long)

    if category_embeddings is None:
        category_embeddings = vlm.encode_text(scene.categories.labels, Modality.TEXT_CATEGORY)
    return PreparedScene(
        scene=scene,
        regions=regions,
        paired_rows=paired_rows,
        image_embeddings=image_embeddings,
        category_embeddings=category_embeddings,
        query_embeddings=query_embeddings,
        proposal_labels=torch.tensor(
            [-1 if p.category_id is None else p.category_id for p in scene.proposals],
            dtype=torch.long,
        ),
        query_labels=torch.tensor(
            [query.target_category_id for query in scene.queries], dtype=torch.long
        ),
        matching_targets=matching_targets,
    )


def scene_loss_terms(
    model: GroundingModel,
    prepared: PreparedScene,
    weights: LossWeights,
    epoch: int = 0,
    supervision: Supervision = Supervision.WEAK,
) -> dict[str, torch.Tensor]:
    """
    Computes the loss terms of one scene. Terms whose weight is 0 are not computed and count as 0.

    Weak supervision: contrastive pairs are the proposals with a region; 2D classification uses
    those with a known category, 3D classification all proposals with a known category. With
    pseudo_label or ground_truth supervision the 2D terms are replaced by `l_match`, the
    query-over-proposals cross-entropy against `prepared.matching_targets`.
    """
    model_config: ModelConfig = model.model_config
    scene = prepared.scene
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    terms = {name: zero for name in ("l_e", "l_a", "l_cls_2d", "l_cls_3d", "l_cls_q", "l_match")}
    weak = supervision is Supervision.WEAK

    f3d = encode_proposals(scene, scene.proposals, model.point_encoder, epoch)
    a3d, r3d = model.adapt(f3d, model.point_adapter)
    paired = torch.as_tensor(prepared.paired_rows, dtype=torch.long)

    if weak:
        image_embeddings = EmbeddingSet(
            modality=Modality.IMAGE_REGION, vectors=prepared.image_embeddings.vectors.to(dtype)
        )
        a2d, r2d = model.adapt(image_embeddings, model.image_adapter)

    if weak and weights.lambda1 > 0:
        terms["l_e"] = contrastive_loss(
            image_embeddings, f3d.vectors[paired], weights.tau, weights.normalize
        )
        if model_config.use_adapters and model_config.use_contrastive_adapted:
            terms["l_a"] = contrastive_loss(
                a2d, a3d.vectors[paired], weights.tau, weights.normalize
            )

    needs_categories = (weak and weights.lambda2 > 0) or weights.lambda3 > 0
    if needs_categories:
        category_embeddings = EmbeddingSet(
            modality=Modality.TEXT_CATEGORY,
            vectors=prepared.category_embeddings.vectors.to(dtype),
        )
        _, rc = model.adapt(category_embeddings, model.text_adapter)

    if weak and weights.lambda2 > 0:
        labels_2d = prepared.proposal_labels[paired]
        known = labels_2d >= 0
        logits = classify_against_categories(
            EmbeddingSet(modality=Modality.IMAGE_REGION, vectors=r2d.vectors[known]), rc, "region2d"
        )
        terms["l_cls_2d"] = classification_loss(logits, labels_2d[known])

    if weights.lambda3 > 0:
        known = prepared.proposal_labels >= 0
        logits = classify_against_categories(
            EmbeddingSet(modality=Modality.POINT_PROPOSAL, vectors=r3d.vectors[known]), rc, "proposal3d"
        )
        terms["l_cls_3d"] = classification_loss(logits, prepared.proposal_labels[known])

    query_embeddings = EmbeddingSet(
        modality=Modality.TEXT_QUERY, vectors=prepared.query_embeddings.vectors.to(dtype)
    )
    if weights.lambda4 > 0:
        _, rq = model.adapt(query_embeddings, model.text_adapter)
        terms["l_cls_q"] = classification_loss(
            classify_query(rq, model.query_classifier), prepared.query_labels
        )

    if not weak and weights.lambda_match > 0:
        terms["l_match"] = matching_loss(
            query_embeddings, f3d, prepared.matching_targets, weights.tau, weights.normalize
        )
    return terms


def _build_optimizer(model: GroundingModel, config: TrainConfig) -> torch.optim.Adam:
    param_groups = [
        {"params": parameters, "name": name, "lr": lr_at_epoch(config, 0, name)}
        for name, parameters in model.parameter_groups().items()
        if parameters
    ]
    return torch.optim.Adam(param_groups)


def _set_learning_rates(optimizer: torch.optim.Optimizer, config: TrainConfig, epoch: int) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr_at_epoch(config, epoch, group["name"])


def _epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(stable_seed("order", seed, epoch)).permutation(count)


@timeit
def train(
    scenes: Sequence[Scene],
    config: RunConfig,
    vlm: FrozenVLM,
    out_dir: Path,
    cache_dir: Optional[Path] = None,
) -> TrainingOutcome:
    """
    Trains the 3D encoder, the adapters and the query classifier.

    Each step averages the per-scene objectives of one batch of scenes and takes one Adam step.
    A checkpoint `epoch_<n>.ckpt` is written every `checkpoint_every` epochs and after the last
    one, and every step is appended to `train_log.csv`.

    With weak and pseudo_label supervision, training runs under the target access audit and never
    reads a target proposal id. Ground truth supervision reads them by definition and runs
    unaudited.

    Args:
        scenes (Sequence[Scene]): Training scenes, each with at least one frame unless supervision is ground_truth.
        config (RunConfig): Encoder, model and training configuration.
        vlm (FrozenVLM): The frozen provider; its parameters must not change.
        out_dir (Path): Where checkpoints and the log go.
        cache_dir (Path, optional): Root of the preprocess caches; defaults to the configured one.

    Returns:
        TrainingOutcome: The final checkpoint, the per-step history and the trained model.

    Raises:
        SceneValidationError: If a scene has no frames or the vocabularies differ.
        NonFiniteLossError: If a loss term turns NaN or infinite.
        FrozenParameterError: If the provider's parameters changed.
        WeakSupervisionViolation: If weakly supervised training read a target proposal id.
    """
    cache_dir = default_cache_dir() if cache_dir is None else Path(cache_dir)
    if config.train.supervision is Supervision.GROUND_TRUTH:
        training_logger.warning(
            "Training on annotated target proposals; the target access audit is off for this run."
        )
        return _fit(scenes, config, vlm, out_dir, cache_dir)
    return _fit_weakly(scenes, config, vlm, out_dir, cache_dir)


@weakly_supervised
def _fit_weakly(
    scenes: Sequence[Scene], config: RunConfig, vlm: FrozenVLM, out_dir: Path, cache_dir: Path
) -> TrainingOutcome:
    return _fit(scenes, config, vlm, out_dir, cache_dir)


def _fit(
    scenes: Sequence[Scene], config: RunConfig, vlm: FrozenVLM, out_dir: Path, cache_dir: Path
) -> TrainingOutcome:
    train_config = config.train
    needs_frames = train_config.supervision is not Supervision.GROUND_TRUTH
    if not scenes:
        raise SceneValidationError("Training needs at least one scene.")
    for scene in scenes:
        if needs_frames and scene.num_frames == 0:
            raise SceneValidationError(
                f"Scene {scene.scene_id}: {train_config.supervision.value} training needs at least one frame"
            )
        if scene.categories != scenes[0].categories:
            raise SceneValidationError(
                f"Scene {scene.scene_id}: category vocabulary differs from scene {scenes[0].scene_id}"
            )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen_checksum = parameter_checksum(vlm)
    misc_helper.seed_everything(train_config.seed)

    vocabulary = scenes[0].categories
    model = GroundingModel(config.encoder, config.model, vocabulary)
    model.train()
    optimizer = _build_optimizer(model, train_config)

    category_embeddings = vlm.encode_text(vocabulary.labels, Modality.TEXT_CATEGORY)
    prepared = [
        prepare_scene(scene, vlm, train_config, cache_dir, category_embeddings)
        for scene in scenes
    ]
    training_logger.info(
        f"Training on {len(prepared)} scenes with {train_config.supervision.value} supervision, "
        f"{sum(len(p.paired_rows) for p in prepared)} paired proposals, "
        f"{sum(int((p.matching_targets >= 0).sum()) for p in prepared)} queries with a target proposal, "
        f"{sum(len(p.scene.proposals) for p in prepared)} proposals in total"
    )

    stamp = {
        "config_hash": misc_helper.config_hash(config.hyperparameters()),
        "seed": train_config.seed,
        "code_version": misc_helper.code_version(),
    }
    log_path = out_dir / TRAIN_LOG_FILE
    history, epoch_means, checkpoints = [], [], []
    step = 0
    with open(log_path, "w", newline="", encoding="utf-8") as log_file:
        log_file.write(
            f"# config_hash={stamp['config_hash']} seed={stamp['seed']} code_version={stamp['code_version']}\n"
        )
        writer = csv.DictWriter(log_file, fieldnames=CSV_COLUMNS)
        writer.writeheader()

        epochs = tqdm(
            range(train_config.max_epochs),
            desc="Training",
            unit="epoch",
            disable=not train_config.progress,
        )
        started = time.perf_counter()
        for epoch in epochs:
            _set_learning_rates(optimizer, train_config, epoch)
            order = _epoch_order(len(prepared), train_config.seed, epoch)
            epoch_reports = []
            for start in range(0, len(order), train_config.batch_size_scenes):
                batch = [prepared[i] for i in order[start : start + train_config.batch_size_scenes]]
                optimizer.zero_grad()
                scene_totals, scene_reports = [], []
                for item in batch:
                    terms = scene_loss_terms(
                        model, item, train_config.loss_weights, epoch, train_config.supervision
                    )
                    total = total_loss(
                        terms,
                        train_config.loss_weights,
                        step=f"epoch {epoch} step {step} scene {item.scene.scene_id}",
                    )
                    scene_totals.append(total)
                    scene_reports.append(LossReport.from_terms(terms, total))
                batch_total = torch.stack(scene_totals).mean()
                if batch_total.requires_grad:
                    batch_total.backward()
                    if train_config.grad_clip_norm is not None:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip_norm)
                    optimizer.step()

                report = LossReport.mean(scene_reports)
                history.append(report)
                epoch_reports.append(report)
                writer.writerow(report.csv_row(step, epoch, optimizer.param_groups[0]["lr"]))
                step += 1

            epoch_mean = LossReport.mean(epoch_reports)
            epoch_means.append(epoch_mean)
            epochs.set_postfix(loss=f"{epoch_mean.total:.4f}")
            completed = epoch + 1
            per_epoch = (time.perf_counter() - started) / completed
            training_logger.info(
                f"Epoch {completed}/{train_config.max_epochs}: mean total loss {epoch_mean.total:.6f}, "
                f"ETA {misc_helper.remaining_time(per_epoch * (train_config.max_epochs - completed))}"
            )

            if completed % train_config.checkpoint_every == 0 or completed == train_config.max_epochs:
                checkpoints.append(
                    save_checkpoint(
                        out_dir / f"epoch_{completed}.ckpt",
                        model,
                        CheckpointMeta(
                            epoch=completed,
                            normalize=train_config.loss_weights.normalize,
                            **stamp,
                        ),
                    )
                )
            log_file.flush()

    if parameter_checksum(vlm) != frozen_checksum:
        raise FrozenParameterError("The frozen text/image provider changed during training.")

    model.eval()
    return TrainingOutcome(
        checkpoint=checkpoints[-1],
        checkpoints=checkpoints,
        history=history,
        epoch_means=epoch_means,
        log_path=log_path,
        model=model,
    )
