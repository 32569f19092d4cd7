from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
from pydantic import BaseModel, ValidationError

from grounding.adaptation import Adapter, QueryClassifier, adapt
from grounding.encoders import EmbeddingSet, ProposalEncoder
from grounding.schemas import EncoderConfig, ModelConfig
from grounding.scene import CategoryVocabulary
from grounding.utils._logger import training_logger
from grounding.utils.utils import CheckpointError

CHECKPOINT_FORMAT = "weakground-checkpoint"
CHECKPOINT_VERSION = 1
TRANSFORMER_PREFIX = "point_encoder.transformer."


class CheckpointMeta(BaseModel):
    epoch: int
    config_hash: str
    seed: int
    code_version: str
    normalize: bool


class GroundingModel(nn.Module):
    """
    All trainable parts: the 3D proposal encoder, the text, image and point adapters, and the
    query classifier. The frozen text/image provider is not part of it.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        model_config: ModelConfig,
        categories: CategoryVocabulary,
    ):
        super().__init__()
        self.encoder_config = encoder_config
        self.model_config = model_config
        self.categories = categories
        d, hidden = encoder_config.d, model_config.adapter_hidden
        self.point_encoder = ProposalEncoder(encoder_config)
        self.text_adapter = Adapter(d, hidden, model_config.alpha_for("text"))
        self.image_adapter = Adapter(d, hidden, model_config.alpha_for("image"))
        self.point_adapter = Adapter(d, hidden, model_config.alpha_for("point"))
        self.query_classifier = QueryClassifier(d, len(categories))

    @property
    def d(self) -> int:
        return self.encoder_config.d

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def adapt(
        self, embeddings: EmbeddingSet, adapter: Adapter
    ) -> tuple[EmbeddingSet, EmbeddingSet]:
        """
        Adapts a set, or passes it through as both A and R when adapters are switched off.
        """
        if not self.model_config.use_adapters:
            return embeddings, embeddings
        return adapt(embeddings, adapter)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """
        Splits the trainable parameters into the "transformer" group and the "base" group.
        """
        groups = {"base": [], "transformer": []}
        for name, parameter in self.named_parameters():
            if not parameter.requires_grad:
                continue
            # Switched-off adapters never see a gradient
            if not self.model_config.use_adapters and "_adapter." in name:
                continue
            group = "transformer" if name.startswith(TRANSFORMER_PREFIX) else "base"
            groups[group].append(parameter)
        return groups


def save_checkpoint(
    path: Path,
    model: GroundingModel,
    meta: CheckpointMeta,
) -> Path:
    """
    Saves the model weights with everything needed to rebuild it.

    Configurations are stored as JSON strings so the archive loads with `weights_only=True`.

    Args:
        path (Path): The checkpoint file, usually `epoch_<n>.ckpt`.
        model (GroundingModel): The model to save.
        meta (CheckpointMeta): Run stamp and epoch.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state_dict": model.state_dict(),
        "encoder_config": model.encoder_config.model_dump_json(),
        "model_config": model.model_config.model_dump_json(),
        "categories": list(model.categories.labels),
        "alpha": {
            "text": model.text_adapter.alpha,
            "image": model.image_adapter.alpha,
            "point": model.point_adapter.alpha,
        },
        "d": model.d,
        "K": model.num_categories,
        "meta": meta.model_dump_json(),
    }
    torch.save(archive, path)
    training_logger.info(f"Saved checkpoint {path} (epoch {meta.epoch})")
    return path


def load_checkpoint(
    path: Path, categories: Optional[CategoryVocabulary] = None
) -> tuple[GroundingModel, CheckpointMeta]:
    """
    Loads a checkpoint written by `save_checkpoint`.

    Args:
        path (Path): The checkpoint file.
        categories (CategoryVocabulary, optional): If given, must equal the checkpoint's vocabulary.

    Returns:
        tuple[GroundingModel, CheckpointMeta]: The model in eval mode and its stamp.

    Raises:
        CheckpointError: If the file is missing, malformed or built for another vocabulary.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Missing checkpoint: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a grounding checkpoint")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {archive.get('version')}")

    try:
        encoder_config = EncoderConfig.model_validate_json(archive["encoder_config"])
        model_config = ModelConfig.model_validate_json(archive["model_config"])
        stored = CategoryVocabulary(labels=tuple(archive["categories"]))
        meta = CheckpointMeta.model_validate_json(archive["meta"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}") from e

    if categories is not None and categories != stored:
        raise CheckpointError(
            f"{path} was trained on categories {list(stored.labels)}, not {list(categories.labels)}"
        )

    model = GroundingModel(encoder_config, model_config, stored)
    try:
        model.load_state_dict(archive["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"Weights in {path} do not fit the stored configuration: {e}") from e
    model.eval()
    return model, meta
