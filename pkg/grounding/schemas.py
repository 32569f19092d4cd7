from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ExtensionMode(str, Enum):
    NONE = "none"
    BOUNDARY_EXTENDED = "boundary_extended"


class Supervision(str, Enum):
    """
    What the 3D branch is trained against. `weak` is projection pairing with category labels;
    `pseudo_label` replaces the pairing with the frozen provider's best region for each query;
    `ground_truth` trains on annotated target proposals and needs no frames.
    """

    WEAK = "weak"
    PSEUDO_LABEL = "pseudo_label"
    GROUND_TRUTH = "ground_truth"


class Modality(str, Enum):
    TEXT_QUERY = "text_query"
    TEXT_CATEGORY = "text_category"
    IMAGE_REGION = "image_region"
    POINT_PROPOSAL = "point_proposal"


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: Literal["vlm", "toy"] = "toy"
    d: int = Field(512, ge=2)
    point_sample_count: int = Field(1024, ge=1)
    point_backbone: Literal["pointnet2", "mlp"] = "pointnet2"
    transformer_layers: int = Field(3, ge=0)
    transformer_heads: int = Field(8, ge=1)
    seed: int = 0
    # Only read by the vlm backend
    vlm_model: str = "ViT-B-32"
    vlm_pretrained: str = "openai"

    @model_validator(mode="after")
    def heads_divide_width(self):
        if self.transformer_layers > 0 and self.d % self.transformer_heads != 0:
            raise ValueError(
                f"d={self.d} is not divisible by transformer_heads={self.transformer_heads}"
            )
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.5, ge=0.0, le=1.0)
    alpha_text: Optional[float] = Field(None, ge=0.0, le=1.0)
    alpha_image: Optional[float] = Field(None, ge=0.0, le=1.0)
    alpha_point: Optional[float] = Field(None, ge=0.0, le=1.0)
    adapter_hidden: int = Field(512, ge=1)
    use_adapters: bool = True
    use_contrastive_adapted: bool = True
    use_filter: bool = True

    def alpha_for(self, adapter: Literal["text", "image", "point"]) -> float:
        override = getattr(self, f"alpha_{adapter}")
        return self.alpha if override is None else override


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(1.0, ge=0.0)
    lambda3: float = Field(1.0, ge=0.0)
    lambda4: float = Field(1.0, ge=0.0)
    # Only read when training against target proposals (pseudo_label or ground_truth)
    lambda_match: float = Field(1.0, ge=0.0)
    tau: float = Field(0.07, gt=0.0)
    normalize: bool = True


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size_scenes: int = Field(32, ge=1)
    base_lr: float = Field(0.0005, gt=0.0)
    transformer_lr_multiplier: float = Field(0.1, gt=0.0)
    decay_factor: float = Field(0.65, gt=0.0, le=1.0)
    decay_epochs: list[int] = [20, 30, 40, 50]
    max_epochs: int = Field(60, ge=1)
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    grad_clip_norm: Optional[float] = Field(None, gt=0.0)
    checkpoint_every: int = Field(1, ge=1)
    extension_mode: ExtensionMode = ExtensionMode.BOUNDARY_EXTENDED
    use_depth_visibility: bool = False
    supervision: Supervision = Supervision.WEAK
    progress: bool = False

    @field_validator("decay_epochs")
    @classmethod
    def strictly_increasing(cls, epochs: list[int]) -> list[int]:
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {epochs}")
        if any(epoch < 0 for epoch in epochs):
            raise ValueError("decay_epochs must be non-negative")
        return epochs


class MetricConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metrics: list[Literal["acc_iou", "selection", "recall"]] = [
        "acc_iou",
        "selection",
        "recall",
    ]
    ious: list[float] = [0.25, 0.5]
    n: int = Field(3, ge=1)


class Paths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenes: Optional[Path] = None
    out: Optional[Path] = None
    checkpoint: Optional[Path] = None
    predictions: Optional[Path] = None
    report: Optional[Path] = None


class RunConfig(BaseModel):
    """
    Everything one CLI invocation needs. The config file is a JSON document of this shape;
    command-line flags are merged on top of it.
    """

    model_config = ConfigDict(extra="forbid")

    command: Optional[Literal["preprocess", "train", "infer", "eval", "synth"]] = None
    seed: int = 0
    paths: Paths = Paths()
    encoder: EncoderConfig = EncoderConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    k: int = Field(3, ge=1)
    strategy: Literal["ranked", "random"] = "ranked"
    metrics: MetricConfig = MetricConfig()

    def hyperparameters(self) -> dict:
        """
        The part of the configuration that determines results (paths and command excluded).
        """
        return self.model_dump(mode="json", exclude={"paths", "command"})

    def with_seed(self, seed: int) -> "RunConfig":
        """
        Returns a copy where the run seed also seeds the encoder and the training loop.
        """
        return self.model_copy(
            update={
                "seed": seed,
                "encoder": self.encoder.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )


class Record:
    """
    Schemas of the JSON records stored in scene bundles and caches.
    """

    class Stamp(BaseModel):
        config_hash: str
        seed: int
        code_version: str

    class Proposal(BaseModel):
        id: int
        point_indices: list[int] = Field(min_length=1)
        box_min: tuple[float, float, float]
        box_max: tuple[float, float, float]
        category_id: Optional[int] = None

    class Camera(BaseModel):
        intrinsics: list[float] = Field(min_length=9, max_length=9)
        extrinsics: list[float] = Field(min_length=16, max_length=16)
        width: int = Field(ge=1)
        height: int = Field(ge=1)

    class Query(BaseModel):
        id: str
        text: str
        target_category_id: int
        target_proposal_id: Optional[int] = None
        view_dependent: Optional[bool] = None
        distractor_count: Optional[int] = None

    class Region(BaseModel):
        proposal_id: int
        frame_id: int
        rect: tuple[float, float, float, float]
        visible_point_count: int = Field(ge=0)

    class RegionsKey(BaseModel):
        """
        What cached regions and region embeddings were computed from. `provider` is the identity of
        the frozen provider that encoded the regions, or None when only regions were cached.
        """

        extension_mode: ExtensionMode
        use_depth_visibility: bool
        scene_digest: str
        provider: Optional[str] = None

    class RegionsFile(BaseModel):
        stamp: "Record.Stamp"
        scene_id: str
        key: "Record.RegionsKey"
        regions: list["Record.Region"]


Record.RegionsFile.model_rebuild()
