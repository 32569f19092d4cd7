import hashlib
import re
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator

from decorators import timeit
from grounding.projection import Region2D
from grounding.schemas import EncoderConfig, Modality
from grounding.scene import CategoryVocabulary, Frame, Proposal, Scene
from grounding.synthetic import BACKGROUND_COLOR, FLOOR_COLOR, category_color
from grounding.utils._logger import encoder_logger
from grounding.utils.utils import (
    BackendUnavailableError,
    BundleLoadError,
    ContractError,
    crop_and_resize,
    stable_seed,
)

TOY_PERTURBATION_NORM = 0.04
TOY_IMAGE_NOISE_NORM = 0.04
TOY_SECONDARY_WEIGHT = 0.3
TOY_CROP_SIZE = (64, 64)
CLIP_CROP_SIZE = (224, 224)

Color = tuple[float, float, float]

EMBEDDING_MAGIC = b"WGEMB\0"
EMBEDDING_VERSION = 1
_EMBEDDING_HEADER = struct.Struct("<6sHBQQ")
_MODALITY_CODES = {modality: code for code, modality in enumerate(Modality)}


class EmbeddingSet(BaseModel):
    """
    n d-dimensional embeddings of one modality, kept as a (n, d) tensor.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    modality: Modality
    vectors: torch.Tensor

    @field_validator("vectors")
    @classmethod
    def finite_matrix(cls, vectors: torch.Tensor) -> torch.Tensor:
        if vectors.dim() != 2:
            raise ValueError(f"vectors must be a (n, d) matrix, got shape {tuple(vectors.shape)}")
        if not bool(torch.isfinite(vectors).all()):
            raise ValueError("vectors contain NaN or Inf")
        return vectors

    @property
    def n(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return self.n


class ImageRegionEncoding(BaseModel):
    """
    The result of encoding a list of regions.

    `indices[i]` is the position in the input list of row i of `embeddings`; failed regions are
    only listed in `errors`, keyed by their input position.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    embeddings: EmbeddingSet
    indices: list[int]
    errors: dict[int, str] = Field(default_factory=dict)


def write_embedding_cache(path: Path, embeddings: EmbeddingSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = embeddings.vectors.detach().cpu().numpy().astype("<f4")
    header = _EMBEDDING_HEADER.pack(
        EMBEDDING_MAGIC,
        EMBEDDING_VERSION,
        _MODALITY_CODES[embeddings.modality],
        embeddings.n,
        embeddings.d,
    )
    path.write_bytes(header + np.ascontiguousarray(vectors).tobytes())


def read_embedding_cache(path: Path) -> EmbeddingSet:
    """
    Reads an embedding cache file.

    Raises:
        BundleLoadError: If the file is missing, has a foreign header or a wrong size.
    """
    path = Path(path)
    if not path.is_file():
        raise BundleLoadError(f"Missing file: {path}")
    data = path.read_bytes()
    if len(data) < _EMBEDDING_HEADER.size:
        raise BundleLoadError(f"Truncated header in {path}")
    magic, version, code, n, d = _EMBEDDING_HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC or version != EMBEDDING_VERSION:
        raise BundleLoadError(f"{path} is not a version {EMBEDDING_VERSION} embedding cache")
    if code >= len(Modality):
        raise BundleLoadError(f"{path} has unknown modality code {code}")
    expected = _EMBEDDING_HEADER.size + n * d * 4
    if len(data) != expected:
        raise BundleLoadError(f"{path} holds {len(data)} bytes, expected {expected}")
    vectors = np.frombuffer(data, dtype="<f4", offset=_EMBEDDING_HEADER.size).reshape(n, d)
    return EmbeddingSet(
        modality=list(Modality)[code], vectors=torch.from_numpy(vectors.astype(np.float32))
    )


class FrozenVLM(nn.Module):
    """
    Base class of the frozen text and image encoders sharing one embedding space.

    Subclasses implement `_encode_texts` and `_encode_crop`. Parameters never require gradients.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d

    def freeze(self) -> "FrozenVLM":
        self.eval()
        self.requires_grad_(False)
        return self

    def train(self, mode: bool = True) -> "FrozenVLM":
        # Frozen providers always stay in eval mode
        return super().train(False)

    @torch.no_grad()
    def encode_text(
        self, texts: Sequence[str], modality: Modality = Modality.TEXT_QUERY
    ) -> EmbeddingSet:
        """
        Encodes strings into one d-vector each.

        Args:
            texts (Sequence[str]): The strings; category labels are passed verbatim.
            modality (Modality): text_query or text_category.

        Returns:
            EmbeddingSet: A (len(texts), d) set.
        """
        if not texts:
            return EmbeddingSet(modality=modality, vectors=torch.zeros(0, self.d))
        return EmbeddingSet(modality=modality, vectors=self._encode_texts(list(texts)))

    @torch.no_grad()
    def encode_image_regions(
        self, frames: dict[int, Frame], regions: Sequence[Region2D]
    ) -> ImageRegionEncoding:
        """
        Crops every region from its frame and encodes it.

        Degenerate regions and regions naming an unknown frame are reported per region in
        `errors`; the caller decides whether to exclude them.

        Args:
            frames (dict[int, Frame]): Frames keyed by frame id.
            regions (Sequence[Region2D]): The regions to encode.

        Returns:
            ImageRegionEncoding: Embeddings of the successful regions with their input positions.
        """
        rows, indices, errors = [], [], {}
        for position, region in enumerate(regions):
            frame = frames.get(region.frame_id)
            if frame is None:
                errors[position] = f"unknown frame {region.frame_id}"
                continue
            try:
                rows.append(self._encode_crop(frame, region))
            except ValueError as e:
                errors[position] = str(e)
                continue
            indices.append(position)

        if errors:
            encoder_logger.warning(
                f"{len(errors)} of {len(regions)} image regions could not be encoded: {errors}"
            )
        vectors = torch.stack(rows) if rows else torch.zeros(0, self.d)
        return ImageRegionEncoding(
            embeddings=EmbeddingSet(modality=Modality.IMAGE_REGION, vectors=vectors),
            indices=indices,
            errors=errors,
        )

    @property
    def identity(self) -> str:
        """
        Names the provider and everything that shapes its embeddings; caches are keyed by it.
        """
        raise NotImplementedError

    def _encode_texts(self, texts: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def _encode_crop(self, frame: Frame, region: Region2D) -> torch.Tensor:
        raise NotImplementedError


class ToyVLM(FrozenVLM):
    """
    A deterministic stand-in for a vision-language model, aware of the category vocabulary.

    Category c is the basis vector e_c when K <= d, otherwise a seeded random unit vector. A text
    equal to a label maps to its category vector plus a small text-seeded perturbation; a text
    mentioning several labels mixes them with weight 1 for the first mention and 0.3 for the
    rest.

    Image regions are read through a color palette: the dominant category color in the crop
    selects the category text embedding, plus region-seeded noise. Pixels nearest to one of the
    `ignored_colors` count for no category. The default palette is the one `grounding.synthetic`
    paints scenes with, so without `category_colors` the image side only understands synthetic
    frames.
    """

    def __init__(
        self,
        vocabulary: CategoryVocabulary,
        d: int,
        seed: int = 0,
        category_colors: Optional[Sequence[Color]] = None,
        ignored_colors: Sequence[Color] = (FLOOR_COLOR, BACKGROUND_COLOR),
    ):
        super().__init__(d)
        self.labels = [label.lower() for label in vocabulary.labels]
        self.seed = seed
        k = len(self.labels)
        if category_colors is None:
            category_colors = [category_color(c) for c in range(k)]
        if len(category_colors) != k:
            raise ContractError(f"Got {len(category_colors)} category colors for {k} categories")
        if k <= d:
            basis = torch.eye(k, d)
        else:
            generator = torch.Generator().manual_seed(stable_seed("toy-basis", seed, k, d))
            basis = F.normalize(torch.randn(k, d, generator=generator), dim=1)
        self.register_buffer("basis", basis)
        colors = [tuple(color) for color in category_colors] + [tuple(c) for c in ignored_colors]
        self.register_buffer("reference_colors", torch.tensor(colors, dtype=torch.float32))
        # Longest labels first so that "side table" wins over "table" at the same position
        alternatives = sorted(self.labels, key=len, reverse=True)
        self._mention = re.compile(
            r"\b(" + "|".join(re.escape(label) for label in alternatives) + r")\b"
        )
        self.freeze()

    def _unit_noise(self, norm: float, *parts) -> torch.Tensor:
        generator = torch.Generator().manual_seed(stable_seed(self.seed, *parts))
        noise = torch.randn(self.d, generator=generator)
        return noise / noise.norm() * norm

    def mentioned_categories(self, text: str) -> list[int]:
        """
        Category ids mentioned in a text, in order of first mention.
        """
        found = []
        for match in self._mention.finditer(text.lower()):
            category_id = self.labels.index(match.group(1))
            if category_id not in found:
                found.append(category_id)
        return found

    def _embed_text(self, text: str) -> torch.Tensor:
        perturbation = self._unit_noise(TOY_PERTURBATION_NORM, "text", text)
        normalized = text.strip().lower()
        if normalized in self.labels:
            return self.basis[self.labels.index(normalized)] + perturbation
        mentioned = self.mentioned_categories(text)
        if not mentioned:
            return self._unit_noise(1.0, "unknown-text", text)
        weights = torch.full((len(mentioned),), TOY_SECONDARY_WEIGHT)
        weights[0] = 1.0
        mixed = (weights[:, None] * self.basis[mentioned]).sum(dim=0)
        return mixed / mixed.norm() + perturbation

    def _encode_texts(self, texts: list[str]) -> torch.Tensor:
        return torch.stack([self._embed_text(text) for text in texts])

    def dominant_category(self, crop: Image.Image) -> Optional[int]:
        """
        The category whose palette color covers most pixels of a crop, or None if none does.
        """
        pixels = torch.from_numpy(np.asarray(crop, dtype=np.float32).reshape(-1, 3) / 255.0)
        nearest = torch.cdist(pixels, self.reference_colors).argmin(dim=1)
        counts = torch.bincount(nearest, minlength=len(self.reference_colors))[: len(self.labels)]
        if int(counts.max()) == 0:
            return None
        return int(counts.argmax())

    @property
    def identity(self) -> str:
        palette = ",".join(f"{value:.4f}" for value in self.reference_colors.flatten().tolist())
        digest = hashlib.sha256(f"{'|'.join(self.labels)}#{palette}".encode("utf-8")).hexdigest()
        return f"toy/d={self.d}/seed={self.seed}/{digest[:16]}"

    def _encode_crop(self, frame: Frame, region: Region2D) -> torch.Tensor:
        crop = crop_and_resize(
            frame.image, region.rect, TOY_CROP_SIZE, resample=Image.Resampling.NEAREST
        )
        category_id = self.dominant_category(crop)
        if category_id is None:
            return self._unit_noise(1.0, "unknown-image", frame.frame_id, region.rect)
        return self._embed_text(self.labels[category_id]) + self._unit_noise(
            TOY_IMAGE_NOISE_NORM, "image", frame.frame_id, region.rect
        )


class ClipVLM(FrozenVLM):
    """
    A frozen open_clip model. The model name and pretrained weights come from the configuration.
    """

    def __init__(self, model_name: str, pretrained: str, d: int, device: str = "cpu"):
        super().__init__(d)
        try:
            import open_clip
        except ImportError as e:
            raise BackendUnavailableError(
                "The vlm backend needs the open_clip_torch package; install it or use the toy backend."
            ) from e
        try:
            self.model, _, self.preprocess = open_clip.create_model_and_transforms(
                model_name, pretrained=pretrained, device=device
            )
            self.tokenizer = open_clip.get_tokenizer(model_name)
        except Exception as e:
            raise BackendUnavailableError(
                f"Could not load open_clip model {model_name} ({pretrained}): {e}"
            ) from e
        self.model_name = model_name
        self.pretrained = pretrained
        self.device = device
        self.freeze()
        with torch.no_grad():
            width = self._encode_texts(["object"]).shape[1]
        if width != d:
            raise ContractError(
                f"open_clip model {model_name} embeds into {width} dimensions, the configuration says d={d}"
            )
        encoder_logger.info(f"Loaded open_clip model {model_name} ({pretrained}) on {device}")

    @property
    def identity(self) -> str:
        return f"open_clip/{self.model_name}/{self.pretrained}/d={self.d}"

    def _encode_texts(self, texts: list[str]) -> torch.Tensor:
        tokens = self.tokenizer(texts).to(self.device)
        return self.model.encode_text(tokens).float().cpu()

    def _encode_crop(self, frame: Frame, region: Region2D) -> torch.Tensor:
        crop = crop_and_resize(frame.image, region.rect, CLIP_CROP_SIZE)
        image = self.preprocess(crop).unsqueeze(0).to(self.device)
        return self.model.encode_image(image).float().cpu()[0]


def build_vlm(config: EncoderConfig, vocabulary: CategoryVocabulary) -> FrozenVLM:
    """
    Creates the frozen text/image provider named by the configuration.

    Raises:
        BackendUnavailableError: If the vlm backend cannot be loaded. There is no fallback to the toy backend.
    """
    if config.backend == "toy":
        return ToyVLM(vocabulary, config.d)
    return ClipVLM(config.vlm_model, config.vlm_pretrained, config.d)


def sample_proposal_points(
    scene: Scene,
    proposal: Proposal,
    count: int,
    seed: int,
    epoch: int = 0,
) -> np.ndarray:
    """
    Samples a fixed number of a proposal's points and normalizes them to its box.

    Sampling is uniform without replacement when the proposal holds at least `count` points and with
    replacement otherwise, seeded by (seed, scene, proposal, epoch). Coordinates are centered on the
    box center and divided by the box diagonal; colors are kept.

    Returns:
        np.ndarray: (count, 6) float32 rows.
    """
    points = scene.proposal_points(proposal)
    rng = np.random.default_rng(
        stable_seed("sample", seed, scene.scene_id, proposal.proposal_id, epoch)
    )
    chosen = rng.choice(len(points), size=count, replace=len(points) < count)
    sampled = points[chosen].astype(np.float64)
    diagonal = proposal.box3d.diagonal
    sampled[:, :3] = (sampled[:, :3] - proposal.box3d.center) / (diagonal if diagonal > 0 else 1.0)
    return sampled.astype(np.float32)


def square_distance(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """
    Pairwise squared distances, (B, N, C) x (B, S, C) -> (B, N, S).
    """
    return ((src[:, :, None, :] - dst[:, None, :, :]) ** 2).sum(-1)


def index_points(points: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """
    Gathers points by index: (B, N, C) with (B, ...) indices -> (B, ..., C).
    """
    batch = torch.arange(points.shape[0], device=points.device).view(
        -1, *([1] * (idx.dim() - 1))
    )
    return points[batch.expand_as(idx), idx]


def farthest_point_sample(xyz: torch.Tensor, npoint: int) -> torch.Tensor:
    """
    Farthest point sampling starting from the first point, so results are deterministic.

    Returns:
        torch.Tensor: (B, npoint) indices.
    """
    b, n, _ = xyz.shape
    centroids = torch.zeros(b, npoint, dtype=torch.long, device=xyz.device)
    distance = torch.full((b, n), float("inf"), dtype=xyz.dtype, device=xyz.device)
    farthest = torch.zeros(b, dtype=torch.long, device=xyz.device)
    batch = torch.arange(b, device=xyz.device)
    with torch.no_grad():
        for i in range(npoint):
            centroids[:, i] = farthest
            centroid = xyz[batch, farthest].view(b, 1, 3)
            distance = torch.minimum(distance, ((xyz - centroid) ** 2).sum(-1))
            farthest = distance.argmax(-1)
    return centroids


def query_ball_point(
    radius: float, nsample: int, xyz: torch.Tensor, new_xyz: torch.Tensor
) -> torch.Tensor:
    """
    For every center, the first `nsample` points within `radius`, padded with the first hit.

    Returns:
        torch.Tensor: (B, S, nsample) indices.
    """
    b, n, _ = xyz.shape
    s = new_xyz.shape[1]
    with torch.no_grad():
        group_idx = torch.arange(n, device=xyz.device).view(1, 1, n).repeat(b, s, 1)
        group_idx[square_distance(new_xyz, xyz) > radius**2] = n
        group_idx = group_idx.sort(dim=-1)[0][:, :, :nsample]
        first = group_idx[:, :, :1].expand_as(group_idx)
        padding = group_idx == n
        group_idx[padding] = first[padding]
    return group_idx


class SetAbstraction(nn.Module):
    """
    One set abstraction level: sample centers, group neighbours, shared MLP, max pool.

    With `group_all`, the whole set is one group around the origin.
    """

    def __init__(
        self,
        npoint: Optional[int],
        radius: float,
        nsample: int,
        in_channels: int,
        widths: Sequence[int],
        group_all: bool = False,
    ):
        super().__init__()
        self.npoint = npoint
        self.radius = radius
        self.nsample = nsample
        self.group_all = group_all
        layers = []
        last = in_channels + 3
        for width in widths:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        self.mlp = nn.Sequential(*layers)

    def forward(
        self, xyz: torch.Tensor, features: Optional[torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            xyz (torch.Tensor): (B, N, 3) coordinates.
            features (torch.Tensor | None): (B, N, D) point features.

        Returns:
            tuple[torch.Tensor, torch.Tensor]: (B, S, 3) centers and (B, S, widths[-1]) features.
        """
        if self.group_all:
            new_xyz = torch.zeros(xyz.shape[0], 1, 3, dtype=xyz.dtype, device=xyz.device)
            grouped_xyz = xyz[:, None]
            grouped = grouped_xyz if features is None else torch.cat([grouped_xyz, features[:, None]], -1)
        else:
            new_xyz = index_points(xyz, farthest_point_sample(xyz, self.npoint))
            idx = query_ball_point(self.radius, self.nsample, xyz, new_xyz)
            grouped_xyz = index_points(xyz, idx) - new_xyz[:, :, None]
            grouped = (
                grouped_xyz
                if features is None
                else torch.cat([grouped_xyz, index_points(features, idx)], -1)
            )
        return new_xyz, self.mlp(grouped).max(dim=2)[0]


class SetAbstractionBackbone(nn.Module):
    """
    A hierarchical point set encoder: two sampling-and-grouping levels and a global level.

    Coordinates are expected in box-normalized units, which fixes the grouping radii.
    """

    def __init__(self, sample_count: int, d: int, in_features: int = 3):
        super().__init__()
        npoint1 = max(1, sample_count // 8)
        npoint2 = max(1, sample_count // 32)
        self.levels = nn.ModuleList(
            [
                SetAbstraction(npoint1, 0.2, min(32, sample_count), in_features, (64, 64, 128)),
                SetAbstraction(npoint2, 0.4, min(64, npoint1), 128, (128, 128, 256)),
                SetAbstraction(None, 0.0, 0, 256, (256, d), group_all=True),
            ]
        )

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        xyz, features = points[..., :3], points[..., 3:]
        for level in self.levels:
            xyz, features = level(xyz, features)
        return features[:, 0]


class SharedMLPBackbone(nn.Module):
    """
    A two-layer shared MLP over points followed by max pooling.
    """

    def __init__(self, d: int, in_channels: int = 6, hidden: int = 128):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_channels, hidden), nn.ReLU(), nn.Linear(hidden, d)
        )

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.mlp(points).max(dim=1)[0]


class ProposalEncoder(nn.Module):
    """
    The trainable 3D encoder: per-proposal point backbone, then a transformer across the
    proposals of a scene. There is no positional encoding, so the output is equivariant to
    proposal order.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        if config.point_backbone == "pointnet2":
            self.backbone = SetAbstractionBackbone(config.point_sample_count, config.d)
        else:
            self.backbone = SharedMLPBackbone(config.d)
        if config.transformer_layers > 0:
            layer = nn.TransformerEncoderLayer(
                d_model=config.d,
                nhead=config.transformer_heads,
                dim_feedforward=2 * config.d,
                dropout=0.0,
                batch_first=True,
            )
            self.transformer = nn.TransformerEncoder(
                layer, num_layers=config.transformer_layers, enable_nested_tensor=False
            )
        else:
            self.transformer = nn.Identity()

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """
        Args:
            points (torch.Tensor): (M, S, 6) sampled, normalized proposal points of one scene.

        Returns:
            torch.Tensor: (M, d) proposal embeddings.
        """
        tokens = self.backbone(points)
        return self.transformer(tokens[None])[0]

    def sample_scene(
        self, scene: Scene, proposals: Sequence[Proposal], epoch: int = 0
    ) -> torch.Tensor:
        """
        Samples the proposals of a scene into a (M, S, 6) tensor of the module's dtype.
        """
        dtype = next(self.parameters()).dtype
        batch = np.stack(
            [
                sample_proposal_points(
                    scene, proposal, self.config.point_sample_count, self.config.seed, epoch
                )
                for proposal in proposals
            ]
        )
        return torch.as_tensor(batch, dtype=dtype)


@timeit
def encode_proposals(
    scene: Scene,
    proposals: Sequence[Proposal],
    encoder: ProposalEncoder,
    epoch: int = 0,
) -> EmbeddingSet:
    """
    Encodes proposals of a scene with the trainable 3D encoder. Differentiable in its parameters.

    Args:
        scene (Scene): The scene holding the points.
        proposals (Sequence[Proposal]): The proposals, encoded jointly.
        encoder (ProposalEncoder): The trainable encoder.
        epoch (int): Selects the point sample; inference uses epoch 0.

    Returns:
        EmbeddingSet: (M, d) point proposal embeddings.
    """
    if not proposals:
        dtype = next(encoder.parameters()).dtype
        return EmbeddingSet(
            modality=Modality.POINT_PROPOSAL, vectors=torch.zeros(0, encoder.config.d, dtype=dtype)
        )
    vectors = encoder(encoder.sample_scene(scene, proposals, epoch))
    return EmbeddingSet(modality=Modality.POINT_PROPOSAL, vectors=vectors)
