import hashlib
from typing import Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    field_validator,
    model_validator,
)

from decorators import target_audit
from grounding.utils.utils import SceneValidationError

POINT_TOLERANCE = 1e-6
ORTHONORMAL_TOLERANCE = 1e-5


class AxisAlignedBox3D(BaseModel):
    model_config = ConfigDict(frozen=True)

    min: tuple[float, float, float]
    max: tuple[float, float, float]

    @model_validator(mode="after")
    def ordered(self):
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"box min {self.min} exceeds max {self.max}")
        return self

    @classmethod
    def from_points(cls, xyz: np.ndarray) -> "AxisAlignedBox3D":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return cls(
            min=tuple(float(v) for v in xyz.min(axis=0)),
            max=tuple(float(v) for v in xyz.max(axis=0)),
        )

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min) + np.asarray(self.max)) / 2.0

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.max) - np.asarray(self.min)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def contains(self, xyz: np.ndarray, tolerance: float = POINT_TOLERANCE) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return np.all(
            (xyz >= np.asarray(self.min) - tolerance)
            & (xyz <= np.asarray(self.max) + tolerance),
            axis=1,
        )


class Proposal(BaseModel):
    model_config = ConfigDict(frozen=True)

    proposal_id: int
    point_indices: tuple[int, ...] = Field(min_length=1)
    box3d: AxisAlignedBox3D
    category_id: Optional[int] = Field(None, ge=0)

    @field_validator("point_indices")
    @classmethod
    def non_negative(cls, indices: tuple[int, ...]) -> tuple[int, ...]:
        if min(indices) < 0:
            raise ValueError("point indices must be non-negative")
        return indices


class Frame(BaseModel):
    """
    One calibrated view: an RGB raster, pinhole intrinsics and a world-to-camera pose.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    frame_id: int
    image: np.ndarray
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    depth: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def calibrated(self):
        name = f"Frame {self.frame_id}"
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise SceneValidationError(f"{name}: image must be an (H, W, 3) uint8 raster")
        if self.image.shape[0] < 1 or self.image.shape[1] < 1:
            raise SceneValidationError(f"{name}: image must be at least 1x1")
        if self.intrinsics.shape != (3, 3) or self.extrinsics.shape != (4, 4):
            raise SceneValidationError(f"{name}: intrinsics must be 3x3 and extrinsics 4x4")
        if not (self.intrinsics[0, 0] > 0 and self.intrinsics[1, 1] > 0):
            raise SceneValidationError(f"{name}: focal lengths must be positive")
        rotation = self.extrinsics[:3, :3]
        error = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if not error < ORTHONORMAL_TOLERANCE:
            raise SceneValidationError(
                f"{name}: extrinsics rotation is not orthonormal (error {error:.2e})"
            )
        if self.depth is not None and self.depth.shape != self.image.shape[:2]:
            raise SceneValidationError(f"{name}: depth raster does not match the image size")
        return self

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        same_depth = (self.depth is None and other.depth is None) or (
            self.depth is not None
            and other.depth is not None
            and np.array_equal(self.depth, other.depth)
        )
        return (
            self.frame_id == other.frame_id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.extrinsics, other.extrinsics)
            and same_depth
        )


class GroundingQuery(BaseModel):
    """
    A referring expression with its weak label.

    The annotated target proposal is kept private and only reachable through the
    `target_proposal_id` property, whose reads are recorded by the target access audit.
    """

    model_config = ConfigDict(frozen=True)

    query_id: str
    text: str = Field(min_length=1)
    target_category_id: int = Field(ge=0)
    view_dependent: Optional[bool] = None
    distractor_count: Optional[int] = Field(None, ge=0)

    _target_proposal_id: Optional[int] = PrivateAttr(default=None)

    def __init__(self, target_proposal_id: Optional[int] = None, **data):
        super().__init__(**data)
        self._target_proposal_id = target_proposal_id

    @field_validator("text")
    @classmethod
    def not_blank(cls, text: str) -> str:
        if not text.strip():
            raise ValueError("query text must not be blank")
        return text

    @property
    def target_proposal_id(self) -> Optional[int]:
        target_audit.record(self.query_id)
        return self._target_proposal_id

    @property
    def has_target(self) -> bool:
        return self._target_proposal_id is not None


class CategoryVocabulary(BaseModel):
    model_config = ConfigDict(frozen=True)

    labels: tuple[str, ...] = Field(min_length=1)

    @field_validator("labels")
    @classmethod
    def unique_and_named(cls, labels: tuple[str, ...]) -> tuple[str, ...]:
        if any(not label.strip() for label in labels):
            raise ValueError("category labels must be non-empty")
        if len(set(labels)) != len(labels):
            raise ValueError("category labels must be unique")
        return labels

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


class Scene(BaseModel):
    """
    An indoor point cloud with its proposal candidates, calibrated frames and grounding queries.

    Points are float32 (N, 6) rows of x, y, z in meters followed by r, g, b in [0, 1].
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scene_id: str
    points: np.ndarray
    proposals: tuple[Proposal, ...]
    frames: tuple[Frame, ...] = ()
    queries: tuple[GroundingQuery, ...] = ()
    categories: CategoryVocabulary

    @field_validator("points")
    @classmethod
    def as_float32(cls, points: np.ndarray) -> np.ndarray:
        points = np.ascontiguousarray(points, dtype=np.float32)
        if points.ndim != 2 or points.shape[1] != 6 or points.shape[0] < 1:
            raise SceneValidationError(f"points must be an (N, 6) array with N >= 1, got {points.shape}")
        return points

    @model_validator(mode="after")
    def consistent(self):
        validate_scene(self)
        return self

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def proposal(self, proposal_id: int) -> Proposal:
        for proposal in self.proposals:
            if proposal.proposal_id == proposal_id:
                return proposal
        raise KeyError(proposal_id)

    def proposal_points(self, proposal: Proposal) -> np.ndarray:
        return self.points[np.asarray(proposal.point_indices, dtype=np.int64)]

    def content_digest(self) -> str:
        """
        Hashes what projection and region encoding read: points, proposal memberships and frames.

        Queries and labels are left out, so relabelling a scene keeps its digest.

        Returns:
            str: The first 16 hex characters of the SHA-256 digest.
        """
        sha = hashlib.sha256()
        sha.update(np.ascontiguousarray(self.points, dtype="<f4").tobytes())
        for proposal in self.proposals:
            sha.update(f"proposal {proposal.proposal_id}:".encode("utf-8"))
            sha.update(np.asarray(proposal.point_indices, dtype="<i8").tobytes())
        for frame in self.frames:
            sha.update(f"frame {frame.frame_id}:".encode("utf-8"))
            sha.update(np.ascontiguousarray(frame.image, dtype=np.uint8).tobytes())
            sha.update(np.ascontiguousarray(frame.intrinsics, dtype="<f8").tobytes())
            sha.update(np.ascontiguousarray(frame.extrinsics, dtype="<f8").tobytes())
            if frame.depth is not None:
                sha.update(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
        return sha.hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.points, other.points)
            and self.proposals == other.proposals
            and self.frames == other.frames
            and self.queries == other.queries
            and self.categories == other.categories
        )


def validate_scene(scene: Scene) -> None:
    """
    Checks the cross-object invariants of a scene.

    Args:
        scene (Scene): The scene to check.

    Raises:
        SceneValidationError: Naming the first offending proposal, frame or query.
    """
    n = scene.num_points
    k = scene.num_categories
    proposal_ids = set()
    for proposal in scene.proposals:
        name = f"Proposal {proposal.proposal_id} of scene {scene.scene_id}"
        if proposal.proposal_id in proposal_ids:
            raise SceneValidationError(f"{name}: duplicate proposal id")
        proposal_ids.add(proposal.proposal_id)
        if max(proposal.point_indices) >= n:
            raise SceneValidationError(
                f"{name}: point index {max(proposal.point_indices)} out of range for {n} points"
            )
        if proposal.category_id is not None and proposal.category_id >= k:
            raise SceneValidationError(
                f"{name}: category {proposal.category_id} out of range for {k} categories"
            )
        inside = proposal.box3d.contains(scene.proposal_points(proposal)[:, :3])
        if not inside.all():
            outside = int(np.flatnonzero(~inside)[0])
            raise SceneValidationError(
                f"{name}: point {proposal.point_indices[outside]} lies outside its box"
            )

    frame_ids = [frame.frame_id for frame in scene.frames]
    if len(set(frame_ids)) != len(frame_ids):
        raise SceneValidationError(f"Scene {scene.scene_id}: duplicate frame ids {frame_ids}")

    query_ids = set()
    for query in scene.queries:
        name = f"Query {query.query_id} of scene {scene.scene_id}"
        if query.query_id in query_ids:
            raise SceneValidationError(f"{name}: duplicate query id")
        query_ids.add(query.query_id)
        if query.target_category_id >= k:
            raise SceneValidationError(
                f"{name}: target category {query.target_category_id} out of range for {k} categories"
            )
        # Read the private field so that validation never shows up in the access audit
        target = query._target_proposal_id
        if target is not None and target not in proposal_ids:
            raise SceneValidationError(f"{name}: target proposal {target} does not exist")
