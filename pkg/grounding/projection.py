from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from decorators import timeit
from grounding.schemas import ExtensionMode, Record
from grounding.scene import AxisAlignedBox3D, Frame, Proposal, Scene
from grounding.utils._logger import projection_logger
from grounding.utils.utils import BundleLoadError, Rect, read_json, write_json

DEPTH_TOLERANCE = 0.10
EXTENSION_RATIO = 0.2
REGIONS_FILE = "regions.json"


class Region2D(BaseModel):
    """
    The image rectangle a proposal projects to in its best frame.
    """

    model_config = ConfigDict(frozen=True)

    frame_id: int
    rect: tuple[float, float, float, float]
    visible_point_count: int

    @field_validator("rect")
    @classmethod
    def non_negative_size(cls, rect: Rect) -> Rect:
        if rect[2] < 0 or rect[3] < 0:
            raise ValueError(f"rect width and height must be >= 0, got {rect}")
        return rect

    @field_validator("visible_point_count")
    @classmethod
    def non_negative_count(cls, count: int) -> int:
        if count < 0:
            raise ValueError("visible_point_count must be >= 0")
        return count


def project_points(
    points: np.ndarray, frame: Frame, use_depth_visibility: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """
    Projects world points into a frame with its pinhole calibration.

    A point is visible when it lies in front of the camera and inside the image; with
    `use_depth_visibility` and a depth raster, it must also be within 0.10 m of the measured depth.
    Pixels without a depth measurement (depth <= 0) do not occlude.

    Args:
        points (np.ndarray): (P, 3) world coordinates in meters.
        frame (Frame): The calibrated frame.
        use_depth_visibility (bool): Whether to test against the depth raster.

    Returns:
        tuple[np.ndarray, np.ndarray]: (P, 2) float64 (u, v) pixel coordinates, NaN behind the
        camera, and a (P,) boolean visibility mask.
    """
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    camera = xyz @ frame.extrinsics[:3, :3].T + frame.extrinsics[:3, 3]
    z = camera[:, 2]
    in_front = z > 0

    uv = np.full((xyz.shape[0], 2), np.nan)
    fx, fy = frame.intrinsics[0, 0], frame.intrinsics[1, 1]
    cx, cy = frame.intrinsics[0, 2], frame.intrinsics[1, 2]
    uv[in_front, 0] = fx * camera[in_front, 0] / z[in_front] + cx
    uv[in_front, 1] = fy * camera[in_front, 1] / z[in_front] + cy

    visible = in_front.copy()
    visible[in_front] = (
        (uv[in_front, 0] >= 0)
        & (uv[in_front, 0] < frame.width)
        & (uv[in_front, 1] >= 0)
        & (uv[in_front, 1] < frame.height)
    )

    if use_depth_visibility and frame.depth is not None and visible.any():
        index = np.flatnonzero(visible)
        cols = np.floor(uv[index, 0]).astype(np.int64)
        rows = np.floor(uv[index, 1]).astype(np.int64)
        measured = frame.depth[rows, cols].astype(np.float64)
        occluded = (measured > 0) & (np.abs(z[index] - measured) > DEPTH_TOLERANCE)
        visible[index[occluded]] = False

    return uv, visible


def extend_rect(
    rect: Rect, extension_mode: ExtensionMode, width: int, height: int
) -> Rect:
    """
    Applies the boundary extension and clamps the rectangle to the image.

    Boundary extension keeps the top-left corner and grows width and height by 20%.

    Args:
        rect (Rect): (x, y, w, h) in pixels.
        extension_mode (ExtensionMode): none or boundary_extended.
        width (int): Image width.
        height (int): Image height.

    Returns:
        Rect: The extended and clamped rectangle.
    """
    x, y, w, h = rect
    if ExtensionMode(extension_mode) is ExtensionMode.BOUNDARY_EXTENDED:
        w, h = w + EXTENSION_RATIO * w, h + EXTENSION_RATIO * h
    left, top = max(x, 0.0), max(y, 0.0)
    right, bottom = min(x + w, float(width)), min(y + h, float(height))
    return (
        float(left),
        float(top),
        float(max(0.0, right - left)),
        float(max(0.0, bottom - top)),
    )


def _tight_rect(uv: np.ndarray) -> Rect:
    # Bounds of the pixel cells holding the points, so a single point spans one pixel
    left, top = np.floor(uv.min(axis=0))
    right, bottom = np.floor(uv.max(axis=0)) + 1.0
    return float(left), float(top), float(right - left), float(bottom - top)


def _region_from_counts(
    counts: list[int],
    frames: tuple[Frame, ...],
    visible_uv: list[np.ndarray],
    extension_mode: ExtensionMode,
) -> Optional[Region2D]:
    if not counts or max(counts) == 0:
        return None
    best = int(np.argmax(counts))
    frame = frames[best]
    rect = extend_rect(
        _tight_rect(visible_uv[best]), extension_mode, frame.width, frame.height
    )
    return Region2D(frame_id=frame.frame_id, rect=rect, visible_point_count=counts[best])


def best_frame_region(
    proposal: Proposal,
    scene: Scene,
    extension_mode: ExtensionMode = ExtensionMode.BOUNDARY_EXTENDED,
    use_depth_visibility: bool = False,
) -> Optional[Region2D]:
    """
    Finds the frame that sees most of a proposal's points and the region they cover there.

    Ties go to the frame listed first in the scene.

    Args:
        proposal (Proposal): The proposal to project.
        scene (Scene): Its scene.
        extension_mode (ExtensionMode): Whether to extend the tight rectangle.
        use_depth_visibility (bool): Whether to test visibility against depth rasters.

    Returns:
        Region2D | None: None when no frame sees any point of the proposal.
    """
    xyz = scene.proposal_points(proposal)[:, :3]
    counts, visible_uv = [], []
    for frame in scene.frames:
        uv, visible = project_points(xyz, frame, use_depth_visibility)
        counts.append(int(visible.sum()))
        visible_uv.append(uv[visible])
    return _region_from_counts(counts, scene.frames, visible_uv, extension_mode)


@timeit
def compute_scene_regions(
    scene: Scene,
    extension_mode: ExtensionMode = ExtensionMode.BOUNDARY_EXTENDED,
    use_depth_visibility: bool = False,
) -> dict[int, Region2D]:
    """
    Computes the best-frame region of every proposal of a scene.

    Each frame projects the whole point cloud once. Proposals that no frame sees are left out
    of the mapping and logged as unpaired.

    Returns:
        dict[int, Region2D]: Regions keyed by proposal id, in proposal order.
    """
    projections = [
        project_points(scene.points[:, :3], frame, use_depth_visibility)
        for frame in scene.frames
    ]
    regions = {}
    unpaired = []
    for proposal in scene.proposals:
        index = np.asarray(proposal.point_indices, dtype=np.int64)
        counts, visible_uv = [], []
        for uv, visible in projections:
            mask = visible[index]
            counts.append(int(mask.sum()))
            visible_uv.append(uv[index][mask])
        region = _region_from_counts(counts, scene.frames, visible_uv, extension_mode)
        if region is None:
            unpaired.append(proposal.proposal_id)
        else:
            regions[proposal.proposal_id] = region

    if unpaired:
        projection_logger.warning(
            f"Scene {scene.scene_id}: proposals {unpaired} are not visible in any frame and stay unpaired."
        )
    return regions


def iou_2d(a: Rect, b: Rect) -> float:
    """
    Intersection over union of two (x, y, w, h) rectangles; 0 when both are degenerate.
    """
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    inter_w = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    inter_h = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    intersection = inter_w * inter_h
    union = aw * ah + bw * bh - intersection
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, intersection / union)))


def iou_3d(a: AxisAlignedBox3D, b: AxisAlignedBox3D) -> float:
    """
    Volumetric intersection over union of two axis-aligned boxes; 0 when both are degenerate.
    """
    low = np.maximum(np.asarray(a.min), np.asarray(b.min))
    high = np.minimum(np.asarray(a.max), np.asarray(b.max))
    intersection = float(np.prod(np.clip(high - low, 0.0, None)))
    union = a.volume + b.volume - intersection
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, intersection / union)))


def regions_cache_path(
    cache_dir: Path, scene_id: str, extension_mode: ExtensionMode
) -> Path:
    return Path(cache_dir) / "scenes" / scene_id / ExtensionMode(extension_mode).value / REGIONS_FILE


def regions_key(
    scene: Scene,
    extension_mode: ExtensionMode,
    use_depth_visibility: bool,
    provider: Optional[str] = None,
) -> Record.RegionsKey:
    return Record.RegionsKey(
        extension_mode=extension_mode,
        use_depth_visibility=use_depth_visibility,
        scene_digest=scene.content_digest(),
        provider=provider,
    )


def stale_key_fields(cached: Record.RegionsKey, expected: Record.RegionsKey) -> list[str]:
    """
    The key fields in which a cache differs from what the caller would compute now.
    """
    return [
        name
        for name in Record.RegionsKey.model_fields
        if getattr(cached, name) != getattr(expected, name)
    ]


def write_regions(
    path: Path,
    scene_id: str,
    key: Record.RegionsKey,
    regions: dict[int, Region2D],
    stamp: Record.Stamp,
) -> None:
    document = Record.RegionsFile(
        stamp=stamp,
        scene_id=scene_id,
        key=key,
        regions=[
            Record.Region(
                proposal_id=proposal_id,
                frame_id=region.frame_id,
                rect=region.rect,
                visible_point_count=region.visible_point_count,
            )
            for proposal_id, region in regions.items()
        ],
    )
    write_json(path, document.model_dump(mode="json"))


def read_regions(path: Path) -> tuple[Record.RegionsFile, dict[int, Region2D]]:
    """
    Reads a regions cache.

    Returns:
        tuple[Record.RegionsFile, dict[int, Region2D]]: The raw document (for its stamp and key) and the
        regions keyed by proposal id.

    Raises:
        BundleLoadError: If the file is missing or malformed.
    """
    try:
        document = Record.RegionsFile.model_validate(read_json(path))
    except ValidationError as e:
        raise BundleLoadError(f"Malformed regions cache {path}: {e}") from e
    regions = {
        record.proposal_id: Region2D(
            frame_id=record.frame_id,
            rect=record.rect,
            visible_point_count=record.visible_point_count,
        )
        for record in document.regions
    }
    return document, regions
