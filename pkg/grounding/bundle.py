import struct
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import ValidationError

from decorators import timeit
from grounding.schemas import Record
from grounding.scene import (
    AxisAlignedBox3D,
    CategoryVocabulary,
    Frame,
    GroundingQuery,
    Proposal,
    Scene,
)
from grounding.utils._logger import scene_logger
from grounding.utils.utils import (
    BundleLoadError,
    SceneValidationError,
    load_rgb_image,
    read_json,
    save_rgb_image,
    write_json,
)

POINTS_FILE = "points.bin"
PROPOSALS_FILE = "proposals.json"
QUERIES_FILE = "queries.json"
CATEGORIES_FILE = "categories.json"
FRAMES_DIR = "frames"

_COUNT_HEADER = struct.Struct("<Q")
_DEPTH_HEADER = struct.Struct("<QQ")


def _read_points(path: Path) -> np.ndarray:
    if not path.is_file():
        raise BundleLoadError(f"Missing file: {path}")
    data = path.read_bytes()
    if len(data) < _COUNT_HEADER.size:
        raise BundleLoadError(f"Truncated header in {path}")
    (n,) = _COUNT_HEADER.unpack_from(data)
    expected = _COUNT_HEADER.size + n * 6 * 4
    if len(data) != expected:
        raise BundleLoadError(
            f"{path} holds {len(data)} bytes, expected {expected} for {n} points"
        )
    return (
        np.frombuffer(data, dtype="<f4", offset=_COUNT_HEADER.size)
        .reshape(n, 6)
        .astype(np.float32)
    )


def _write_points(path: Path, points: np.ndarray) -> None:
    points = np.ascontiguousarray(points, dtype="<f4")
    path.write_bytes(_COUNT_HEADER.pack(points.shape[0]) + points.tobytes())


def _read_depth(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise BundleLoadError(f"Truncated header in {path}")
    height, width = _DEPTH_HEADER.unpack_from(data)
    expected = _DEPTH_HEADER.size + height * width * 4
    if len(data) != expected:
        raise BundleLoadError(
            f"{path} holds {len(data)} bytes, expected {expected} for a {width}x{height} raster"
        )
    return (
        np.frombuffer(data, dtype="<f4", offset=_DEPTH_HEADER.size)
        .reshape(height, width)
        .astype(np.float32)
    )


def _write_depth(path: Path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    path.write_bytes(_DEPTH_HEADER.pack(*depth.shape) + depth.tobytes())


def _parse(record_type, document, path: Path):
    try:
        return record_type.model_validate(document)
    except ValidationError as e:
        raise BundleLoadError(f"Malformed record in {path}: {e}") from e


def _frame_id(camera_file: Path) -> int:
    stem = camera_file.name.split(".")[0]
    try:
        return int(stem)
    except ValueError as e:
        raise BundleLoadError(
            f"Frame file {camera_file} must be named <integer id>.cam.json"
        ) from e


def _load_frames(frames_dir: Path) -> list[Frame]:
    frames = []
    camera_files = sorted(frames_dir.glob("*.cam.json"), key=_frame_id)
    for camera_file in camera_files:
        frame_id = _frame_id(camera_file)
        camera = _parse(Record.Camera, read_json(camera_file), camera_file)
        image = load_rgb_image(frames_dir / f"{frame_id}.png")
        if image.shape[:2] != (camera.height, camera.width):
            raise SceneValidationError(
                f"Frame {frame_id}: image is {image.shape[1]}x{image.shape[0]}, calibration says {camera.width}x{camera.height}"
            )
        depth_file = frames_dir / f"{frame_id}.depth.bin"
        depth = _read_depth(depth_file) if depth_file.is_file() else None
        frames.append(
            Frame(
                frame_id=frame_id,
                image=image,
                intrinsics=np.asarray(camera.intrinsics, dtype=np.float64).reshape(3, 3),
                extrinsics=np.asarray(camera.extrinsics, dtype=np.float64).reshape(4, 4),
                depth=depth,
            )
        )
    return frames


@timeit
def load_scene_bundle(
    path: Path, mode: Literal["training", "inference"] = "inference"
) -> Scene:
    """
    Loads a scene bundle directory.

    The bundle holds `points.bin`, `proposals.json`, `queries.json`, `categories.json` and a
    `frames/` directory with `<id>.png`, `<id>.cam.json` and optionally `<id>.depth.bin` per frame.
    In inference mode the frames directory may be missing or empty.

    Args:
        path (Path): The bundle directory; its name is the scene id.
        mode (str): "training" requires at least one frame, "inference" does not.

    Returns:
        Scene: The validated scene.

    Raises:
        BundleLoadError: If a file is missing or malformed. The message names the file.
        SceneValidationError: If the content breaks an invariant. The message names the proposal, frame or query.
    """
    path = Path(path)
    if not path.is_dir():
        raise BundleLoadError(f"Missing scene bundle directory: {path}")

    points = _read_points(path / POINTS_FILE)
    categories = read_json(path / CATEGORIES_FILE)
    proposals_path = path / PROPOSALS_FILE
    proposals = [
        _parse(Record.Proposal, document, proposals_path)
        for document in read_json(proposals_path)
    ]
    queries_path = path / QUERIES_FILE
    queries = [
        _parse(Record.Query, document, queries_path)
        for document in read_json(queries_path)
    ]

    frames_dir = path / FRAMES_DIR
    frames = _load_frames(frames_dir) if frames_dir.is_dir() else []
    if mode == "training" and not frames:
        raise SceneValidationError(
            f"Scene {path.name}: training needs at least one frame, found none in {frames_dir}"
        )

    try:
        scene = Scene(
            scene_id=path.name,
            points=points,
            categories=CategoryVocabulary(labels=tuple(categories)),
            proposals=tuple(
                Proposal(
                    proposal_id=record.id,
                    point_indices=tuple(record.point_indices),
                    box3d=AxisAlignedBox3D(min=record.box_min, max=record.box_max),
                    category_id=record.category_id,
                )
                for record in proposals
            ),
            frames=tuple(frames),
            queries=tuple(
                GroundingQuery(
                    query_id=record.id,
                    text=record.text,
                    target_category_id=record.target_category_id,
                    target_proposal_id=record.target_proposal_id,
                    view_dependent=record.view_dependent,
                    distractor_count=record.distractor_count,
                )
                for record in queries
            ),
        )
    except ValidationError as e:
        raise SceneValidationError(f"Scene {path.name}: {e}") from e

    scene_logger.info(
        f"Loaded scene {scene.scene_id}: N={scene.num_points} M={len(scene.proposals)} "
        f"L={scene.num_frames} queries={len(scene.queries)}"
    )
    return scene


def write_scene_bundle(scene: Scene, path: Path) -> Path:
    """
    Writes a scene as a bundle directory that `load_scene_bundle` reads back to an equal scene.

    Args:
        scene (Scene): The scene to write.
        path (Path): The bundle directory. Its name should be the scene id.

    Returns:
        Path: The bundle directory.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if path.name != scene.scene_id:
        scene_logger.warning(
            f"Bundle directory {path.name} differs from scene id {scene.scene_id}; the directory name wins on load."
        )

    _write_points(path / POINTS_FILE, scene.points)
    write_json(path / CATEGORIES_FILE, list(scene.categories.labels))
    write_json(
        path / PROPOSALS_FILE,
        [
            Record.Proposal(
                id=proposal.proposal_id,
                point_indices=list(proposal.point_indices),
                box_min=proposal.box3d.min,
                box_max=proposal.box3d.max,
                category_id=proposal.category_id,
            ).model_dump(exclude_none=True)
            for proposal in scene.proposals
        ],
    )
    write_json(
        path / QUERIES_FILE,
        [
            Record.Query(
                id=query.query_id,
                text=query.text,
                target_category_id=query.target_category_id,
                target_proposal_id=query.target_proposal_id,
                view_dependent=query.view_dependent,
                distractor_count=query.distractor_count,
            ).model_dump(exclude_none=True)
            for query in scene.queries
        ],
    )

    frames_dir = path / FRAMES_DIR
    frames_dir.mkdir(exist_ok=True)
    for frame in scene.frames:
        save_rgb_image(frames_dir / f"{frame.frame_id}.png", frame.image)
        write_json(
            frames_dir / f"{frame.frame_id}.cam.json",
            Record.Camera(
                intrinsics=frame.intrinsics.reshape(-1).tolist(),
                extrinsics=frame.extrinsics.reshape(-1).tolist(),
                width=frame.width,
                height=frame.height,
            ).model_dump(),
        )
        if frame.depth is not None:
            _write_depth(frames_dir / f"{frame.frame_id}.depth.bin", frame.depth)
    return path


def discover_bundles(scenes_dir: Path) -> list[Path]:
    """
    Lists the scene bundle directories under a dataset directory, sorted by name.
    """
    scenes_dir = Path(scenes_dir)
    if not scenes_dir.is_dir():
        raise BundleLoadError(f"Missing scenes directory: {scenes_dir}")
    return sorted(p for p in scenes_dir.iterdir() if (p / POINTS_FILE).is_file())
