import colorsys
import math
from typing import Optional

import numpy as np

from decorators import timeit
from grounding.scene import (
    AxisAlignedBox3D,
    CategoryVocabulary,
    Frame,
    GroundingQuery,
    Proposal,
    Scene,
)
from grounding.utils._logger import scene_logger

CATEGORY_NAMES = [
    "chair",
    "table",
    "bed",
    "sofa",
    "cabinet",
    "desk",
    "lamp",
    "bookshelf",
    "toilet",
    "sink",
    "bathtub",
    "refrigerator",
    "monitor",
    "trash can",
    "door",
    "window",
]

# Colors the toy image encoder recognises; floor and empty pixels are not categories
PALETTE = [
    (0.90, 0.10, 0.10),
    (0.10, 0.75, 0.15),
    (0.10, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.10, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.50, 0.05),
    (0.50, 0.05, 0.70),
    (0.55, 0.85, 0.10),
    (0.05, 0.45, 0.45),
    (0.95, 0.45, 0.65),
    (0.45, 0.25, 0.05),
]
FLOOR_COLOR = (0.5, 0.5, 0.5)
BACKGROUND_COLOR = (0.0, 0.0, 0.0)

CELL_SIZE = 1.6
COLOR_NOISE = 0.03
FLOOR_POINTS_PER_M2 = 40
IMAGE_SIZE = (128, 96)
RELATION_TEMPLATES = ("near", "next to", "beside")


def category_label(category_id: int) -> str:
    if category_id < len(CATEGORY_NAMES):
        return CATEGORY_NAMES[category_id]
    return f"object {category_id}"


def category_color(category_id: int) -> tuple[float, float, float]:
    """
    The fixed RGB color (in [0, 1]) of a category in synthetic scenes.

    Categories past the hand-picked palette get golden-ratio spaced hues.
    """
    if category_id < len(PALETTE):
        return PALETTE[category_id]
    hue = (category_id * 0.6180339887) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.9, 0.9)


def look_at_extrinsics(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    World-to-camera transform of a camera at `eye` looking at `target`, z-up world.

    The camera frame is x right, y down, z forward.
    """
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    extrinsics = np.eye(4)
    extrinsics[:3, :3] = rotation
    extrinsics[:3, 3] = -rotation @ eye
    return extrinsics


def render_points(
    points: np.ndarray,
    intrinsics: np.ndarray,
    extrinsics: np.ndarray,
    width: int,
    height: int,
    splat: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Renders colored points into an RGB raster and a depth raster with a z-buffer.

    Each point covers a (2 * splat + 1) pixel square. Empty pixels are black with depth 0.

    Args:
        points (np.ndarray): (N, 6) xyz + rgb rows.
        intrinsics (np.ndarray): 3x3 pinhole matrix.
        extrinsics (np.ndarray): 4x4 world-to-camera transform.
        width (int): Raster width.
        height (int): Raster height.
        splat (int): Splat radius in pixels.

    Returns:
        tuple[np.ndarray, np.ndarray]: (H, W, 3) uint8 image and (H, W) float32 depth.
    """
    xyz = points[:, :3].astype(np.float64)
    camera = xyz @ extrinsics[:3, :3].T + extrinsics[:3, 3]
    z = camera[:, 2]
    in_front = z > 1e-6
    camera, colors, z = camera[in_front], points[in_front, 3:], z[in_front]
    u = np.floor(intrinsics[0, 0] * camera[:, 0] / z + intrinsics[0, 2]).astype(np.int64)
    v = np.floor(intrinsics[1, 1] * camera[:, 1] / z + intrinsics[1, 2]).astype(np.int64)

    offsets = np.arange(-splat, splat + 1)
    du, dv = np.meshgrid(offsets, offsets)
    us = (u[:, None] + du.reshape(1, -1)).reshape(-1)
    vs = (v[:, None] + dv.reshape(1, -1)).reshape(-1)
    owner = np.repeat(np.arange(len(z)), du.size)
    inside = (us >= 0) & (us < width) & (vs >= 0) & (vs < height)
    us, vs, owner = us[inside], vs[inside], owner[inside]

    image = np.zeros((height, width, 3), dtype=np.uint8)
    depth = np.zeros((height, width), dtype=np.float32)
    if owner.size == 0:
        return image, depth

    pixel = vs * width + us
    order = np.lexsort((z[owner], pixel))
    pixel, owner = pixel[order], owner[order]
    _, first = np.unique(pixel, return_index=True)
    nearest_pixel, nearest_owner = pixel[first], owner[first]

    rows, cols = np.divmod(nearest_pixel, width)
    image[rows, cols] = np.clip(np.round(colors[nearest_owner] * 255.0), 0, 255).astype(np.uint8)
    depth[rows, cols] = z[nearest_owner].astype(np.float32)
    return image, depth


def _assign_categories(
    rng: np.random.Generator, num_proposals: int, num_categories: int
) -> list[int]:
    first = rng.permutation(num_categories)[: min(num_proposals, num_categories)]
    rest = rng.integers(0, num_categories, size=max(0, num_proposals - num_categories))
    return [int(c) for c in np.concatenate([first, rest])]


def _cuboid_points(
    rng: np.random.Generator, center_xy: np.ndarray, size: np.ndarray, count: int
) -> np.ndarray:
    low = np.array([center_xy[0] - size[0] / 2, center_xy[1] - size[1] / 2, 0.02])
    return low + rng.random((count, 3)) * size


def _query_text(
    rng: np.random.Generator, label: str, others: list[str]
) -> str:
    if not others:
        return f"the {label}"
    relation = RELATION_TEMPLATES[int(rng.integers(len(RELATION_TEMPLATES)))]
    other = others[int(rng.integers(len(others)))]
    return f"the {label} {relation} the {other}"


@timeit
def generate_synthetic_scene(
    seed: int,
    num_proposals: int,
    num_categories: int,
    num_frames: int,
    scene_id: Optional[str] = None,
    image_size: tuple[int, int] = IMAGE_SIZE,
) -> Scene:
    """
    Generates a deterministic synthetic scene of colored cuboid clusters on a floor plane.

    Every cluster is a proposal with a category; cameras sit on a circle above the scene looking at its
    center, and every proposal gets one templated query targeting it. When `num_proposals` does not exceed
    `num_categories`, the categories inside the scene are distinct.

    Args:
        seed (int): Seed of every random choice.
        num_proposals (int): Number of clusters (M).
        num_categories (int): Vocabulary size (K).
        num_frames (int): Number of rendered frames (L).
        scene_id (str, optional): Defaults to "synth_<seed>".
        image_size (tuple[int, int]): Rendered (width, height).

    Returns:
        Scene: The generated scene.
    """
    if num_proposals < 1 or num_categories < 1 or num_frames < 1:
        raise ValueError(
            f"num_proposals, num_categories and num_frames must be >= 1, got "
            f"{num_proposals}, {num_categories}, {num_frames}"
        )

    rng = np.random.default_rng(seed)
    scene_id = scene_id or f"synth_{seed}"
    categories = _assign_categories(rng, num_proposals, num_categories)
    columns = math.ceil(math.sqrt(num_proposals))
    rows = math.ceil(num_proposals / columns)

    chunks = []
    proposals = []
    offset = 0
    centers = []
    for i, category_id in enumerate(categories):
        row, column = divmod(i, columns)
        center = np.array([(column + 0.5) * CELL_SIZE, (row + 0.5) * CELL_SIZE])
        center = center + rng.uniform(-0.2, 0.2, size=2)
        size = np.array(
            [rng.uniform(0.4, 0.9), rng.uniform(0.4, 0.9), rng.uniform(0.4, 1.2)]
        )
        count = int(rng.integers(400, 900))
        xyz = _cuboid_points(rng, center, size, count)
        rgb = np.asarray(category_color(category_id)) + rng.normal(
            0.0, COLOR_NOISE, size=(count, 3)
        )
        chunk = np.hstack([xyz, np.clip(rgb, 0.0, 1.0)]).astype(np.float32)
        chunks.append(chunk)
        centers.append(center)
        proposals.append(
            Proposal(
                proposal_id=i,
                point_indices=tuple(range(offset, offset + count)),
                box3d=AxisAlignedBox3D.from_points(chunk[:, :3]),
                category_id=category_id,
            )
        )
        offset += count

    extent = np.array([columns * CELL_SIZE, rows * CELL_SIZE])
    floor_count = int(FLOOR_POINTS_PER_M2 * extent.prod())
    floor_xyz = np.hstack(
        [rng.random((floor_count, 2)) * extent, np.zeros((floor_count, 1))]
    )
    floor_rgb = np.asarray(FLOOR_COLOR) + rng.normal(0.0, COLOR_NOISE, size=(floor_count, 3))
    chunks.append(np.hstack([floor_xyz, np.clip(floor_rgb, 0.0, 1.0)]).astype(np.float32))
    points = np.concatenate(chunks)

    width, height = image_size
    focal = 0.8 * width
    intrinsics = np.array(
        [[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]]
    )
    target = np.array([extent[0] / 2.0, extent[1] / 2.0, 0.3])
    radius = 0.75 * float(np.linalg.norm(extent)) + 2.0
    elevation = 0.6 * radius + 1.0
    start = rng.uniform(0.0, 2.0 * math.pi)
    frames = []
    for frame_id in range(num_frames):
        angle = start + 2.0 * math.pi * frame_id / num_frames
        eye = target + np.array(
            [radius * math.cos(angle), radius * math.sin(angle), elevation]
        )
        extrinsics = look_at_extrinsics(eye, target)
        image, depth = render_points(points, intrinsics, extrinsics, width, height)
        frames.append(
            Frame(
                frame_id=frame_id,
                image=image,
                intrinsics=intrinsics,
                extrinsics=extrinsics,
                depth=depth,
            )
        )

    queries = []
    for proposal in proposals:
        label = category_label(proposal.category_id)
        others = [
            category_label(other.category_id)
            for other in proposals
            if other.proposal_id != proposal.proposal_id
        ]
        distractors = sum(
            1
            for other in proposals
            if other.proposal_id != proposal.proposal_id
            and other.category_id == proposal.category_id
        )
        queries.append(
            GroundingQuery(
                query_id=f"{scene_id}_q{proposal.proposal_id}",
                text=_query_text(rng, label, others),
                target_category_id=proposal.category_id,
                target_proposal_id=proposal.proposal_id,
                view_dependent=bool(rng.random() < 0.3),
                distractor_count=distractors,
            )
        )

    scene = Scene(
        scene_id=scene_id,
        points=points,
        proposals=tuple(proposals),
        frames=tuple(frames),
        queries=tuple(queries),
        categories=CategoryVocabulary(
            labels=tuple(category_label(c) for c in range(num_categories))
        ),
    )
    scene_logger.debug(
        f"Generated synthetic scene {scene_id}: N={scene.num_points} M={num_proposals} "
        f"K={num_categories} L={num_frames}"
    )
    return scene


def generate_synthetic_dataset(
    seed: int,
    count: int,
    num_proposals: int,
    num_categories: int,
    num_frames: int,
) -> list[Scene]:
    """
    Generates `count` scenes whose seeds are derived from `seed`; scene ids are "synth_<seed>_<index>".
    """
    return [
        generate_synthetic_scene(
            seed * 100_003 + index,
            num_proposals,
            num_categories,
            num_frames,
            scene_id=f"synth_{seed}_{index:04d}",
        )
        for index in range(count)
    ]
