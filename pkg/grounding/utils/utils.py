import hashlib
import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image

SUPPORTED_IMAGE_FORMATS = [
    ".png",
]

Rect = tuple[float, float, float, float]


class BundleLoadError(Exception):
    """
    Raised when a file of a scene bundle or cache is missing or cannot be read.

    Inherits from base Exception class.
    """

    pass


class SceneValidationError(Exception):
    """
    Raised when a scene, proposal, frame or query breaks one of its invariants.

    The message always names the offending proposal, frame or query id.
    """

    pass


class BackendUnavailableError(Exception):
    """
    Raised when a frozen embedding backend cannot be initialized.

    There is never a silent fallback to another backend.
    """

    pass


class ContractError(Exception):
    """
    Raised when inputs have mismatched widths or shapes.
    """

    pass


class NonFiniteLossError(Exception):
    """
    Raised when a loss term is NaN or infinite. The message names the term.
    """

    def __init__(self, term: str, value: float, step: str | None = None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at {step}" if step else ""
        super().__init__(f"Loss term {term} is not finite ({value}){where}.")


class FrozenParameterError(Exception):
    """
    Raised when the parameters of a frozen encoder changed during a run.
    """

    pass


class WeakSupervisionViolation(Exception):
    """
    Raised when training code read annotated target proposals.
    """

    pass


class EmptySceneError(Exception):
    """
    Raised when a scene has no proposals to ground a query to.
    """

    pass


class CheckpointError(Exception):
    """
    Raised when a checkpoint is missing, malformed or incompatible.
    """

    pass


def read_json(path: Path) -> Any:
    """
    Reads a JSON file.

    Args:
        path (Path): The file to read.

    Returns:
        Any: The decoded JSON document.

    Raises:
        BundleLoadError: If the file is missing or not valid JSON.
    """
    path = Path(path)
    if not path.is_file():
        raise BundleLoadError(f"Missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise BundleLoadError(f"Could not parse {path}: {e}") from e


def write_json(path: Path, document: Any) -> None:
    """
    Writes a JSON document with sorted keys, so that equal documents produce identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_rgb_image(path: Path) -> np.ndarray:
    """
    Loads an image file as an RGB uint8 array of shape (H, W, 3).

    Raises:
        BundleLoadError: If the file is missing, has an unsupported extension or cannot be decoded.
    """
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_IMAGE_FORMATS:
        raise BundleLoadError(
            f"File type {path.suffix} is not supported. Supported image formats are {', '.join(SUPPORTED_IMAGE_FORMATS)}."
        )
    if not path.is_file():
        raise BundleLoadError(f"Missing file: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except OSError as e:
        raise BundleLoadError(f"Could not decode image {path}: {e}") from e


def save_rgb_image(path: Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(
        path, format="PNG"
    )


def pixel_box(rect: Rect, width: int, height: int) -> tuple[int, int, int, int] | None:
    """
    Converts a real-valued (x, y, w, h) rectangle into integer pixel bounds clamped to the image.

    Args:
        rect (Rect): The rectangle in pixels.
        width (int): Image width.
        height (int): Image height.

    Returns:
        tuple | None: (left, top, right, bottom) with right/bottom exclusive, or None if the
        clamped rectangle is degenerate.
    """
    x, y, w, h = rect
    left = max(0, int(math.floor(x)))
    top = max(0, int(math.floor(y)))
    right = min(width, int(math.ceil(x + w)))
    bottom = min(height, int(math.ceil(y + h)))
    if right <= left or bottom <= top:
        return None
    return left, top, right, bottom


def crop_and_resize(
    image: np.ndarray,
    rect: Rect,
    size: tuple[int, int],
    resample: Image.Resampling = Image.Resampling.BICUBIC,
) -> Image.Image:
    """
    Crops a rectangle from an RGB raster and resizes it to the given size.

    Args:
        image (np.ndarray): The (H, W, 3) raster.
        rect (Rect): The (x, y, w, h) rectangle in pixels.
        size (tuple[int, int]): Output (width, height).
        resample (Image.Resampling): Resampling filter.

    Returns:
        PIL.Image.Image: The resized crop.

    Raises:
        ValueError: If the rectangle is degenerate once clamped to the image.
    """
    height, width = image.shape[:2]
    box = pixel_box(rect, width, height)
    if box is None:
        raise ValueError(f"Region {tuple(rect)} is degenerate inside a {width}x{height} image.")
    crop = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).crop(box)
    return crop.resize(size, resample=resample)


def stable_seed(*parts: Any) -> int:
    """
    Derives a 63-bit seed from any printable parts, identically across processes.
    """
    digest = hashlib.blake2b(
        "\x1f".join(str(part) for part in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") >> 1


def parameter_checksum(module: torch.nn.Module) -> str:
    """
    Computes a SHA-256 checksum over the state dict of a module.

    Args:
        module (torch.nn.Module): The module to checksum.

    Returns:
        str: The hex digest.
    """
    sha = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        sha.update(name.encode("utf-8"))
        sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()
