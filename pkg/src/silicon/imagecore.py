"""Image representations, RGB<->HED color deconvolution and patch handling.

All images are numpy arrays: RGB images are (H, W, 3) floats in [0, 1]
(linear intensity, i.e. 8-bit values divided by 255), HED images are
(H, W, 3) optical densities >= 0 with channel order
(Hematoxylin, Eosin, DAB).  Optical density follows the Beer-Lambert law
OD = -log10(I / I0) with I0 = 1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

# Small offset inside the log so zero intensity stays finite.
LOG_EPS = 1e-6

# Display cap (in OD units) used to rescale the H channel into [0, 1].
H_CHANNEL_CAP = 1.5

# Ruifrok & Johnston H&E-DAB basis, rows renormalized to unit length below.
_RUIFROK_ROWS = np.array(
    [
        [0.65, 0.70, 0.29],  # Hematoxylin
        [0.07, 0.99, 0.11],  # Eosin
        [0.27, 0.57, 0.78],  # DAB
    ]
)


class ImageLoadError(Exception):
    """Base class for image loading failures."""


class NotRgbError(ImageLoadError):
    """File decoded fine but does not contain an 8-bit RGB payload."""


class CorruptImageError(ImageLoadError):
    """File exists but cannot be decoded as a PNG stream."""


@dataclass(frozen=True)
class StainMatrix:
    """Stain OD basis: three unit-norm rows (H, E, DAB) and its inverse."""

    rows: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError(f"stain rows must be unit norm, got norms {norms}")
        if abs(np.linalg.det(rows)) < 1e-9:
            raise ValueError("stain matrix is singular")
        inverse = np.linalg.inv(rows)
        if np.max(np.abs(rows @ inverse - np.eye(3))) > 1e-9:
            raise ValueError("stain matrix inverse check failed")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "inverse", inverse)

    @staticmethod
    def from_unnormalized(rows) -> "StainMatrix":
        rows = np.asarray(rows, dtype=np.float64)
        return StainMatrix(rows / np.linalg.norm(rows, axis=1, keepdims=True))

    @staticmethod
    def default() -> "StainMatrix":
        """Standard Ruifrok-Johnston H&E-DAB basis."""
        return StainMatrix.from_unnormalized(_RUIFROK_ROWS)


def validate_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"RGB image must be (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have at least one pixel per axis")
    if np.min(img) < 0.0 or np.max(img) > 1.0:
        raise ValueError("RGB values must lie in [0, 1]")
    return img


def rgb_to_od(img: np.ndarray) -> np.ndarray:
    """Per-channel optical density, -log10(max(p, eps) / 1).

    The floor keeps zero intensity finite without perturbing pixels that
    are bright enough to matter; an additive offset would bias the OD of
    dark pixels beyond the round-trip tolerance.
    """
    return -np.log10(np.maximum(np.asarray(img, dtype=np.float64), LOG_EPS))


def rgb_to_hed(img: np.ndarray, m: StainMatrix | None = None) -> np.ndarray:
    """Deconvolve an RGB image into (H, E, DAB) optical densities.

    Negative deconvolution outputs (noise below the stain simplex) clamp
    to zero.
    """
    img = validate_rgb(img)
    m = m or StainMatrix.default()
    od = rgb_to_od(img)
    hed = od @ m.inverse
    return np.clip(hed, 0.0, None)


def hed_to_rgb(hed: np.ndarray, m: StainMatrix | None = None) -> np.ndarray:
    """Render (H, E, DAB) optical densities back to an RGB image in [0, 1]."""
    hed = np.asarray(hed, dtype=np.float64)
    if hed.ndim != 3 or hed.shape[2] != 3:
        raise ValueError(f"HED image must be (H, W, 3), got {hed.shape}")
    if np.min(hed) < 0.0:
        raise ValueError("HED optical densities must be >= 0")
    m = m or StainMatrix.default()
    rgb = np.power(10.0, -(hed @ m.rows))
    return np.clip(rgb, 0.0, 1.0)


def extract_h_channel(img: np.ndarray, m: StainMatrix | None = None,
                      cap: float = H_CHANNEL_CAP) -> np.ndarray:
    """Hematoxylin channel rescaled to [0, 1] by a fixed OD cap."""
    hed = rgb_to_hed(img, m)
    return np.clip(hed[:, :, 0] / cap, 0.0, 1.0)


@dataclass(frozen=True)
class PatchGrid:
    """Origins of overlapping patches fully covering an image."""

    patch: int
    stride: int
    origins: tuple  # of (row, col) pairs

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def __len__(self):
        return len(self.origins)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["row", "col"])
        for r, c in self.origins:
            writer.writerow([r, c])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, patch: int, stride: int) -> "PatchGrid":
        rows = list(csv.reader(io.StringIO(text)))
        origins = tuple((int(r), int(c)) for r, c in rows[1:])
        return PatchGrid(patch, stride, origins)


def _axis_starts(dim: int, patch: int, stride: int) -> list:
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)  # final origin flush with the border
    return starts


def make_patch_grid(height: int, width: int, patch: int, stride: int) -> PatchGrid:
    """All origins (r, c) on a stride lattice plus border-flush extras.

    Raises if the patch does not fit; the caller must resize or pad first.
    """
    if patch > min(height, width):
        raise ValueError(
            f"patch {patch} exceeds image dims ({height}, {width}); resize the image"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    origins = tuple(
        (r, c)
        for r in _axis_starts(height, patch, stride)
        for c in _axis_starts(width, patch, stride)
    )
    return PatchGrid(patch, stride, origins)


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG as a float image in [0, 1].

    Raises FileNotFoundError for a missing file, NotRgbError for a
    non-RGB payload and CorruptImageError for an undecodable stream.
    """
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise NotRgbError(f"{path}: expected RGB payload, got mode {im.mode}")
            data = np.asarray(im, dtype=np.float64)
    except FileNotFoundError:
        raise
    except NotRgbError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"{path}: cannot decode image: {exc}") from exc
    return data / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Save a float image in [0, 1] as an 8-bit RGB PNG.

    Quantization uses round-half-to-even so save followed by load is the
    identity on images whose values are multiples of 1/255.
    """
    img = validate_rgb(img)
    data = np.rint(img * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def save_mask(mask: np.ndarray, path) -> None:
    """Save a binary (H, W) mask as an 8-bit grayscale PNG (0 / 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {mask.shape}")
    data = np.where(mask > 0, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Load a binary mask saved by save_mask; returns a bool array."""
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"{path}: cannot decode image: {exc}") from exc
    return data >= 128
