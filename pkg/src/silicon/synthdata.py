"""Synthetic H&E-like images with exact ground truth.

Nuclei are rendered as high-Hematoxylin ellipses over an Eosin cytoplasm
field, composed through the Beer-Lambert law under a per-sample (or
per-group) jittered stain basis.  Every sample carries its mask, stain
matrix and per-pixel concentrations, so estimators downstream can be
scored against exact truth.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from silicon import imagecore as ic
from silicon.imagecore import StainMatrix

META_NAME = "meta.csv"


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic tissue generator."""

    image_size: int = 32
    nuclei_count: tuple = (3, 8)        # inclusive
    nucleus_radius: tuple = (3.0, 6.0)  # pixels, major semi-axis
    h_concentration: tuple = (0.45, 1.1)  # OD, drawn per nucleus
    e_concentration: tuple = (0.08, 0.30)  # OD, cytoplasm field
    color_jitter: float = 0.0           # max |rotation| of stain rows, degrees
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("nuclei_count", "nucleus_radius", "h_concentration", "e_concentration"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.nucleus_radius[0] < 2:
            raise ValueError("nucleus radius must be >= 2 pixels")
        if min(self.h_concentration[0], self.e_concentration[0]) < 0:
            raise ValueError("concentrations must be >= 0")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


@dataclass
class SynthSample:
    """One rendered tissue image with its exact ground truth."""

    image: np.ndarray           # (H, W, 3) in [0, 1]
    mask: np.ndarray            # (H, W) bool, union of nucleus ellipses
    stain_matrix: StainMatrix
    concentrations: np.ndarray  # (H, W, 2) OD, channels (H, E)
    group: int = 0
    sample_id: int = 0
    seed: int = 0


def rotate_stain_matrix(base: StainMatrix, angle_deg: float) -> StainMatrix:
    """Rotate all three stain rows about the gray (1,1,1) axis.

    Rotations preserve unit norms, so the result is a valid basis; the
    effect on rendered images is a hue shift of each stain.
    """
    axis = np.ones(3) / np.sqrt(3.0)
    theta = np.deg2rad(angle_deg)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    rot = np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)
    return StainMatrix(base.rows @ rot.T)


def _cytoplasm_field(size: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth E-concentration field from a handful of Gaussian bumps."""
    lo, hi = spec.e_concentration
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bumps = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(size / 6, size / 2)
        amp = rng.uniform(0.4, 1.0)
        bumps += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    if bumps.max() > bumps.min():
        bumps = (bumps - bumps.min()) / (bumps.max() - bumps.min())
    return lo + (hi - lo) * bumps


def _render_ellipses(size: int, spec: SynthSpec, rng: np.random.Generator):
    """Nucleus mask and per-pixel H concentration (max over overlaps)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    h_map = np.zeros((size, size))
    lo_n, hi_n = spec.nuclei_count
    for _ in range(int(rng.integers(lo_n, hi_n + 1))):
        cy, cx = rng.uniform(0, size, size=2)
        a = rng.uniform(*spec.nucleus_radius)
        b = a * rng.uniform(0.6, 1.0)  # eccentricity <= 0.8
        theta = rng.uniform(0, np.pi)
        conc = rng.uniform(*spec.h_concentration)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        inside = u * u + v * v <= 1.0
        mask |= inside
        h_map = np.where(inside, np.maximum(h_map, conc), h_map)
    return mask, h_map


def synth_sample(spec: SynthSpec, rng: np.random.Generator,
                 stain: StainMatrix | None = None) -> SynthSample:
    """Render one image; the stain basis is jittered here unless supplied."""
    if stain is None:
        angle = rng.uniform(-spec.color_jitter, spec.color_jitter) if spec.color_jitter else 0.0
        stain = rotate_stain_matrix(StainMatrix.default(), angle)
    size = spec.image_size
    e_map = _cytoplasm_field(size, spec, rng)
    mask, h_map = _render_ellipses(size, spec, rng)
    hed = np.zeros((size, size, 3))
    hed[:, :, 0] = h_map
    hed[:, :, 1] = e_map
    image = ic.hed_to_rgb(hed, stain)
    if spec.noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise_sigma, image.shape), 0.0, 1.0)
    return SynthSample(image, mask, stain, np.stack([h_map, e_map], axis=-1))


def synth_set(spec: SynthSpec, n: int, biopsy_groups: int,
              rng: np.random.Generator) -> list:
    """n samples in biopsy groups; one shared stain jitter per group."""
    if not n >= biopsy_groups >= 1:
        raise ValueError("need n >= biopsy_groups >= 1")
    angles = [
        rng.uniform(-spec.color_jitter, spec.color_jitter) if spec.color_jitter else 0.0
        for _ in range(biopsy_groups)
    ]
    stains = [rotate_stain_matrix(StainMatrix.default(), a) for a in angles]
    seeds = rng.integers(0, 2**62, size=n)
    samples = []
    for i in range(n):
        group = i % biopsy_groups
        child = np.random.default_rng(int(seeds[i]))
        s = synth_sample(spec, child, stain=stains[group])
        s.group = group
        s.sample_id = i
        s.seed = int(seeds[i])
        samples.append(s)
    return samples


def write_dataset(samples, directory) -> None:
    """Dataset directory: images/*.png, masks/*.png, meta.csv."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["id", "group", "h_r", "h_g", "h_b", "e_r", "e_g", "e_b",
         "d_r", "d_g", "d_b", "seed"]
    )
    for s in samples:
        name = f"{s.sample_id:05d}"
        ic.save_image(s.image, directory / "images" / f"{name}.png")
        ic.save_mask(s.mask, directory / "masks" / f"{name}.png")
        writer.writerow([s.sample_id, s.group]
                        + [f"{v:.12g}" for v in s.stain_matrix.rows.reshape(-1)]
                        + [s.seed])
    (directory / META_NAME).write_text(buf.getvalue())


@dataclass
class Dataset:
    """Loaded dataset; masks stay on disk unless explicitly requested."""

    images: list
    groups: list
    ids: list
    stain_rows: list
    masks: list | None = None
    directory: Path | None = None

    def __len__(self):
        return len(self.images)


def load_dataset(directory, load_masks: bool = False) -> Dataset:
    directory = Path(directory)
    meta = directory / META_NAME
    if not meta.exists():
        raise FileNotFoundError(f"dataset metadata missing: {meta}")
    rows = list(csv.DictReader(io.StringIO(meta.read_text())))
    if not rows:
        raise ValueError(f"dataset is empty: {directory}")
    images, groups, ids, stain_rows = [], [], [], []
    masks = [] if load_masks else None
    for row in rows:
        name = f"{int(row['id']):05d}"
        images.append(ic.load_image(directory / "images" / f"{name}.png"))
        groups.append(int(row["group"]))
        ids.append(int(row["id"]))
        stain_rows.append(np.array(
            [float(row[k]) for k in ("h_r", "h_g", "h_b", "e_r", "e_g", "e_b",
                                     "d_r", "d_g", "d_b")]
        ).reshape(3, 3))
        if load_masks:
            masks.append(ic.load_mask(directory / "masks" / f"{name}.png"))
    return Dataset(images, groups, ids, stain_rows, masks, directory)
