"""Deterministic synthetic "histology" corpus with ground-truth masks.

Each sample is an RGB image of scattered benign nuclei (small rings of one
hue) on a noisy pale background. Malignant samples additionally contain
larger irregular blobs of a second hue, confined to one random subregion;
those blob pixels form the ground-truth mask. The image is cut into a grid
of patches that constitute a bag: the bag label is malignant iff the mask
is nonempty, and a patch's true label is malignant iff its region overlaps
the mask. Individual blobs are kept small so a model whose decisions are
strictly local can solve the task.

Generation is a pure function of (seed, index), so corpora are bit
reproducible. True patch labels and masks are carried for evaluation only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Bag
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

MANIFEST_VERSION = 1

BACKGROUND_RGB = (0.86, 0.80, 0.86)   # pale eosin-like tint
BENIGN_RGB = (0.38, 0.32, 0.64)       # hue A: blue-violet rings
MALIGNANT_RGB = (0.22, 0.46, 0.26)    # hue B: dark green blobs


class CorpusError(Exception):
    """Malformed corpus directory or manifest."""


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: int = 200
    patch_grid: int = 2               # 2 -> four patches per bag
    n_bags: int = 400
    malignant_fraction: float = 0.5
    benign_count: tuple = (25, 45)    # rings per image, inclusive range
    benign_radius: tuple = (2.0, 3.5)
    malignant_count: tuple = (6, 12)  # blobs per malignant image
    malignant_radius: tuple = (1.5, 2.5)  # keeps each blob within one 9x9 window
    region_radius: tuple = (25.0, 45.0)
    noise_amplitude: float = 0.04

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_grid <= 0:
            raise ValueError(f"invalid geometry: size={self.image_size} grid={self.patch_grid}")
        if self.image_size % self.patch_grid != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_grid {self.patch_grid}"
            )
        if not 0 <= self.malignant_fraction <= 1:
            raise ValueError(f"malignant_fraction must be in [0,1], got {self.malignant_fraction}")

    @property
    def patch_size(self) -> int:
        return self.image_size // self.patch_grid


@dataclass
class SynthSample:
    image: np.ndarray      # (3, S, S) float32 in [0, 1]
    mask: np.ndarray       # (S, S) uint8, 1 = malignant structure
    bag: Bag


def _paint_disc(image: np.ndarray, mask, cy: float, cx: float, radius: float,
                rgb, ring: bool = False) -> None:
    s = image.shape[1]
    r_out = radius + 0.5
    y0, y1 = max(0, int(cy - r_out - 1)), min(s, int(cy + r_out + 2))
    x0, x1 = max(0, int(cx - r_out - 1)), min(s, int(cx + r_out + 2))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    inside = dist <= r_out
    if ring:
        inside &= dist >= radius - 1.0
    for c in range(3):
        region = image[c, y0:y1, x0:x1]
        region[inside] = rgb[c]
    if mask is not None:
        mask[y0:y1, x0:x1][inside] = 1


def generate_sample(config: SynthConfig, index: int) -> SynthSample:
    """Pure function of (config.seed, index); see the module docstring."""
    rng = np.random.default_rng((config.seed, index))
    s = config.image_size
    image = np.empty((3, s, s), dtype=np.float32)
    noise = rng.uniform(-1.0, 1.0, size=(3, s, s)).astype(np.float32)
    for c in range(3):
        image[c] = BACKGROUND_RGB[c] + config.noise_amplitude * noise[c]
    mask = np.zeros((s, s), dtype=np.uint8)

    malignant = bool(rng.random() < config.malignant_fraction)

    n_benign = int(rng.integers(config.benign_count[0], config.benign_count[1] + 1))
    for _ in range(n_benign):
        cy, cx = rng.uniform(0, s, size=2)
        radius = rng.uniform(*config.benign_radius)
        shade = rng.uniform(0.9, 1.1)
        rgb = tuple(min(1.0, v * shade) for v in BENIGN_RGB)
        _paint_disc(image, None, cy, cx, radius, rgb, ring=True)

    if malignant:
        region_r = rng.uniform(*config.region_radius)
        margin = config.malignant_radius[1] + 2.0
        ry = rng.uniform(margin, s - margin)
        rx = rng.uniform(margin, s - margin)
        n_blobs = int(rng.integers(config.malignant_count[0], config.malignant_count[1] + 1))
        for _ in range(n_blobs):
            angle = rng.uniform(0, 2 * np.pi)
            rho = region_r * np.sqrt(rng.uniform(0, 1))
            cy = float(np.clip(ry + rho * np.sin(angle), margin, s - margin))
            cx = float(np.clip(rx + rho * np.cos(angle), margin, s - margin))
            radius = rng.uniform(*config.malignant_radius)
            shade = rng.uniform(0.9, 1.1)
            rgb = tuple(min(1.0, v * shade) for v in MALIGNANT_RGB)
            # irregular blob: a few jittered overlapping discs
            for _ in range(int(rng.integers(2, 4))):
                off = rng.uniform(-radius * 0.6, radius * 0.6, size=2)
                _paint_disc(image, mask, cy + off[0], cx + off[1], radius, rgb)
        assert mask.any(), "malignant sample must mark at least one pixel"

    np.clip(image, 0.0, 1.0, out=image)
    bag = split_into_bag(image, mask, config.patch_grid)
    return SynthSample(image=image, mask=mask, bag=bag)


def split_into_bag(image: np.ndarray, mask: np.ndarray, patch_grid: int) -> Bag:
    """Cut an image into a patch grid, row-major; labels derive from the mask."""
    s = image.shape[1]
    if s % patch_grid != 0 or image.shape[2] % patch_grid != 0:
        raise ValueError(f"image {image.shape[1]}x{image.shape[2]} not divisible by grid {patch_grid}")
    p = s // patch_grid
    instances = []
    true_labels = []
    for gi in range(patch_grid):
        for gj in range(patch_grid):
            ys, xs = gi * p, gj * p
            instances.append(np.ascontiguousarray(image[:, ys:ys + p, xs:xs + p]))
            true_labels.append(int(mask[ys:ys + p, xs:xs + p].any()))
    return Bag(instances=instances, bag_label=int(mask.any()), instance_true_labels=true_labels)


def generate_corpus(config: SynthConfig) -> list:
    return [generate_sample(config, i) for i in range(config.n_bags)]


def quantize(image: np.ndarray) -> np.ndarray:
    """f32 [0,1] -> u8, the exact transform applied when exporting."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0).astype(np.float32)


def export_corpus(samples: Sequence[SynthSample], directory, seed: int = 0,
                  patch_grid: int = None) -> Path:
    """Write images (PPM), masks (PGM) and manifest.json; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        grid = patch_grid or int(round(np.sqrt(len(sample.bag.instances))))
        image_rel = f"images/bag_{i:04d}.ppm"
        mask_rel = f"masks/bag_{i:04d}.pgm"
        write_ppm(directory / image_rel, quantize(sample.image))
        write_pgm(directory / mask_rel, (sample.mask * np.uint8(255)).astype(np.uint8))
        entries.append({
            "id": i,
            "image": image_rel,
            "mask": mask_rel,
            "bag_label": sample.bag.bag_label,
            "patch_grid": grid,
            "patch_true_labels": list(sample.bag.instance_true_labels),
        })
    manifest = {"version": MANIFEST_VERSION, "seed": seed, "bags": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def import_corpus(directory) -> list:
    """Load an exported corpus; images come back post-quantization."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise CorpusError(f"{manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorpusError(f"{manifest_path}: unsupported version {manifest.get('version')!r}")
    samples = []
    for entry in manifest.get("bags", []):
        try:
            image = dequantize(read_ppm(directory / entry["image"]))
            mask = (read_pgm(directory / entry["mask"]) > 0).astype(np.uint8)
            grid = int(entry["patch_grid"])
            bag = split_into_bag(image, mask, grid)
        except KeyError as exc:
            raise CorpusError(f"{manifest_path}: bag entry missing key {exc}") from exc
        if bag.bag_label != int(entry["bag_label"]):
            raise CorpusError(
                f"{manifest_path}: bag {entry['id']}: stored label {entry['bag_label']} "
                f"does not match mask-derived label {bag.bag_label}"
            )
        bag.instance_true_labels = [int(v) for v in entry["patch_true_labels"]]
        samples.append(SynthSample(image=image, mask=mask, bag=bag))
    return samples
