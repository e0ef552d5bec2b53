"""Dense per-pixel class-logit heatmaps, tiled inference, CAM and GradCAM.

A logit heatmap holds, at map position (i, j), the pre-softmax score the
shared head assigns to the RF x RF window whose top-left corner is (i, j).
Equivalently, map position (i, j) is the patch-branch logit of that window,
registered to the input pixel (i + offset, j + offset) with
offset = (RF - 1) / 2. The bag branch is never involved.

Tiled inference cuts the input into overlapping tiles (overlap RF - 1),
computes each tile independently and stitches the interior outputs. Because
the convolutions are valid and accumulate per element in a fixed order,
tiled output is byte-identical to the single-pass output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ShapeError
from .model import ToyBagNet, backbone_forward
from .netpbm import write_pgm


@dataclass
class LogitHeatmap:
    maps: np.ndarray          # (K, H - RF + 1, W - RF + 1)
    offset: int               # map (i, j) is centered at image pixel (i + offset, j + offset)
    class_names: list

    @property
    def n_classes(self) -> int:
        return self.maps.shape[0]

    def class_map(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_classes:
            raise ShapeError(f"class {k} out of range for {self.n_classes} classes")
        return self.maps[k]


@dataclass(frozen=True)
class Tile:
    in_r0: int
    in_r1: int
    in_c0: int
    in_c1: int
    out_r0: int
    out_c0: int
    out_rows: int
    out_cols: int


@dataclass
class TilePlan:
    tile: int
    overlap: int
    tiles: list = field(default_factory=list)


def plan_tiles(height: int, width: int, rf: int, tile: int = 256) -> TilePlan:
    """Tile coordinates whose cropped outputs exactly partition the output map."""
    if tile < rf:
        raise ValueError(f"tile size {tile} smaller than receptive field {rf}")
    out_h, out_w = height - rf + 1, width - rf + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"image {height}x{width} smaller than receptive field {rf}")
    step = tile - (rf - 1)
    plan = TilePlan(tile=tile, overlap=rf - 1)
    for r0 in range(0, out_h, step):
        rows = min(step, out_h - r0)
        in_r1 = min(r0 + tile, height)
        for c0 in range(0, out_w, step):
            cols = min(step, out_w - c0)
            in_c1 = min(c0 + tile, width)
            plan.tiles.append(Tile(r0, in_r1, c0, in_c1, r0, c0, rows, cols))
    return plan


def _head_as_conv(model: ToyBagNet):
    k = model.head_weight.data.shape[0]
    c = model.head_weight.data.shape[1]
    return model.head_weight.data.reshape(k, c, 1, 1), model.head_bias.data


def _dense_logits(model: ToyBagNet, image: np.ndarray) -> np.ndarray:
    fmap = backbone_forward(model, image).data
    weight, bias = _head_as_conv(model)
    out = np.empty((weight.shape[0],) + fmap.shape[1:], dtype=fmap.dtype)
    # head applied as a 1x1 convolution through the same kernel as the
    # backbone, keeping the tiled path bitwise identical to the full pass
    kernels.conv2d_forward(fmap, weight, bias, 1, out)
    return out


def default_class_names(n: int) -> list:
    if n == 2:
        return ["benign", "malignant"]
    return [f"class_{k}" for k in range(n)]


def logit_heatmap(model: ToyBagNet, image, class_names: Optional[list] = None) -> LogitHeatmap:
    """Dense per-class window logits of the whole image in one pass."""
    img = np.asarray(image, dtype=model.dtype)
    maps = _dense_logits(model, img)
    rf = model.receptive_field
    return LogitHeatmap(
        maps=maps,
        offset=(rf - 1) // 2,
        class_names=class_names or default_class_names(maps.shape[0]),
    )


def tiled_heatmap(model: ToyBagNet, image, plan: TilePlan,
                  class_names: Optional[list] = None) -> LogitHeatmap:
    """Same result as :func:`logit_heatmap`, memory bounded by the tile size."""
    img = np.asarray(image, dtype=model.dtype)
    rf = model.receptive_field
    out_h, out_w = img.shape[1] - rf + 1, img.shape[2] - rf + 1
    k = model.config.classes
    maps = np.empty((k, out_h, out_w), dtype=model.dtype)
    coverage = np.zeros((out_h, out_w), dtype=np.uint8)
    for t in plan.tiles:
        tile_img = np.ascontiguousarray(img[:, t.in_r0:t.in_r1, t.in_c0:t.in_c1])
        tile_out = _dense_logits(model, tile_img)
        crop = tile_out[:, :t.out_rows, :t.out_cols]
        maps[:, t.out_r0:t.out_r0 + t.out_rows, t.out_c0:t.out_c0 + t.out_cols] = crop
        coverage[t.out_r0:t.out_r0 + t.out_rows, t.out_c0:t.out_c0 + t.out_cols] += 1
    if not np.all(coverage == 1):
        holes = int(np.sum(coverage == 0))
        raise ValueError(f"tile plan does not partition the output map ({holes} uncovered positions)")
    return LogitHeatmap(
        maps=maps,
        offset=(rf - 1) // 2,
        class_names=class_names or default_class_names(k),
    )


def cam(model: ToyBagNet, image, class_index: int) -> np.ndarray:
    """Class activation map: head weights dotted with the final feature map (no bias).

    For this architecture CAM equals the logit map minus the class bias.
    """
    if not 0 <= class_index < model.config.classes:
        raise ShapeError(f"class {class_index} out of range for {model.config.classes} classes")
    fmap = backbone_forward(model, image).data
    w = model.head_weight.data[class_index]
    return np.tensordot(w, fmap, axes=([0], [0]))


def gradcam(model: ToyBagNet, image, class_index: int) -> np.ndarray:
    """Gradient-weighted activation map from actual backward-pass gradients.

    Channel weights are the spatial means of d(logit_k)/d(feature map);
    the map is ReLU of the weighted channel sum. With a global-average-pool
    head this equals ReLU(CAM) / N, N the number of map positions.
    """
    if not 0 <= class_index < model.config.classes:
        raise ShapeError(f"class {class_index} out of range for {model.config.classes} classes")
    img = np.asarray(image, dtype=model.dtype)
    with ad.record() as graph:
        fmap = backbone_forward(model, img)
        pooled = ad.spatial_gap(fmap)
        logits = ad.linear(pooled, model.head_weight, model.head_bias)
    seed = np.zeros_like(logits.data)
    seed[class_index] = 1.0
    graph.backward(logits, seed)
    alphas = fmap.grad.mean(axis=(1, 2))
    weighted = np.tensordot(alphas, fmap.data, axes=([0], [0]))
    return np.maximum(weighted, 0)


def export_heatmap(hm: LogitHeatmap, class_index: int, path,
                   normalization: str = "minmax", bounds: Optional[tuple] = None) -> Path:
    """Write one class map as an 8-bit PGM plus a JSON sidecar.

    ``minmax`` scales the map's own range to 0..255; a degenerate range
    (constant map) produces all-128 pixels by convention. ``fixed`` clips to
    the given (lo, hi) bounds. The sidecar records everything needed to map
    pixels back to logit values and image coordinates.
    """
    path = Path(path)
    m = hm.class_map(class_index).astype(np.float64)
    if normalization == "minmax":
        lo, hi = float(m.min()), float(m.max())
    elif normalization == "fixed":
        if bounds is None:
            raise ValueError("fixed normalization needs explicit (lo, hi) bounds")
        lo, hi = float(bounds[0]), float(bounds[1])
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if hi - lo <= 0:
        pixels = np.full(m.shape, 128, dtype=np.uint8)
    else:
        scaled = (np.clip(m, lo, hi) - lo) / (hi - lo)
        pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    write_pgm(path, pixels)
    sidecar = {
        "class_index": class_index,
        "class_name": hm.class_names[class_index],
        "offset": hm.offset,
        "receptive_field": 2 * hm.offset + 1,
        "normalization": {"mode": normalization, "lo": lo, "hi": hi},
        "shape": list(m.shape),
    }
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return path
