"""Quantitative evaluation: accuracies, localization scores, k-fold ablations.

Classification is scored at two levels: bag accuracy (the bag branch's
argmax vs the weak label) and instance accuracy (per-patch argmax vs either
the weak label or, on synthetic data, the true patch label). Localization
of heatmaps against ground-truth masks uses the pointing game (is the map's
argmax inside the dilated mask?) and IoU of the map binarized at a quantile
of its own values. Evaluation never mutates model parameters.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .heatmap import LogitHeatmap, logit_heatmap
from .model import Bag, ModelConfig, ToyBagNet
from .synthdata import SynthSample
from .trainer import AblationMode, TrainConfig, predict_bag, predict_instances, train

RESULTS_HEADER = ["mode", "fold", "bag_acc", "inst_acc_weak", "inst_acc_true", "pointing", "iou"]
MALIGNANT_CLASS = 1


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    if len(predictions) == 0:
        raise ValueError("accuracy of an empty prediction list is undefined")
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions vs {len(labels)} labels")
    return sum(int(p == l) for p, l in zip(predictions, labels)) / len(predictions)


def pointing_game(hm: LogitHeatmap, mask: np.ndarray, class_index: int,
                  dilation_radius: float = 5.0) -> bool:
    """Hit iff the map's argmax lands inside the dilated ground-truth mask.

    The argmax position is translated to image coordinates through the
    heatmap's registration offset; row-major argmax breaks ties toward the
    smallest (row, col). Benign samples (empty mask) are the caller's job to
    filter out.
    """
    if not mask.any():
        raise ValueError("pointing game needs a non-empty mask; filter benign samples first")
    m = hm.class_map(class_index)
    flat = int(np.argmax(m))
    i, j = divmod(flat, m.shape[1])
    y, x = i + hm.offset, j + hm.offset
    if dilation_radius > 0:
        dist = ndimage.distance_transform_edt(mask == 0)
        dilated = dist <= dilation_radius
    else:
        dilated = mask > 0
    return bool(dilated[y, x])


def iou_at_threshold(hm: LogitHeatmap, mask: np.ndarray, class_index: int,
                     quantile: float = 0.9) -> float:
    """IoU of {map >= its own q-quantile} against the mask cropped to the map extent."""
    if not mask.any():
        raise ValueError("iou_at_threshold needs a non-empty mask")
    m = hm.class_map(class_index)
    threshold = np.quantile(m, quantile)
    predicted = m >= threshold
    h, w = m.shape
    off = hm.offset
    cropped = mask[off:off + h, off:off + w] > 0
    union = np.logical_or(predicted, cropped).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(predicted, cropped).sum()
    return float(inter) / float(union)


@dataclass
class MetricsReport:
    bag_accuracy: float
    instance_accuracy_weak: float
    instance_accuracy_true: Optional[float] = None
    pointing_game_hit_rate: Optional[float] = None
    iou_at_threshold: Optional[float] = None
    n_bags: int = 0

    def as_row(self, mode: str, fold: int) -> list:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return [mode, fold, fmt(self.bag_accuracy), fmt(self.instance_accuracy_weak),
                fmt(self.instance_accuracy_true), fmt(self.pointing_game_hit_rate),
                fmt(self.iou_at_threshold)]


def evaluate_model(model: ToyBagNet, samples: Sequence[SynthSample],
                   dilation_radius: float = 5.0, iou_quantile: float = 0.9,
                   localization: bool = True) -> MetricsReport:
    """Score a model over synthetic samples with masks and true patch labels."""
    if len(samples) == 0:
        raise ValueError("evaluate_model: empty sample list")
    bag_preds, bag_labels = [], []
    inst_preds, weak_labels, true_labels = [], [], []
    hits, ious = [], []
    for sample in samples:
        bag = sample.bag
        bag_preds.append(predict_bag(model, bag))
        bag_labels.append(bag.bag_label)
        preds = predict_instances(model, bag)
        inst_preds.extend(preds)
        weak_labels.extend([bag.bag_label] * len(preds))
        if bag.instance_true_labels is not None:
            true_labels.extend(bag.instance_true_labels)
        if localization and sample.mask.any():
            hm = logit_heatmap(model, sample.image)
            hits.append(pointing_game(hm, sample.mask, MALIGNANT_CLASS, dilation_radius))
            ious.append(iou_at_threshold(hm, sample.mask, MALIGNANT_CLASS, iou_quantile))
    return MetricsReport(
        bag_accuracy=accuracy(bag_preds, bag_labels),
        instance_accuracy_weak=accuracy(inst_preds, weak_labels),
        instance_accuracy_true=accuracy(inst_preds, true_labels) if true_labels else None,
        pointing_game_hit_rate=float(np.mean(hits)) if hits else None,
        iou_at_threshold=float(np.mean(ious)) if ious else None,
        n_bags=len(samples),
    )


def kfold_splits(n: int, folds: int, seed: int = 0) -> list:
    """Disjoint (train_indices, test_indices) pairs covering range(n) by bag."""
    if folds < 1 or folds > n:
        raise ValueError(f"need 1 <= folds <= {n}, got {folds}")
    order = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(order, folds)
    splits = []
    for f in range(folds):
        test = sorted(int(i) for i in chunks[f])
        train_set = sorted(int(i) for c in range(folds) if c != f for i in chunks[c])
        splits.append((train_set, test))
    return splits


def mean_std(values: Sequence[float]):
    """Mean and sample standard deviation (ddof=1); std is None for < 2 values."""
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return mean, std


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)        # (mode, fold, MetricsReport)
    summary: dict = field(default_factory=dict)     # mode -> {metric: (mean, std)}


METRIC_FIELDS = ["bag_acc", "inst_acc_weak", "inst_acc_true", "pointing", "iou"]


def _report_values(report: MetricsReport) -> dict:
    return {
        "bag_acc": report.bag_accuracy,
        "inst_acc_weak": report.instance_accuracy_weak,
        "inst_acc_true": report.instance_accuracy_true,
        "pointing": report.pointing_game_hit_rate,
        "iou": report.iou_at_threshold,
    }


def run_ablation(samples: Sequence[SynthSample], folds: int,
                 modes: Sequence[AblationMode],
                 model_config: ModelConfig, train_config: TrainConfig,
                 out_dir: Optional[Path] = None,
                 dilation_radius: float = 5.0, iou_quantile: float = 0.9,
                 localization: bool = True) -> AblationResult:
    """Train and evaluate each mode on each fold; fold splits never cut a bag.

    Writes ablation_results.csv (one row per mode and fold) and
    ablation_summary.csv (mean rows, plus std rows when folds >= 2).
    """
    splits = kfold_splits(len(samples), folds, seed=train_config.seed)
    result = AblationResult()
    for mode in modes:
        for fold, (train_set, test_set) in enumerate(splits):
            cfg = dataclasses.replace(train_config, seed=train_config.seed + fold)
            model = ToyBagNet(model_config, seed=cfg.seed)
            train(model, [samples[i].bag for i in train_set], cfg, mode=mode, out_dir=None)
            report = evaluate_model(model, [samples[i] for i in test_set],
                                    dilation_radius, iou_quantile, localization)
            result.rows.append((mode, fold, report))
    for mode in modes:
        per_metric = {}
        for name in METRIC_FIELDS:
            values = [
                _report_values(rep)[name]
                for m, _, rep in result.rows
                if m is mode and _report_values(rep)[name] is not None
            ]
            per_metric[name] = mean_std(values) if values else (None, None)
        result.summary[mode.value] = per_metric
    if out_dir is not None:
        write_ablation_csvs(result, Path(out_dir), folds)
    return result


def write_ablation_csvs(result: AblationResult, out_dir: Path, folds: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation_results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for mode, fold, report in result.rows:
            writer.writerow(report.as_row(mode.value, fold))
    with open(out_dir / "ablation_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "stat"] + METRIC_FIELDS)
        for mode_name, metrics in result.summary.items():
            means = [metrics[n][0] for n in METRIC_FIELDS]
            writer.writerow([mode_name, "mean"] +
                            ["" if v is None else f"{v:.6f}" for v in means])
            if folds >= 2:
                stds = [metrics[n][1] for n in METRIC_FIELDS]
                writer.writerow([mode_name, "std"] +
                                ["" if v is None else f"{v:.6f}" for v in stds])
