"""Limited-receptive-field convolutional classifier with bag and patch branches.

The backbone is a stack of valid 3x3 convolutions followed by 1x1 mixers,
each with a ReLU. With all strides 1 and no padding, every feature-map
position depends on exactly a (2*n3+1) x (2*n3+1) input window, so the
receptive field is exact rather than approximate. One shared linear head
serves both branches: per-patch logits (single-instance) and bag logits
computed from the mean of instance feature vectors (multiple-instance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    channels: int = 64
    n3: int = 4      # number of 3x3 conv layers (the stem is the first)
    n1: int = 2      # number of 1x1 mixer layers
    classes: int = 2

    def __post_init__(self):
        if self.in_channels < 1 or self.channels < 1 or self.classes < 2:
            raise ValueError(f"invalid ModelConfig: {self}")
        if self.n3 < 0 or self.n1 < 0:
            raise ValueError(f"conv layer counts must be non-negative: n3={self.n3} n1={self.n1}")


def receptive_field(config: ModelConfig) -> int:
    """Side length of the input window one feature position depends on."""
    return 2 * config.n3 + 1


@dataclass
class Bag:
    """Ordered patches sharing one weak label; the unit of bag-level supervision.

    ``instance_true_labels`` exist only for evaluation against ground truth.
    No training path reads them.
    """

    instances: list  # list of (in_channels, h, w) float arrays
    bag_label: int
    instance_true_labels: Optional[list] = None

    def __post_init__(self):
        if len(self.instances) == 0:
            raise ValueError("a bag needs at least one instance")
        if self.instance_true_labels is not None and len(self.instance_true_labels) != len(self.instances):
            raise ValueError(
                f"{len(self.instance_true_labels)} true labels for {len(self.instances)} instances"
            )


class ToyBagNet:
    """Conv backbone plus one shared linear head for both branches.

    Parameters are float32 tensors initialized He-style (uniform with
    fan-in scaling) from the given seed; biases start at zero.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.conv_weights: list = []
        self.conv_biases: list = []
        cin = config.in_channels
        for k in [3] * config.n3 + [1] * config.n1:
            fan_in = cin * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(config.channels, cin, k, k))
            self.conv_weights.append(Tensor(w.astype(self.dtype), requires_grad=True))
            self.conv_biases.append(Tensor(np.zeros(config.channels, dtype=self.dtype), requires_grad=True))
            cin = config.channels
        bound = np.sqrt(6.0 / config.channels)
        hw = rng.uniform(-bound, bound, size=(config.classes, config.channels))
        self.head_weight = Tensor(hw.astype(self.dtype), requires_grad=True)
        self.head_bias = Tensor(np.zeros(config.classes, dtype=self.dtype), requires_grad=True)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.config)

    def named_parameters(self) -> list:
        params = []
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            params.append((f"conv{i}.weight", w))
            params.append((f"conv{i}.bias", b))
        params.append(("head.weight", self.head_weight))
        params.append(("head.bias", self.head_bias))
        return params

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "ToyBagNet":
        """Copy of the model with parameters cast to ``dtype`` (for f64 checks)."""
        clone = ToyBagNet.__new__(ToyBagNet)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.conv_weights = [Tensor(w.data.astype(dtype), requires_grad=True) for w in self.conv_weights]
        clone.conv_biases = [Tensor(b.data.astype(dtype), requires_grad=True) for b in self.conv_biases]
        clone.head_weight = Tensor(self.head_weight.data.astype(dtype), requires_grad=True)
        clone.head_bias = Tensor(self.head_bias.data.astype(dtype), requires_grad=True)
        return clone


def _as_input_tensor(model: ToyBagNet, image) -> Tensor:
    if isinstance(image, Tensor):
        if image.data.dtype != model.dtype:
            return Tensor(image.data.astype(model.dtype), requires_grad=image.requires_grad)
        return image
    return Tensor(np.asarray(image, dtype=model.dtype))


def backbone_forward(model: ToyBagNet, image) -> Tensor:
    """Feature map of an (in_channels, H, W) image; spatial extent shrinks by RF-1."""
    x = _as_input_tensor(model, image)
    rf = model.receptive_field
    if x.data.ndim != 3 or x.data.shape[0] != model.config.in_channels:
        raise ShapeError(
            f"backbone_forward: expected ({model.config.in_channels},H,W) input, got {x.shape}"
        )
    if x.data.shape[1] < rf or x.data.shape[2] < rf:
        raise ShapeError(
            f"backbone_forward: input {x.data.shape[1]}x{x.data.shape[2]} is smaller than "
            f"the {rf}x{rf} receptive field"
        )
    for w, b in zip(model.conv_weights, model.conv_biases):
        x = ad.relu(ad.conv2d_valid(x, w, b, stride=1))
    return x


def sil_forward(model: ToyBagNet, patch):
    """Single-instance branch: (feature vector, logits) of one patch."""
    fmap = backbone_forward(model, patch)
    feature = ad.spatial_gap(fmap)
    logits = ad.linear(feature, model.head_weight, model.head_bias)
    return feature, logits


def mil_forward(model: ToyBagNet, bag: Bag):
    """Bag branch: mean of instance features through the shared head.

    Returns (bag_feature, bag_logits, instance_logits). Because average
    pooling and the linear head commute, bag logits equal the mean of the
    instance logits whenever all instances share a spatial size.
    """
    if len(bag.instances) == 0:
        raise ValueError("mil_forward: empty bag")
    features = []
    instance_logits = []
    for patch in bag.instances:
        feature, logits = sil_forward(model, patch)
        features.append(feature)
        instance_logits.append(logits)
    bag_feature = ad.mean_stack(features)
    bag_logits = ad.linear(bag_feature, model.head_weight, model.head_bias)
    return bag_feature, bag_logits, instance_logits


def expected_probe_window(rf: int, height: int, width: int, pixel) -> set:
    """Feature positions whose RF window contains ``pixel`` (analytic answer)."""
    y, x = pixel
    rows = range(max(0, y - rf + 1), min(y, height - rf) + 1)
    cols = range(max(0, x - rf + 1), min(x, width - rf) + 1)
    return {(i, j) for i in rows for j in cols}


def rf_exactness_probe(model: ToyBagNet, image, pixel, delta: float = 8.0) -> set:
    """Feature positions that change when one input pixel is perturbed.

    Perturbs all channels at ``pixel`` by +delta and -delta and returns every
    position where any channel differs bit-for-bit from the unperturbed
    features. For a model with an exact receptive field this equals
    :func:`expected_probe_window`.
    """
    img = np.asarray(image, dtype=model.dtype)
    y, x = pixel
    if not (0 <= y < img.shape[1] and 0 <= x < img.shape[2]):
        raise ShapeError(f"pixel {pixel} outside image of shape {img.shape}")
    base = backbone_forward(model, img).data
    affected = set()
    for sign in (delta, -delta):
        perturbed = img.copy()
        perturbed[:, y, x] += sign
        fmap = backbone_forward(model, perturbed).data
        changed = np.any(fmap != base, axis=0)
        affected.update(zip(*np.nonzero(changed)))
    return {(int(i), int(j)) for i, j in affected}
