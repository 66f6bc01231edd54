"""Node classifiers: a small convolutional backbone with a trainable head.

The backbone plays the role of a pretrained no-top network.  It is trained
once on all classes (`shared_pretrain`), frozen, and then shared by every
tree-node classifier and by the flat baseline; only the augmented head is
trained per node.  Global average pooling sits between the conv stack and
the head so one trained backbone accepts any input size the pooling
arithmetic allows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from . import numerics as nm

if TYPE_CHECKING:
    from .data import LabeledDataset
    from .training import TrainingConfig, TrainingHistory

CHECKPOINT_MAGIC = b"CNNT"
CHECKPOINT_VERSION = 1

#: (filters, kernel, stride, pool) per block; conv is 'same'-padded, each
#: block ends in pool x pool max pooling.
DEFAULT_BLOCKS = ((16, 3, 1, 2), (32, 3, 1, 2), (64, 3, 1, 2))


class ConfigurationError(ValueError):
    """Raised for invalid model configurations (e.g. head activation rule)."""


@dataclass(frozen=True)
class HeadSpec:
    """Augmented trainable head: optional hidden relu layer, then the output
    layer whose activation is tied to its arity (sigmoid iff 2 neurons)."""

    output_neurons: int
    output_activation: str
    hidden_units: int = 64

    def __post_init__(self):
        if self.output_neurons < 2:
            raise ConfigurationError(f"need at least 2 output neurons, got {self.output_neurons}")
        if self.hidden_units < 0:
            raise ConfigurationError("hidden_units must be non-negative")
        expected = "sigmoid" if self.output_neurons == 2 else "softmax"
        if self.output_activation != expected:
            raise ConfigurationError(
                f"{self.output_neurons}-neuron heads must use {expected} "
                f"activation, got {self.output_activation!r}")

    @classmethod
    def for_classes(cls, k: int, hidden_units: int = 64) -> "HeadSpec":
        return cls(k, "sigmoid" if k == 2 else "softmax", hidden_units)


@dataclass(frozen=True)
class BackboneSpec:
    """Conv-stack layout; `conv_blocks` entries are (filters, kernel, stride, pool)."""

    input_size: tuple[int, int, int] = (32, 32, 3)
    conv_blocks: tuple[tuple[int, int, int, int], ...] = DEFAULT_BLOCKS

    def feature_extent(self, height: int, width: int) -> tuple[int, int]:
        """Spatial extent after the conv stack, or raise if it vanishes."""
        h, w = height, width
        for filters, kernel, stride, pool in self.conv_blocks:
            h = -(-h // stride)
            w = -(-w // stride)
            if pool > 1:
                if h < pool or w < pool:
                    raise ConfigurationError(
                        f"input {height}x{width} collapses below the {pool}x{pool} "
                        f"pool window in block with {filters} filters")
                h //= pool
                w //= pool
        if h < 1 or w < 1:
            raise ConfigurationError(f"input {height}x{width} yields empty feature map")
        return h, w

    @property
    def feature_channels(self) -> int:
        return self.conv_blocks[-1][0]


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Backbone:
    """Conv-stack parameters; shared (frozen) across classifiers after
    pretraining."""

    def __init__(self, spec: BackboneSpec, params: Optional[list] = None,
                 rng: Optional[np.random.Generator] = None):
        self.spec = spec
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ValueError("need params or an rng to initialize them")
            self.params = []
            channels = spec.input_size[2]
            for filters, kernel, stride, pool in spec.conv_blocks:
                fan_in = kernel * kernel * channels
                self.params.append(nm.Parameter(
                    _he_uniform(rng, (kernel, kernel, channels, filters), fan_in)))
                self.params.append(nm.Parameter(np.zeros(filters, dtype=np.float32)))
                channels = filters

    def parameters(self) -> list:
        return list(self.params)

    @property
    def frozen(self) -> bool:
        return all(not p.trainable for p in self.params)

    def freeze(self) -> None:
        for p in self.params:
            p.trainable = False

    def features_graph(self, images) -> nm.Node:
        """Conv blocks then global average pooling: [N,h,w,c] -> [N,F]."""
        x = nm.as_node(images)
        self.spec.feature_extent(x.value.shape[-3], x.value.shape[-2])
        for i, (filters, kernel, stride, pool) in enumerate(self.spec.conv_blocks):
            x = nm.conv2d(x, self.params[2 * i], self.params[2 * i + 1],
                          stride=stride, padding="same")
            x = nm.relu(x)
            if pool > 1:
                x = nm.maxpool2d(x, window=pool, stride=pool)
        return nm.global_avg_pool(x)

    def features(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Feature values for a batch of images, computed chunk by chunk."""
        parts = [self.features_graph(images[i:i + chunk]).value
                 for i in range(0, images.shape[0], chunk)]
        return np.concatenate(parts, axis=0)


class NodeClassifier:
    """Frozen-backbone-plus-head classifier for one decision node (or the
    flat baseline).  `classes` records the label order the head was trained
    against."""

    def __init__(self, backbone: Backbone, head_spec: HeadSpec,
                 head_params: list, input_size: tuple[int, int, int],
                 classes: Optional[tuple] = None):
        self.backbone = backbone
        self.head_spec = head_spec
        self.head_params = head_params
        self.input_size = tuple(input_size)
        self.classes = classes
        self.training_history: Optional["TrainingHistory"] = None

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list:
        return self.backbone.parameters() + list(self.head_params)

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.trainable]

    @property
    def backbone_frozen(self) -> bool:
        return self.backbone.frozen

    # -- forward ------------------------------------------------------------

    def head_graph(self, features) -> nm.Node:
        x = nm.as_node(features)
        params = self.head_params
        if self.head_spec.hidden_units > 0:
            x = nm.relu(nm.dense(x, params[0], params[1]))
            out = nm.dense(x, params[2], params[3])
        else:
            out = nm.dense(x, params[0], params[1])
        if self.head_spec.output_activation == "softmax":
            return nm.softmax(out)
        return nm.sigmoid(out)

    def scores_graph(self, images) -> nm.Node:
        return self.head_graph(self.backbone.features_graph(images))

    def score_images(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Score a batch of images of any spatial size the backbone accepts."""
        parts = [self.scores_graph(images[i:i + chunk]).value
                 for i in range(0, images.shape[0], chunk)]
        return np.concatenate(parts, axis=0)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Score one image; its shape must match the classifier input size."""
        if tuple(image.shape) != self.input_size:
            raise nm.ShapeError(
                f"image shape {tuple(image.shape)} does not match classifier "
                f"input size {self.input_size}; resize before predicting")
        return self.scores_graph(image[None]).value[0]


def _init_head_params(rng: np.random.Generator, n_features: int,
                      head: HeadSpec) -> list:
    params = []
    fan_in = n_features
    if head.hidden_units > 0:
        params.append(nm.Parameter(_he_uniform(rng, (fan_in, head.hidden_units), fan_in)))
        params.append(nm.Parameter(np.zeros(head.hidden_units, dtype=np.float32)))
        fan_in = head.hidden_units
    params.append(nm.Parameter(_he_uniform(rng, (fan_in, head.output_neurons), fan_in)))
    params.append(nm.Parameter(np.zeros(head.output_neurons, dtype=np.float32)))
    return params


def build_classifier(backbone, head: HeadSpec, seed: int,
                     input_size: Optional[tuple] = None) -> NodeClassifier:
    """Assemble a classifier with freshly seeded parameters.

    `backbone` is either a BackboneSpec (fresh, trainable conv parameters
    are drawn first) or an existing Backbone instance to share, in which
    case only the head is initialized.  Same seed, same bits.
    """
    if head.output_neurons == 2 and head.output_activation != "sigmoid":
        raise ConfigurationError("2-neuron heads use sigmoid")  # HeadSpec already enforces
    rng = np.random.default_rng(seed)
    if isinstance(backbone, BackboneSpec):
        backbone = Backbone(backbone, rng=rng)
    elif not isinstance(backbone, Backbone):
        raise TypeError(f"backbone must be BackboneSpec or Backbone, got {type(backbone)}")
    head_params = _init_head_params(rng, backbone.spec.feature_channels, head)
    size = tuple(input_size) if input_size is not None else backbone.spec.input_size
    backbone.spec.feature_extent(size[0], size[1])
    return NodeClassifier(backbone, head, head_params, size)


def freeze_backbone(classifier: NodeClassifier) -> NodeClassifier:
    """Mark every backbone parameter non-trainable; idempotent."""
    classifier.backbone.freeze()
    return classifier


def shared_pretrain(backbone: BackboneSpec, dataset: "LabeledDataset",
                    config: "TrainingConfig",
                    validation: Optional["LabeledDataset"] = None) -> Backbone:
    """Train one backbone on all classes and return it frozen.

    A throwaway multiclass head is attached for the pretraining run and
    discarded; the frozen conv parameters are then shared by every node
    classifier and by the flat baseline.  When no validation set is given a
    stratified 20% holdout is carved from `dataset` for early stopping.
    """
    from . import training as tr
    from .data import holdout_split

    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    if validation is None:
        dataset, validation = holdout_split(dataset, 0.2, config.seed)
    k = len(dataset.classes)
    clf = build_classifier(backbone, HeadSpec.for_classes(k), seed=config.seed)
    history = tr.fit_classifier(clf, dataset, validation, config,
                                params=clf.parameters(), on_images=True)
    clf.training_history = history
    clf.backbone.freeze()
    return clf.backbone


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Sequence) -> None:
    """Binary checkpoint: magic, u16 version, then each tensor as
    (u8 ndim, u32 dims..., float32 data), all little-endian."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    for p in params:
        arr = np.ascontiguousarray(p.value, dtype="<f4")
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path, params: Sequence) -> None:
    """Load tensors saved by save_checkpoint into `params`, in order.

    Shapes must match exactly and the file must contain exactly the
    declared tensors; trainable flags are left untouched.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a classifier checkpoint: {path}")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 6
    for i, p in enumerate(params):
        ndim = struct.unpack_from("<B", blob, offset)[0]
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        if shape != p.value.shape:
            raise ValueError(f"checkpoint tensor {i} has shape {shape}, "
                             f"expected {p.value.shape}")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        p.value = data.reshape(shape).astype(np.float32)
        p.gradient = np.zeros_like(p.value)
        p.version += 1
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint {path}")


def parameter_checksum(params: Sequence) -> str:
    """Hex digest of the exact parameter bytes; for freeze-invariance checks."""
    import hashlib
    digest = hashlib.sha256()
    for p in params:
        digest.update(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return digest.hexdigest()
