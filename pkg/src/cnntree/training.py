"""Training loops: per-node dataset relabeling, early-stopped head training
on frozen-backbone features, and whole-ensemble / flat-baseline
orchestration.

All runs are seeded and deterministic; per-node seeds are derived from the
global seed and the node id so nodes can be trained in any order (or in
parallel) with identical results.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .data import DatasetSplit, LabeledDataset, resize_batch_bilinear
from .ensemble import (ClassPartition, EnsembleTree, TreeSpec, commit_node_size,
                       select_node_input_size, validate_leaf_coverage)
from .model import (Backbone, HeadSpec, NodeClassifier, build_classifier,
                    save_checkpoint)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size_large: int = 32
    batch_size_small: int = 16
    small_category_threshold: int = 400  # training images per class
    patience: int = 7
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size_large < 1 or self.batch_size_small < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass(frozen=True)
class TrainingHistory:
    epochs: tuple[EpochStats, ...]
    stopped_epoch: int
    best_epoch: int

    def log_lines(self) -> list[str]:
        lines = [f"{e.epoch}\t{e.train_loss:.6f}\t{e.val_loss:.6f}\t{e.val_acc:.6f}"
                 for e in self.epochs]
        lines.append(f"stopped={self.stopped_epoch} best={self.best_epoch}")
        return lines


class EarlyStopper:
    """Tracks the best validation loss; stops after `patience` epochs
    without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0

    def observe(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when it improved on the best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def derive_node_seed(seed: int, node_id: str) -> int:
    """Stable per-node seed: global seed xor a hash of the node id."""
    return (seed ^ zlib.crc32(node_id.encode("utf-8"))) & 0x7FFFFFFF


def pick_batch_size(train_set: LabeledDataset, config: TrainingConfig) -> int:
    """Paper rule: the larger mini-batch for large image categories, the
    smaller one otherwise; keyed on the smallest per-class training count."""
    smallest = min(train_set.class_counts().values())
    if smallest < config.small_category_threshold:
        return config.batch_size_small
    return config.batch_size_large


def loss_for_head(head: HeadSpec) -> Callable:
    if head.output_activation == "sigmoid":
        return nm.binary_cross_entropy
    return nm.categorical_cross_entropy


def fit_minibatch(params: Sequence[nm.Parameter],
                  make_loss: Callable[[np.ndarray], nm.Node],
                  eval_validation: Callable[[], tuple[float, float]],
                  n_samples: int, batch_size: int, config: TrainingConfig,
                  rng: np.random.Generator) -> TrainingHistory:
    """Generic Adam loop with early stopping on validation loss.

    `make_loss(indices)` builds the batch loss node; `eval_validation()`
    returns (val_loss, val_acc).  The parameters are restored to their
    best-validation-loss epoch before returning.
    """
    states = [nm.AdamState(p.value.shape, config.learning_rate, config.beta1,
                           config.beta2, config.epsilon) for p in params]
    stopper = EarlyStopper(config.patience)
    best_values = [p.value.copy() for p in params]
    rows: list[EpochStats] = []
    stopped = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_samples)
        batch_losses = []
        for start in range(0, n_samples, batch_size):
            loss = make_loss(order[start:start + batch_size])
            nm.backward(loss)
            for p, s in zip(params, states):
                nm.adam_step(p, s)
            batch_losses.append(float(loss.value))
        val_loss, val_acc = eval_validation()
        rows.append(EpochStats(epoch, float(np.mean(batch_losses)), val_loss, val_acc))
        if stopper.observe(epoch, val_loss):
            best_values = [p.value.copy() for p in params]
        stopped = epoch
        if stopper.should_stop(epoch):
            break
    for p, value in zip(params, best_values):
        p.value = value
        p.gradient = np.zeros_like(value)
        p.version += 1
    return TrainingHistory(tuple(rows), stopped_epoch=stopped,
                           best_epoch=stopper.best_epoch)


def _images_at(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(images.shape[1:3]) == tuple(size):
        return images
    return resize_batch_bilinear(images, size)


def fit_classifier(classifier: NodeClassifier, train_set: LabeledDataset,
                   val_set: LabeledDataset, config: TrainingConfig,
                   params: Sequence[nm.Parameter],
                   on_images: bool = False) -> TrainingHistory:
    """Fit `params` of a classifier on a labeled train/validation pair.

    With `on_images` the loss is built through the whole network (used for
    backbone pretraining).  Otherwise the frozen backbone's features are
    extracted once and only the head sees the optimizer, which is exactly
    equivalent and much faster.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if train_set.classes != val_set.classes:
        raise ValueError(f"train classes {train_set.classes} differ from "
                         f"validation classes {val_set.classes}")
    loss_op = loss_for_head(classifier.head_spec)
    y_train = train_set.one_hot_labels()
    y_val = val_set.one_hot_labels()
    val_idx = val_set.label_indices()
    size = classifier.input_size[:2]
    train_images = _images_at(train_set.images, size)
    val_images = _images_at(val_set.images, size)

    if on_images:
        def make_loss(idx):
            return loss_op(classifier.scores_graph(train_images[idx]), y_train[idx])

        def eval_validation():
            probs = classifier.score_images(val_images)
            loss = float(loss_op(probs, y_val).value)
            acc = float((probs.argmax(axis=1) == val_idx).mean())
            return loss, acc
    else:
        train_features = classifier.backbone.features(train_images)
        val_features = classifier.backbone.features(val_images)

        def make_loss(idx):
            return loss_op(classifier.head_graph(train_features[idx]), y_train[idx])

        def eval_validation():
            probs = classifier.head_graph(val_features).value
            loss = float(loss_op(probs, y_val).value)
            acc = float((probs.argmax(axis=1) == val_idx).mean())
            return loss, acc

    rng = np.random.default_rng(config.seed)
    return fit_minibatch(params, make_loss, eval_validation, len(train_set),
                         pick_batch_size(train_set, config), config, rng)


# ---------------------------------------------------------------------------
# node-level training


def relabel_for_node(dataset: LabeledDataset, partition: ClassPartition) -> LabeledDataset:
    """Collapse classes to super-group labels for one node's task.

    Samples of classes outside the partition are dropped; a sample whose
    class sits in groups[i] receives the i-th group label, so group counts
    are the sums of their member-class counts.
    """
    keep = partition.class_set
    idx = [i for i, label in enumerate(dataset.labels) if label in keep]
    if not idx:
        raise ValueError(f"no samples left after restricting to {sorted(keep)}")
    group_names = tuple(partition.group_label(i) for i in range(len(partition.groups)))
    sub = dataset.take(idx)
    labels = tuple(group_names[partition.group_of(l)] for l in sub.labels)
    return LabeledDataset(sub.images, labels, group_names, sub.sample_ids)


def train_node(classifier: NodeClassifier, train_set: LabeledDataset,
               val_set: LabeledDataset, config: TrainingConfig
               ) -> tuple[NodeClassifier, TrainingHistory]:
    """Train one node's head on its relabeled datasets.

    The backbone must already be frozen; the head arity must match the
    number of super-labels.  The loss follows the activation rule: binary
    cross-entropy for 2-neuron sigmoid heads, categorical otherwise.
    Returns the classifier holding its best-validation-loss weights.
    """
    if not classifier.backbone_frozen:
        raise ValueError("backbone must be frozen before node training")
    k = len(train_set.classes)
    if classifier.head_spec.output_neurons != k:
        raise ValueError(f"head has {classifier.head_spec.output_neurons} outputs "
                         f"but the dataset has {k} classes")
    history = fit_classifier(classifier, train_set, val_set, config,
                             params=list(classifier.head_params))
    classifier.classes = train_set.classes
    classifier.training_history = history
    return classifier, history


def train_flat_baseline(splits: DatasetSplit, config: TrainingConfig,
                        backbone: Backbone) -> tuple[NodeClassifier, TrainingHistory]:
    """The comparison baseline: one multiclass head over all classes on the
    same frozen backbone, trained with the identical protocol."""
    k = len(splits.classes)
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    seed = derive_node_seed(config.seed, "baseline")
    clf = build_classifier(backbone, HeadSpec.for_classes(k), seed=seed)
    return train_node(clf, splits.train, splits.validation, replace(config, seed=seed))


def train_ensemble(spec: TreeSpec, splits: DatasetSplit, config: TrainingConfig,
                   backbone: Backbone,
                   size_candidates: Optional[Sequence] = None,
                   include_root_in_sweep: bool = False,
                   out_dir=None,
                   train_fn: Optional[Callable] = None,
                   jobs: int = 1) -> EnsembleTree:
    """Train one classifier per internal tree node, then optionally select
    per-node test-time input sizes on the validation split.

    Nodes share the frozen backbone and are independent; with jobs > 1 they
    are trained concurrently with identical results.  When `out_dir` is
    given, per-node checkpoints, training logs and the tree manifest are
    written there.
    """
    validate_leaf_coverage(spec, splits.classes)
    trainer = train_fn if train_fn is not None else train_node
    nodes = list(spec.walk_internal())

    def fit_one(item):
        node_id, node = item
        seed = derive_node_seed(config.seed, node_id)
        train_ds = relabel_for_node(splits.train, node.partition)
        val_ds = relabel_for_node(splits.validation, node.partition)
        clf = build_classifier(backbone, HeadSpec.for_classes(node.arity), seed=seed)
        trainer(clf, train_ds, val_ds, replace(config, seed=seed))
        return node_id, clf

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(fit_one, nodes))
    else:
        results = [fit_one(item) for item in nodes]
    classifiers = dict(results)
    tree = EnsembleTree(spec, classifiers, splits.classes)

    if size_candidates:
        for node_id, node in nodes:
            if node_id == "root" and not include_root_in_sweep:
                continue
            val_local = relabel_for_node(splits.validation, node.partition)
            chosen, _ = select_node_input_size(classifiers[node_id], val_local,
                                               size_candidates)
            commit_node_size(tree, node_id, chosen)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoints = {}
        for node_id, _ in nodes:
            clf = classifiers[node_id]
            name = f"{node_id}.ckpt"
            save_checkpoint(out_dir / name, clf.parameters())
            checkpoints[node_id] = name
            if clf.training_history is not None:
                (out_dir / f"{node_id}.log").write_text(
                    "\n".join(clf.training_history.log_lines()) + "\n", encoding="utf-8")
        from .ensemble import write_tree_manifest
        write_tree_manifest(out_dir / "tree.json", spec, splits.classes, checkpoints)
    return tree
