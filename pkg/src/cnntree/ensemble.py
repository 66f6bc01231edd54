"""Class-partition trees and decision-chain routing.

An ensemble is a tree whose internal nodes group the remaining classes
into ordered super-groups; each internal node owns one classifier over its
groups.  Inference walks the tree taking the argmax branch at every node
(ties break to the lowest group index) until it reaches a single class.
There is no voting and no score fusion across nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .data import LabeledDataset, resize_batch_bilinear, resize_bilinear


class TreeError(ValueError):
    """Raised for malformed partitions or tree structures."""


class UntrainedNodeError(RuntimeError):
    """Raised when routing reaches a node without a trained classifier."""


Size = tuple[int, int]


def normalize_size(size) -> Size:
    if isinstance(size, int):
        return (size, size)
    h, w = size
    return (int(h), int(w))


@dataclass(frozen=True)
class ClassPartition:
    """Ordered, disjoint, nonempty groups of class labels."""

    groups: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if len(groups) < 2:
            raise TreeError(f"a partition needs at least 2 groups, got {len(groups)}")
        seen: set = set()
        for g in groups:
            if not g:
                raise TreeError("partition groups must be nonempty")
            overlap = seen & set(g)
            if overlap:
                raise TreeError(f"classes {sorted(overlap)} appear in more than one group")
            seen |= set(g)

    @property
    def class_set(self) -> frozenset:
        return frozenset(c for g in self.groups for c in g)

    def group_label(self, i: int) -> str:
        return "+".join(self.groups[i])

    def group_of(self, label: str) -> int:
        for i, g in enumerate(self.groups):
            if label in g:
                return i
        raise KeyError(f"class {label!r} is not in this partition")


@dataclass
class TreeSpec:
    """One internal node: its partition, a child subtree per multi-class
    group (None marks a singleton leaf), and the test-time input size once
    selection has committed one."""

    partition: ClassPartition
    children: tuple[Optional["TreeSpec"], ...]
    input_size: Optional[Size] = None

    def __post_init__(self):
        groups = self.partition.groups
        if len(self.children) != len(groups):
            raise TreeError(f"node has {len(groups)} groups but "
                            f"{len(self.children)} children")
        for group, child in zip(groups, self.children):
            if child is None:
                if len(group) != 1:
                    raise TreeError(f"group {group} has several classes but no child node")
            else:
                if len(group) == 1:
                    raise TreeError(f"singleton group {group} must be a leaf")
                if child.partition.class_set != frozenset(group):
                    raise TreeError(f"child covers {sorted(child.partition.class_set)} "
                                    f"but its group is {sorted(group)}")

    @property
    def arity(self) -> int:
        return len(self.partition.groups)

    @property
    def class_set(self) -> frozenset:
        return self.partition.class_set

    def leaves(self) -> tuple[str, ...]:
        out: list[str] = []
        for group, child in zip(self.partition.groups, self.children):
            out.extend(child.leaves() if child is not None else group)
        return tuple(out)

    def walk_internal(self, node_id: str = "root") -> Iterator[tuple[str, "TreeSpec"]]:
        """Preorder traversal of internal nodes as (node_id, spec)."""
        yield node_id, self
        for i, child in enumerate(self.children):
            if child is not None:
                yield from child.walk_internal(f"{node_id}.{i}")

    def node(self, node_id: str) -> "TreeSpec":
        for nid, spec in self.walk_internal():
            if nid == node_id:
                return spec
        raise KeyError(f"no internal node {node_id!r}")


def validate_leaf_coverage(spec: TreeSpec, classes: Sequence[str]) -> None:
    """Every class label must land in exactly one leaf."""
    leaves = spec.leaves()
    if len(leaves) != len(set(leaves)):
        raise TreeError("a class appears in more than one leaf")
    if set(leaves) != set(classes):
        raise TreeError(f"tree covers {sorted(leaves)} but expected {sorted(classes)}")


# ---------------------------------------------------------------------------
# canonical structures


def _binary_leaf_node(a: str, b: str) -> TreeSpec:
    return TreeSpec(ClassPartition(((a,), (b,))), (None, None))


def canonical_four_class(classes: Sequence[str]) -> TreeSpec:
    """Binary root over the first/last pairs, two binary second-stage nodes."""
    if len(classes) != 4 or len(set(classes)) != 4:
        raise TreeError(f"need exactly 4 distinct classes, got {list(classes)}")
    c1, c2, c3, c4 = classes
    return TreeSpec(
        ClassPartition(((c1, c2), (c3, c4))),
        (_binary_leaf_node(c1, c2), _binary_leaf_node(c3, c4)))


def canonical_six_class_s1(classes: Sequence[str]) -> TreeSpec:
    """Three-way root over consecutive pairs, three binary second-stage nodes."""
    if len(classes) != 6 or len(set(classes)) != 6:
        raise TreeError(f"need exactly 6 distinct classes, got {list(classes)}")
    c1, c2, c3, c4, c5, c6 = classes
    return TreeSpec(
        ClassPartition(((c1, c2), (c3, c4), (c5, c6))),
        (_binary_leaf_node(c1, c2), _binary_leaf_node(c3, c4),
         _binary_leaf_node(c5, c6)))


def canonical_six_class_s2(classes: Sequence[str]) -> TreeSpec:
    """Binary root splitting (c1,c2,c3) from (c5,c6,c4) - the second group
    keeps that exact order - with two three-way second-stage nodes."""
    if len(classes) != 6 or len(set(classes)) != 6:
        raise TreeError(f"need exactly 6 distinct classes, got {list(classes)}")
    c1, c2, c3, c4, c5, c6 = classes
    left = TreeSpec(ClassPartition(((c1,), (c2,), (c3,))), (None, None, None))
    right = TreeSpec(ClassPartition(((c5,), (c6,), (c4,))), (None, None, None))
    return TreeSpec(ClassPartition(((c1, c2, c3), (c5, c6, c4))), (left, right))


def generic_tree(classes: Sequence[str], branching: Union[int, Sequence[int]]) -> TreeSpec:
    """Contiguous balanced grouping in the given class order, recursing
    until singleton leaves.  `branching` may vary per depth (last entry
    repeats); reproduces the four-class structure for (4, 2) and structure
    #1 for (6, [3, 2])."""
    classes = tuple(classes)
    if len(classes) < 2:
        raise TreeError(f"need at least 2 classes, got {len(classes)}")
    if len(set(classes)) != len(classes):
        raise TreeError("classes must be distinct")
    levels = (branching,) if isinstance(branching, int) else tuple(branching)
    if not levels or any(b < 2 for b in levels):
        raise TreeError(f"branching factors must be >= 2, got {branching}")

    def build(subset: tuple[str, ...], depth: int) -> TreeSpec:
        b = levels[min(depth, len(levels) - 1)]
        n_groups = min(b, len(subset))
        base, extra = divmod(len(subset), n_groups)
        groups, start = [], 0
        for i in range(n_groups):
            size = base + (1 if i < extra else 0)
            groups.append(subset[start:start + size])
            start += size
        children = tuple(build(g, depth + 1) if len(g) > 1 else None for g in groups)
        return TreeSpec(ClassPartition(tuple(groups)), children)

    return build(classes, 0)


# ---------------------------------------------------------------------------
# the runnable ensemble


@dataclass
class RoutingStep:
    node_id: str
    scores: np.ndarray
    chosen: int
    group: tuple[str, ...]


@dataclass
class RoutingTrace:
    steps: tuple[RoutingStep, ...]
    predicted: str

    def path(self) -> tuple[tuple[str, int], ...]:
        return tuple((s.node_id, s.chosen) for s in self.steps)


class EnsembleTree:
    """A TreeSpec plus one trained classifier per internal node."""

    def __init__(self, spec: TreeSpec, classifiers: dict, classes: Sequence[str]):
        self.spec = spec
        self.classifiers = dict(classifiers)
        self.classes = tuple(classes)
        validate_leaf_coverage(spec, self.classes)
        for node_id, node in spec.walk_internal():
            clf = self.classifiers.get(node_id)
            if clf is not None and clf.head_spec.output_neurons != node.arity:
                raise TreeError(f"node {node_id} has {node.arity} groups but its "
                                f"classifier outputs {clf.head_spec.output_neurons}")

    def classifier_for(self, node_id: str):
        clf = self.classifiers.get(node_id)
        if clf is None:
            raise UntrainedNodeError(f"node {node_id} has no trained classifier")
        return clf

    def node_ids(self) -> tuple[str, ...]:
        return tuple(nid for nid, _ in self.spec.walk_internal())


def node_test_size(node: TreeSpec, classifier) -> Size:
    if node.input_size is not None:
        return node.input_size
    return tuple(classifier.input_size[:2])


def route(tree: EnsembleTree, image: np.ndarray) -> RoutingTrace:
    """Decision-chain inference: argmax at each node, descend, repeat.

    The image is resized to each node's chosen input size before that
    node's classifier scores it.  Exact score ties go to the lowest group
    index.
    """
    steps = []
    node_id, node = "root", tree.spec
    while True:
        clf = tree.classifier_for(node_id)
        size = node_test_size(node, clf)
        sized = image if tuple(image.shape[:2]) == size else resize_bilinear(image, size)
        scores = clf.predict(sized)
        chosen = int(np.argmax(scores))
        group = node.partition.groups[chosen]
        steps.append(RoutingStep(node_id, scores, chosen, group))
        child = node.children[chosen]
        if child is None:
            return RoutingTrace(tuple(steps), group[0])
        node_id, node = f"{node_id}.{chosen}", child


def node_accuracy_at_size(classifier, validation: LabeledDataset, size: Size) -> float:
    """Fraction of a node-local (already relabeled) validation set the
    classifier gets right when images are resized to `size` first."""
    resized = resize_batch_bilinear(validation.images, size)
    probs = classifier.score_images(resized)
    predicted = probs.argmax(axis=1)
    return float((predicted == validation.label_indices()).mean())


def select_node_input_size(classifier, validation: LabeledDataset,
                           candidates: Sequence) -> tuple[Size, dict]:
    """Pick the test-time size with the best node-local validation accuracy.

    Returns (chosen size, {size: accuracy}).  Ties go to the smaller size;
    candidates are compared after normalizing ints to square sizes.
    """
    if not candidates:
        raise ValueError("need at least one candidate size")
    if len(validation) == 0:
        raise ValueError("validation subset for size selection is empty")
    sizes = [normalize_size(c) for c in candidates]
    accuracies = {}
    best_size, best_acc = None, -1.0
    for size in sorted(set(sizes), key=lambda s: (s[0] * s[1], s)):
        acc = node_accuracy_at_size(classifier, validation, size)
        accuracies[size] = acc
        if acc > best_acc:
            best_size, best_acc = size, acc
    return best_size, accuracies


def commit_node_size(tree: EnsembleTree, node_id: str, size: Size) -> None:
    """Record a chosen size on the spec node and its classifier."""
    node = tree.spec.node(node_id)
    node.input_size = normalize_size(size)
    clf = tree.classifier_for(node_id)
    clf.input_size = (*node.input_size, clf.input_size[2])


# ---------------------------------------------------------------------------
# tree manifest


def _node_to_dict(node: TreeSpec, node_id: str, checkpoints: dict) -> dict:
    return {
        "groups": [list(g) for g in node.partition.groups],
        "input_size": list(node.input_size) if node.input_size else None,
        "checkpoint": checkpoints.get(node_id),
        "children": [
            _node_to_dict(child, f"{node_id}.{i}", checkpoints) if child else None
            for i, child in enumerate(node.children)
        ],
    }


def _node_from_dict(d: dict) -> TreeSpec:
    groups = tuple(tuple(g) for g in d["groups"])
    children = tuple(_node_from_dict(c) if c else None for c in d["children"])
    size = tuple(d["input_size"]) if d.get("input_size") else None
    return TreeSpec(ClassPartition(groups), children, input_size=size)


def write_tree_manifest(path, spec: TreeSpec, classes: Sequence[str],
                        checkpoints: Optional[dict] = None) -> None:
    doc = {
        "version": 1,
        "classes": list(classes),
        "root": _node_to_dict(spec, "root", checkpoints or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_tree_manifest(path) -> tuple[TreeSpec, tuple[str, ...], dict]:
    """Returns (spec, classes, {node_id: checkpoint path or None})."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise ValueError(f"unsupported tree manifest version {doc.get('version')}")
    spec = _node_from_dict(doc["root"])
    checkpoints = {}

    def collect(d: dict, node_id: str) -> None:
        checkpoints[node_id] = d.get("checkpoint")
        for i, c in enumerate(d["children"]):
            if c:
                collect(c, f"{node_id}.{i}")

    collect(doc["root"], "root")
    classes = tuple(doc["classes"])
    validate_leaf_coverage(spec, classes)
    return spec, classes, checkpoints
