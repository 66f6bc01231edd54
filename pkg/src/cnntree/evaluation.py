"""Accuracy reports, routing diagnostics, input-size sweeps, and the
baseline-vs-ensemble comparison tables.

Counts are stored exactly (correct/total integers); accuracies are only
rounded when rendered, to 4 decimal places.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import LabeledDataset, resize_batch_bilinear
from .ensemble import (EnsembleTree, Size, node_test_size, normalize_size,
                       route, select_node_input_size, commit_node_size)
from .training import relabel_for_node


@dataclass(frozen=True)
class NodeStats:
    correct: int
    total: int
    input_size: tuple[int, int]


@dataclass(frozen=True)
class EvaluationReport:
    model_id: str
    correct: int
    total: int
    class_list: tuple[str, ...]
    per_class: dict[str, tuple[int, int]]
    per_node: Optional[dict[str, NodeStats]] = None
    first_error_node: Optional[dict[str, int]] = None

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def to_json(self) -> str:
        doc = {
            "model_id": self.model_id,
            "correct": self.correct,
            "total": self.total,
            "class_list": list(self.class_list),
            "per_class": {c: list(v) for c, v in self.per_class.items()},
            "per_node": None if self.per_node is None else {
                n: {"correct": s.correct, "total": s.total,
                    "input_size": list(s.input_size)}
                for n, s in self.per_node.items()},
            "first_error_node": self.first_error_node,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        doc = json.loads(text)
        per_node = doc["per_node"]
        if per_node is not None:
            per_node = {n: NodeStats(v["correct"], v["total"], tuple(v["input_size"]))
                        for n, v in per_node.items()}
        return cls(model_id=doc["model_id"], correct=doc["correct"],
                   total=doc["total"], class_list=tuple(doc["class_list"]),
                   per_class={c: tuple(v) for c, v in doc["per_class"].items()},
                   per_node=per_node, first_error_node=doc["first_error_node"])

    def render_text(self) -> str:
        lines = [f"model: {self.model_id}",
                 f"test accuracy: {self.accuracy:.4f}  ({self.correct}/{self.total})",
                 "per-class:"]
        for c in self.class_list:
            corr, tot = self.per_class[c]
            lines.append(f"  {c:<12} {corr / tot:.4f}  ({corr}/{tot})")
        if self.per_node:
            lines.append("per-node (node-relevant samples):")
            for n, s in self.per_node.items():
                lines.append(f"  {n:<10} {s.correct / s.total:.4f}  ({s.correct}/{s.total})"
                             f"  size={s.input_size[0]}x{s.input_size[1]}")
        if self.first_error_node:
            lines.append("first-error attribution:")
            for n, count in self.first_error_node.items():
                lines.append(f"  {n:<10} {count}")
        return "\n".join(lines) + "\n"


def _per_class_counts(classes: Sequence[str], truths: Sequence[str],
                      hits: Sequence[bool]) -> dict:
    counts = {c: [0, 0] for c in classes}
    for label, hit in zip(truths, hits):
        counts[label][1] += 1
        counts[label][0] += int(hit)
    return {c: (v[0], v[1]) for c, v in counts.items()}


def _node_decisions(tree: EnsembleTree, dataset: LabeledDataset,
                    size_of: Optional[Callable] = None) -> dict:
    """Replay every internal node independently over its relevant samples.

    Returns {node_id: (relevant sample indices, chose-true-group flags,
    chosen size)}.  A sample is relevant to a node when its true class
    belongs to the node's incoming class set.
    """
    labels = dataset.labels
    out = {}
    for node_id, node in tree.spec.walk_internal():
        clf = tree.classifier_for(node_id)
        size = size_of(node_id, node, clf) if size_of else node_test_size(node, clf)
        relevant = np.array([i for i, l in enumerate(labels) if l in node.class_set],
                            dtype=np.int64)
        images = resize_batch_bilinear(dataset.images[relevant], size)
        chosen = clf.score_images(images).argmax(axis=1)
        true_groups = np.array([node.partition.group_of(labels[i]) for i in relevant])
        out[node_id] = (relevant, chosen == true_groups, size)
    return out


def replay_accuracy(tree: EnsembleTree, dataset: LabeledDataset,
                    size_of: Optional[Callable] = None) -> float:
    """Ensemble accuracy computed node-by-node: a sample counts as correct
    exactly when every node on its true-class path chose the true group."""
    correct = np.ones(len(dataset), dtype=bool)
    for relevant, ok, _ in _node_decisions(tree, dataset, size_of).values():
        correct[relevant] &= ok
    return float(correct.mean())


def evaluate(model, test_set: LabeledDataset, model_id: Optional[str] = None
             ) -> EvaluationReport:
    """Evaluate a flat classifier or an EnsembleTree on a test set.

    Ensemble reports add per-node accuracies over node-relevant samples and
    attribute each misclassified sample to the first wrong node on its
    true-class path.
    """
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    if isinstance(model, EnsembleTree):
        if set(model.classes) != set(test_set.classes):
            raise ValueError(f"ensemble classes {sorted(model.classes)} do not match "
                             f"test classes {sorted(test_set.classes)}")
        hits, first_error = [], {nid: 0 for nid in model.node_ids()}
        for i in range(len(test_set)):
            truth = test_set.labels[i]
            trace = route(model, test_set.images[i])
            hit = trace.predicted == truth
            hits.append(hit)
            if not hit:
                for step in trace.steps:
                    if truth not in step.group:
                        first_error[step.node_id] += 1
                        break
        per_node = {}
        for node_id, (relevant, ok, size) in _node_decisions(model, test_set).items():
            per_node[node_id] = NodeStats(int(ok.sum()), int(len(relevant)), tuple(size))
        return EvaluationReport(
            model_id=model_id or "ensemble",
            correct=int(np.sum(hits)), total=len(test_set),
            class_list=test_set.classes,
            per_class=_per_class_counts(test_set.classes, test_set.labels, hits),
            per_node=per_node,
            first_error_node={n: c for n, c in first_error.items()})

    # flat classifier
    if model.classes is None or tuple(model.classes) != test_set.classes:
        raise ValueError(f"classifier classes {model.classes} do not match "
                         f"test classes {test_set.classes}")
    images = resize_batch_bilinear(test_set.images, model.input_size[:2])
    predicted = model.score_images(images).argmax(axis=1)
    truth_idx = test_set.label_indices()
    hits = (predicted == truth_idx).tolist()
    return EvaluationReport(
        model_id=model_id or "baseline",
        correct=int(np.sum(hits)), total=len(test_set),
        class_list=test_set.classes,
        per_class=_per_class_counts(test_set.classes, test_set.labels, hits))


# ---------------------------------------------------------------------------
# input-size sweep


@dataclass(frozen=True)
class SweepReport:
    """Per-node accuracy grid plus whole-ensemble validation accuracy at
    each uniform size and at the committed per-node sizes."""

    grid: dict[str, dict[Size, float]]
    committed: dict[str, Size]
    uniform_accuracy: dict[Size, float]
    committed_accuracy: float

    def to_json(self) -> str:
        doc = {
            "grid": {n: {f"{s[0]}x{s[1]}": a for s, a in row.items()}
                     for n, row in self.grid.items()},
            "committed": {n: list(s) for n, s in self.committed.items()},
            "uniform_accuracy": {f"{s[0]}x{s[1]}": a
                                 for s, a in self.uniform_accuracy.items()},
            "committed_accuracy": self.committed_accuracy,
        }
        return json.dumps(doc, indent=2) + "\n"

    def render_text(self) -> str:
        nodes = list(self.grid)
        sizes = sorted({s for row in self.grid.values() for s in row},
                       key=lambda s: (s[0] * s[1], s))
        head = "test image size      " + "".join(f"{n:<12}" for n in nodes) + "ensemble"
        lines = [head]
        for s in sizes:
            cells = "".join(f"{self.grid[n].get(s, float('nan')):<12.4f}" for n in nodes)
            lines.append(f"{s[0]}x{s[1]:<17} {cells}{self.uniform_accuracy[s]:.4f}")
        cells = "".join(
            f"{self.grid[n][self.committed[n]]:<12.4f}" if n in self.committed else f"{'-':<12}"
            for n in nodes)
        lines.append(f"{'node-specific':<19} {cells}{self.committed_accuracy:.4f}")
        return "\n".join(lines) + "\n"


def size_sweep(tree: EnsembleTree, validation: LabeledDataset,
               candidates: Sequence, include_root: bool = False
               ) -> tuple[SweepReport, EnsembleTree]:
    """Evaluate each second-stage node at every candidate size on its
    node-local validation subset, commit the per-node argmax sizes, and
    report the full grid alongside whole-ensemble accuracies."""
    if not candidates:
        raise ValueError("need at least one candidate size")
    sizes = sorted({normalize_size(c) for c in candidates},
                   key=lambda s: (s[0] * s[1], s))
    grid, committed = {}, {}
    for node_id, node in tree.spec.walk_internal():
        if node_id == "root" and not include_root:
            continue
        val_local = relabel_for_node(validation, node.partition)
        chosen, accuracies = select_node_input_size(
            tree.classifier_for(node_id), val_local, sizes)
        grid[node_id] = accuracies
        committed[node_id] = chosen

    uniform = {}
    for s in sizes:
        swept = lambda node_id, node, clf, s=s: (
            s if (node_id != "root" or include_root) else node_test_size(node, clf))
        uniform[s] = replay_accuracy(tree, validation, size_of=swept)
    for node_id, size in committed.items():
        commit_node_size(tree, node_id, size)
    committed_acc = replay_accuracy(tree, validation)
    report = SweepReport(grid=grid, committed=committed,
                         uniform_accuracy=uniform, committed_accuracy=committed_acc)
    return report, tree


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ComparisonReport:
    baseline_id: str
    ensemble_id: str
    baseline_correct: int
    ensemble_correct: int
    total: int
    class_list: tuple[str, ...]
    per_class_baseline: dict[str, tuple[int, int]]
    per_class_ensemble: dict[str, tuple[int, int]]

    @property
    def baseline_accuracy(self) -> float:
        return self.baseline_correct / self.total

    @property
    def ensemble_accuracy(self) -> float:
        return self.ensemble_correct / self.total

    @property
    def delta(self) -> float:
        return self.ensemble_accuracy - self.baseline_accuracy

    def to_json(self) -> str:
        doc = {
            "baseline_id": self.baseline_id,
            "ensemble_id": self.ensemble_id,
            "baseline_correct": self.baseline_correct,
            "ensemble_correct": self.ensemble_correct,
            "total": self.total,
            "class_list": list(self.class_list),
            "per_class_baseline": {c: list(v) for c, v in self.per_class_baseline.items()},
            "per_class_ensemble": {c: list(v) for c, v in self.per_class_ensemble.items()},
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        doc = json.loads(text)
        return cls(baseline_id=doc["baseline_id"], ensemble_id=doc["ensemble_id"],
                   baseline_correct=doc["baseline_correct"],
                   ensemble_correct=doc["ensemble_correct"], total=doc["total"],
                   class_list=tuple(doc["class_list"]),
                   per_class_baseline={c: tuple(v) for c, v
                                       in doc["per_class_baseline"].items()},
                   per_class_ensemble={c: tuple(v) for c, v
                                       in doc["per_class_ensemble"].items()})

    def render_text(self) -> str:
        width = max(len(self.baseline_id), len(self.ensemble_id), len("delta")) + 2
        lines = ["approach".ljust(width) + "accuracy",
                 f"{self.baseline_id:<{width}}{self.baseline_accuracy:.4f}",
                 f"{self.ensemble_id:<{width}}{self.ensemble_accuracy:.4f}",
                 f"{'delta':<{width}}{self.delta:+.4f}"]
        if abs(self.baseline_correct - self.ensemble_correct) == 1:
            lines.append("note: classification counts differ by only one image")
        lines.append("")
        lines.append("per-class accuracy (baseline / ensemble):")
        for c in self.class_list:
            bc, bt = self.per_class_baseline[c]
            ec, et = self.per_class_ensemble[c]
            lines.append(f"  {c:<12} {bc / bt:.4f} / {ec / et:.4f}")
        return "\n".join(lines) + "\n"


def compare_report(baseline: EvaluationReport, ensemble: EvaluationReport
                   ) -> ComparisonReport:
    """Side-by-side accuracy comparison; both reports must come from the
    same test set (same sample count and class list)."""
    if baseline.total != ensemble.total or \
            sorted(baseline.class_list) != sorted(ensemble.class_list):
        raise ValueError("reports come from different test sets "
                         f"({baseline.total} vs {ensemble.total} samples, "
                         f"{sorted(baseline.class_list)} vs {sorted(ensemble.class_list)})")
    return ComparisonReport(
        baseline_id=baseline.model_id, ensemble_id=ensemble.model_id,
        baseline_correct=baseline.correct, ensemble_correct=ensemble.correct,
        total=baseline.total, class_list=baseline.class_list,
        per_class_baseline=dict(baseline.per_class),
        per_class_ensemble=dict(ensemble.per_class))
