"""Decision-chain tree ensembles of small CNN classifiers.

A class-partition tree routes each image through one classifier per
internal node (coarse super-groups first, single classes at the leaves)
and is compared against a flat multiclass baseline trained with the same
frozen backbone and protocol.
"""

from .data import (DatasetSplit, LabeledDataset, load_directory_dataset,
                   resize_bilinear, split_dataset, synth_shapes_dataset)
from .ensemble import (ClassPartition, EnsembleTree, RoutingTrace, TreeSpec,
                       canonical_four_class, canonical_six_class_s1,
                       canonical_six_class_s2, generic_tree, route,
                       select_node_input_size)
from .evaluation import (ComparisonReport, EvaluationReport, compare_report,
                         evaluate, size_sweep)
from .model import (Backbone, BackboneSpec, HeadSpec, NodeClassifier,
                    build_classifier, freeze_backbone, load_checkpoint,
                    save_checkpoint, shared_pretrain)
from .numerics import (AdamState, Parameter, adam_step, backward,
                       binary_cross_entropy, categorical_cross_entropy,
                       conv2d, dense, maxpool2d, relu, sigmoid, softmax)
from .training import (TrainingConfig, TrainingHistory, relabel_for_node,
                       train_ensemble, train_flat_baseline, train_node)

__version__ = "0.1.0"
