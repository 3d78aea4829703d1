"""Clustering radio signals by modulation type with a transfer-pretrained CNN.

Pipeline: synthesize or ingest I/Q signal datasets, pre-train a small CNN on a
labeled auxiliary set with a pairwise similarity loss, fine-tune it on an
unlabeled target set with threshold-gated self-labeled pairs, then read cluster
assignments straight off the feature argmax. Includes NMI/ARI/ACC evaluation
and a K-means baseline.
"""

from . import dataset, kernels, losses, metrics, nn, trainer  # noqa: F401

__version__ = "0.1.0"
