"""Universal-graph distantly supervised relation extraction.

Builds a joint graph over a knowledge graph and a text corpus,
retrieves bounded multi-hop paths between entity pairs, and classifies
bag-level relations with attention over sentence and path evidence,
including the path-type pretraining schedule and complexity-ranked
attention debiasing strategies.
"""

__version__ = "0.1.0"

from .complexity import ComplexityWeights, complexity_score, rank_and_group
from .data_io import (
    Bag,
    Dataset,
    PathEvidence,
    SentenceEvidence,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    strip_paths,
)
from .ug_store import UGPath, UniversalGraph

__all__ = [
    "Bag",
    "ComplexityWeights",
    "Dataset",
    "PathEvidence",
    "SentenceEvidence",
    "SyntheticSpec",
    "UGPath",
    "UniversalGraph",
    "complexity_score",
    "generate_synthetic",
    "load_dataset",
    "rank_and_group",
    "save_dataset",
    "strip_paths",
]
