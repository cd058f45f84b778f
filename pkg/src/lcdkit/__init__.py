"""Loop-closure detection engine and evaluation harness."""

__version__ = "0.1.0"

from lcdkit.geometry import (
    GroundTruth,
    Pose,
    RelPoseDelta,
    build_ground_truth,
    cluster_ground_truth,
    parse_pose_file,
    relative_delta,
)
from lcdkit.descriptors import (
    DescriptorNormalizer,
    DescriptorSet,
    LocalFeatureSet,
    load_descriptors,
    normalize,
    save_descriptors,
    synth_descriptors,
    synth_local_features,
)
from lcdkit.index import FlatIndex, IvfIndex, RetrievalResult
from lcdkit.bow import BowVector, InvertedIndex, VocabularyTree
from lcdkit.metrics import (
    ClassCounts,
    PRCurve,
    QueryOutcome,
    classify,
    pr_curve,
    recall_at_n,
    similarity_heatmap,
)
from lcdkit.pipeline import (
    LcdConfig,
    LoopClosureDetector,
    LoopClosureEvent,
    TimingReport,
    benchmark,
    run_online,
    sequence_consistency,
)

__all__ = [
    "BowVector",
    "ClassCounts",
    "DescriptorNormalizer",
    "DescriptorSet",
    "FlatIndex",
    "GroundTruth",
    "InvertedIndex",
    "IvfIndex",
    "LcdConfig",
    "LocalFeatureSet",
    "LoopClosureDetector",
    "LoopClosureEvent",
    "PRCurve",
    "Pose",
    "QueryOutcome",
    "RelPoseDelta",
    "RetrievalResult",
    "TimingReport",
    "VocabularyTree",
    "benchmark",
    "build_ground_truth",
    "classify",
    "cluster_ground_truth",
    "load_descriptors",
    "normalize",
    "parse_pose_file",
    "pr_curve",
    "recall_at_n",
    "relative_delta",
    "run_online",
    "save_descriptors",
    "sequence_consistency",
    "similarity_heatmap",
    "synth_descriptors",
    "synth_local_features",
]
