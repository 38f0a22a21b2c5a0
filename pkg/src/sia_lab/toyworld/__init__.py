"""Desk-scale synthetic domain: analytic generator plus small trainable targets."""

from .targets import (
    ToyClassifier,
    ToyKeypointDetector,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
    train_keypoint_detector,
)
from .world import (
    AnalyticGenerator,
    LabelRule,
    PatternBasis,
    ToyDataset,
    ToySample,
    generate_dataset,
    heatmap_from_keypoints,
    load_dataset,
    make_basis,
    regenerate,
    render,
    save_dataset,
)
