"""Affine subspace representation (ASR) descriptors for local image features.

Typical use::

    from asr import detect_dog, load_model, describe, read_image
    img = read_image("scene.png")
    model = load_model("asr.model")
    kps = detect_dog(img)
    descs = describe(img, kps, model, mode="fast")
"""

from .descriptor import (describe, describe_one, descriptor_distance, loss_rate,
                         read_descriptors, subspace_fit, subspace_to_point, write_descriptors)
from .detect import DogParams, detect_dog, read_keypoints, write_keypoints
from .geometry import ViewParams, affine_from_view, ellipse_overlap, sample_views, view_ellipse
from .matchbench import (baseline_single_view, bench_timing, ground_truth_correspondences,
                         match_nndr, recall_precision_curve)
from .model import ASRParams, TrainedModel, load_model, save_model, train_model
from .patch import Keypoint, estimate_orientation, extract_patch, read_image, warp_patch

__version__ = "0.1.0"

__all__ = [
    "ASRParams", "DogParams", "Keypoint", "TrainedModel", "ViewParams",
    "affine_from_view", "baseline_single_view", "bench_timing", "describe", "describe_one",
    "descriptor_distance", "detect_dog", "ellipse_overlap", "estimate_orientation",
    "extract_patch", "ground_truth_correspondences", "load_model", "loss_rate", "match_nndr",
    "read_descriptors", "read_image", "read_keypoints", "recall_precision_curve",
    "sample_views", "save_model", "subspace_fit", "subspace_to_point", "train_model",
    "view_ellipse", "warp_patch", "write_descriptors", "write_keypoints",
]
