"""Keypoint-based panoptic image parsing.

Dense prediction maps (a keypoint heatmap plus short/middle/long-range
offset fields) are fused into a panoptic segmentation in a single pass,
training targets for those maps are generated from panoptic ground
truth, and results are scored with Panoptic Quality and Parsing
Covering. A seeded synthetic scene generator stands in for a network so
the whole pipeline is verifiable end to end.
"""

from .errors import (DimensionMismatchError, EmptyInstanceError,
                     GenerationError, InternalInvariantError,
                     InvalidAnnotationError, InvalidDistributionError,
                     InvalidInputError, PanopticError, TensorFormatError)
from .fusion import (FusionConfig, Instance, InstancePredictionMaps, Keypoint,
                     assign_pixels, detect_instances, fuse_panoptic,
                     hough_scores, localize_keypoints, nms_instances, parse,
                     refine_offsets)
from .metrics import (PCReport, PQReport, Segment, extract_segments,
                      panoptic_quality, parsing_covering)
from .panoptic import (DatasetSpec, PanopticMap, ids_match_up_to_permutation)
from .synth import (NoiseConfig, SceneConfig, generate_scene,
                    ideal_predictions, perturb, synthetic_dataset_spec)
from .targets import (DKRG, InstanceTargetMaps, KeypointConfig,
                      bootstrapped_ce_loss, edge_activation_mask,
                      generate_targets, heatmap_loss, instance_keypoints,
                      masked_l1_loss, rectangle_graph, semantic_loss_weights,
                      star_graph)
from .tensor import TensorMap, depth_to_space, read_rten, space_to_depth, write_rten

__version__ = "0.1.0"

__all__ = [
    "DKRG", "DatasetSpec", "DimensionMismatchError", "EmptyInstanceError",
    "FusionConfig", "GenerationError", "Instance", "InstancePredictionMaps",
    "InstanceTargetMaps", "InternalInvariantError", "InvalidAnnotationError",
    "InvalidDistributionError", "InvalidInputError", "Keypoint",
    "KeypointConfig", "NoiseConfig", "PanopticError", "PanopticMap",
    "PCReport", "PQReport", "SceneConfig", "Segment", "TensorFormatError",
    "TensorMap", "assign_pixels", "bootstrapped_ce_loss", "depth_to_space",
    "detect_instances", "edge_activation_mask", "extract_segments",
    "fuse_panoptic", "generate_scene", "generate_targets", "heatmap_loss",
    "hough_scores", "ids_match_up_to_permutation", "instance_keypoints",
    "localize_keypoints", "masked_l1_loss", "nms_instances",
    "panoptic_quality", "parse", "parsing_covering", "perturb", "read_rten",
    "rectangle_graph", "refine_offsets", "semantic_loss_weights",
    "space_to_depth", "star_graph", "synthetic_dataset_spec", "write_rten",
]
