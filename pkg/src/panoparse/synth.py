"""Deterministic synthetic scenes for end-to-end verification.

Generates panoptic ground truth (horizontal stuff strata overlaid with
rectangle/ellipse thing instances), derives the ideal prediction maps
that a perfect network would output, and perturbs them with seeded
noise. Parsing the ideal maps must reconstruct the ground truth, which
is the backbone of the round-trip test suite.

All randomness flows through numpy's Philox generator so that fixtures
generated here are reproducible across platforms and sessions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, InvalidAnnotationError, InvalidInputError
from .fusion import InstancePredictionMaps
from .panoptic import DatasetSpec, PanopticMap
from .targets import KeypointConfig, generate_targets
from .tensor import TensorMap

IDEAL_LOGIT = 50.0

SHAPE_KINDS = ("rectangles", "ellipses", "mixed")


def philox(seed: int, *key: int) -> np.random.Generator:
    """Seeded Philox stream; extra key words derive independent substreams."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))))


def synthetic_dataset_spec(num_stuff: int = 4, num_things: int = 3) -> DatasetSpec:
    """Stuff classes 0..num_stuff-1 followed by thing classes."""
    if num_stuff < 1 or num_things < 1:
        raise InvalidInputError("need at least one stuff and one thing class")
    total = num_stuff + num_things
    names = tuple(f"stuff_{i}" for i in range(num_stuff)) + tuple(
        f"thing_{i}" for i in range(num_things))
    return DatasetSpec(num_classes=total,
                       thing_ids=frozenset(range(num_stuff, total)),
                       names=names)


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of one synthetic scene."""

    seed: int
    height: int
    width: int
    num_instances: int
    spec: DatasetSpec
    shape_kind: str = "rectangles"
    min_extent: int = 6
    max_extent: int = 24
    stuff_bands: int = 3
    # Minimum Euclidean gap between instance bounding boxes; 0 allows
    # arbitrary overlap/occlusion. Placement failing this bound retries,
    # and bounded retries make generation fail loudly instead of hanging.
    min_separation: float = 0.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidInputError("scene must be at least 1x1")
        if self.num_instances < 0:
            raise InvalidInputError("num_instances must be >= 0")
        if self.shape_kind not in SHAPE_KINDS:
            raise InvalidInputError(f"shape_kind must be one of {SHAPE_KINDS}")
        if not 1 <= self.min_extent <= self.max_extent:
            raise InvalidInputError("need 1 <= min_extent <= max_extent")
        if self.max_extent > min(self.height, self.width):
            raise InvalidInputError("max_extent does not fit in the image")
        if self.stuff_bands < 1:
            raise InvalidInputError("stuff_bands must be >= 1")
        if self.stuff_bands > len(self.spec.stuff_ids):
            raise InvalidInputError(
                f"{self.stuff_bands} bands need {self.stuff_bands} stuff classes")
        if self.num_instances > 0 and not self.spec.thing_ids:
            raise InvalidInputError("instances need at least one thing class")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "height": self.height, "width": self.width,
                "num_instances": self.num_instances, "shape_kind": self.shape_kind,
                "min_extent": self.min_extent, "max_extent": self.max_extent,
                "stuff_bands": self.stuff_bands, "min_separation": self.min_separation}


@dataclass(frozen=True)
class NoiseConfig:
    """Seeded perturbation of prediction maps.

    The Gaussian draws are standard-normal and scaled by the sigmas, so
    for a fixed seed the perturbation grows monotonically with sigma.
    """

    seed: int = 0
    offset_sigma: float = 0.0
    logit_sigma: float = 0.0
    semantic_flip_prob: float = 0.0

    def __post_init__(self):
        if self.offset_sigma < 0 or self.logit_sigma < 0:
            raise InvalidInputError("sigmas must be >= 0")
        if not 0.0 <= self.semantic_flip_prob <= 1.0:
            raise InvalidInputError("semantic_flip_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "offset_sigma": self.offset_sigma,
                "logit_sigma": self.logit_sigma,
                "semantic_flip_prob": self.semantic_flip_prob}


def _box_gap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """Euclidean gap between two inclusive pixel boxes (0 when touching)."""
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    dy = max(ay0 - by1, by0 - ay1, 0)
    dx = max(ax0 - bx1, bx0 - ax1, 0)
    return math.hypot(dy, dx)


def _shape_mask(kind: str, eh: int, ew: int) -> np.ndarray:
    if kind == "rectangles":
        return np.ones((eh, ew), dtype=bool)
    cy, cx = (eh - 1) / 2.0, (ew - 1) / 2.0
    a, b = max(cy, 0.5), max(cx, 0.5)
    yy = np.arange(eh)[:, None]
    xx = np.arange(ew)[None, :]
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def generate_scene(cfg: SceneConfig) -> PanopticMap:
    """Stuff strata overlaid with thing shapes painted in z-order.

    Later instances occlude earlier ones; instances that end up fully
    occluded are dropped and remaining ids are renumbered densely.
    """
    rng = philox(cfg.seed, 0)
    H, W = cfg.height, cfg.width
    semantic = np.zeros((H, W), dtype=np.int32)
    stuff = sorted(cfg.spec.stuff_ids)
    edges = np.linspace(0, H, cfg.stuff_bands + 1).astype(int)
    for b in range(cfg.stuff_bands):
        semantic[edges[b]:edges[b + 1]] = stuff[b]

    instance = np.zeros((H, W), dtype=np.int32)
    things = sorted(cfg.spec.thing_ids)
    boxes: list[tuple[int, int, int, int]] = []
    attempts_left = 100 * max(cfg.num_instances, 1)
    for idx in range(1, cfg.num_instances + 1):
        while True:
            if attempts_left <= 0:
                raise GenerationError(
                    f"could not place instance {idx} under "
                    f"min_separation={cfg.min_separation}")
            attempts_left -= 1
            eh = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
            ew = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
            y0 = int(rng.integers(0, H - eh + 1))
            x0 = int(rng.integers(0, W - ew + 1))
            box = (y0, x0, y0 + eh - 1, x0 + ew - 1)
            if cfg.min_separation > 0 and any(
                    _box_gap(box, other) <= cfg.min_separation for other in boxes):
                continue
            kind = cfg.shape_kind
            if kind == "mixed":
                kind = "rectangles" if rng.integers(0, 2) == 0 else "ellipses"
            mask = _shape_mask(kind, eh, ew)
            if not mask.any():
                continue
            cls = things[int(rng.integers(0, len(things)))]
            sem_patch = semantic[y0:y0 + eh, x0:x0 + ew]
            ins_patch = instance[y0:y0 + eh, x0:x0 + ew]
            sem_patch[mask] = cls
            ins_patch[mask] = idx
            boxes.append(box)
            break

    # Drop fully-occluded instances and renumber densely.
    surviving = np.unique(instance)
    surviving = surviving[surviving > 0]
    remap = np.zeros(int(instance.max(initial=0)) + 1, dtype=np.int32)
    remap[surviving] = np.arange(1, surviving.size + 1, dtype=np.int32)
    instance = remap[instance]

    pmap = PanopticMap.from_planes(semantic, instance)
    pmap.validate(cfg.spec)
    return pmap


def ideal_predictions(gt: PanopticMap, spec: DatasetSpec,
                      kcfg: KeypointConfig) -> tuple[TensorMap, InstancePredictionMaps]:
    """Perfect prediction maps for a ground truth.

    Semantic probabilities are one-hot; the instance maps are the
    training targets with the binary heatmap mapped to saturated logits.
    Parsing these must reconstruct the ground truth.
    """
    sem = gt.semantic_plane()
    if spec.ignore_label is not None and (sem == spec.ignore_label).any():
        raise InvalidAnnotationError(
            "ideal predictions cannot encode ignore-labeled pixels")
    H, W = gt.height, gt.width
    probs = np.empty((spec.num_classes, H, W), dtype=np.float32)
    probs.fill(0.0)
    yy, xx = np.indices((H, W))
    probs[sem, yy, xx] = 1.0

    t = generate_targets(gt, spec, kcfg)
    logits = np.where(t.heatmap.data > 0, IDEAL_LOGIT, -IDEAL_LOGIT).astype(np.float32)
    maps = InstancePredictionMaps(
        heatmap_logits=TensorMap(logits),
        short=t.short, middle=t.middle, long=t.long)
    return TensorMap(probs), maps


def perturb(maps: InstancePredictionMaps, semantic: TensorMap,
            noise: NoiseConfig) -> tuple[InstancePredictionMaps, TensorMap]:
    """Seeded Gaussian noise on offsets and logits plus label flips.

    Each component draws from its own substream, so e.g. changing
    offset_sigma never changes which pixels flip.
    """
    def jitter(t: TensorMap, sigma: float, stream: int) -> TensorMap:
        if sigma == 0.0:
            return t
        z = philox(noise.seed, stream).standard_normal(t.shape)
        return TensorMap((t.data.astype(np.float64) + sigma * z).astype(np.float32))

    out = InstancePredictionMaps(
        heatmap_logits=jitter(maps.heatmap_logits, noise.logit_sigma, 1),
        short=jitter(maps.short, noise.offset_sigma, 2),
        middle=jitter(maps.middle, noise.offset_sigma, 3),
        long=jitter(maps.long, noise.offset_sigma, 4),
    )

    if noise.semantic_flip_prob == 0.0:
        return out, semantic
    C, H, W = semantic.shape
    flip = philox(noise.seed, 5).random((H, W)) < noise.semantic_flip_prob
    new_cls = philox(noise.seed, 6).integers(0, C, size=(H, W))
    if C == 1:
        plane = semantic.data[0].copy()
        plane[flip] = new_cls[flip].astype(plane.dtype)
        sem_out = TensorMap(plane[None])
    else:
        probs = semantic.data.copy()
        fy, fx = np.nonzero(flip)
        probs[:, fy, fx] = 0.0
        probs[new_cls[fy, fx], fy, fx] = 1.0
        sem_out = TensorMap(probs)
    return out, sem_out
