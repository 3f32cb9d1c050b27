"""Single-shot fusion of dense predictions into a panoptic map.

The pipeline runs five stages on the four instance prediction maps plus
the semantic prediction:

  1. refine the long-range offsets through the short-range field,
  2. Hough-vote both offset fields into a fused keypoint score map,
  3. localize keypoints at the score map's local maxima,
  4. group keypoints into instances by walking the keypoint relation
     graph, then suppress duplicates by bounding-box NMS,
  5. assign every pixel to the instance whose keypoints best match the
     pixel's predicted keypoints, and merge with the semantic plane.

Every stage is deterministic; runtime is dominated by per-pixel work,
not by the number of detected instances.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import (DimensionMismatchError, InternalInvariantError,
                     InvalidInputError)
from .panoptic import NO_INSTANCE, DatasetSpec, PanopticMap
from .parallel import apply_thread_cap
from .targets import DKRG, KP_CENTER, NUM_KEYPOINTS, KeypointConfig
from .tensor import TensorMap

# Beyond this magnitude the sigmoid is exactly 0 or 1 in float32, so
# saturated-negative logits produce weight-zero votes, which are no-ops
# and are skipped.
_SIGMOID_SATURATION = 30.0
_ASSIGN_BLOCK = 8
_ASSIGN_TILE_BLOCKS = 8


@dataclass(frozen=True, eq=False)
class InstancePredictionMaps:
    """The four instance-head outputs on a shared H×W grid."""

    heatmap_logits: TensorMap
    short: TensorMap
    middle: TensorMap
    long: TensorMap

    def __post_init__(self):
        P = self.heatmap_logits.channels
        if P != NUM_KEYPOINTS:
            raise DimensionMismatchError(f"heatmap must have {NUM_KEYPOINTS} channels")
        hw = (self.heatmap_logits.height, self.heatmap_logits.width)
        for name, t, c in (("short", self.short, 2 * P), ("long", self.long, 2 * P)):
            if t.channels != c or (t.height, t.width) != hw:
                raise DimensionMismatchError(f"{name} has shape {t.shape}")
        if self.middle.channels % 2 or (self.middle.height, self.middle.width) != hw:
            raise DimensionMismatchError(f"middle has shape {self.middle.shape}")

    @property
    def num_keypoints(self) -> int:
        return self.heatmap_logits.channels

    @property
    def num_edges(self) -> int:
        return self.middle.channels // 2

    @property
    def height(self) -> int:
        return self.heatmap_logits.height

    @property
    def width(self) -> int:
        return self.heatmap_logits.width


@dataclass(frozen=True)
class Keypoint:
    kind: int  # keypoint type index in [0, 5)
    position: tuple[float, float]  # (y, x), sub-pixel
    score: float


@dataclass(frozen=True)
class Instance:
    keypoints: tuple[Keypoint, ...]  # one per kind, indexed by kind
    score: float
    bbox: tuple[float, float, float, float]  # (y0, x0, y1, x1)

    @classmethod
    def from_keypoints(cls, kps: list[Keypoint]) -> "Instance":
        kps = tuple(sorted(kps, key=lambda k: k.kind))
        if len(kps) != NUM_KEYPOINTS or [k.kind for k in kps] != list(range(NUM_KEYPOINTS)):
            raise InvalidInputError("an instance needs one keypoint of each kind")
        corners = kps[1:]
        ys = [k.position[0] for k in corners]
        xs = [k.position[1] for k in corners]
        return cls(
            keypoints=kps,
            score=sum(k.score for k in kps) / len(kps),
            bbox=(min(ys), min(xs), max(ys), max(xs)),
        )


@dataclass(frozen=True)
class FusionConfig:
    """Knobs of the fusion pipeline.

    localmax_threshold is a fraction of each score channel's maximum, so
    flat score maps yield no keypoints regardless of scale. The
    proximity radius doubles as the disk radius for keypoint rescoring.
    """

    refine_iterations: int = 2
    w_short: float = 1.0
    w_long: float = 0.1
    localmax_threshold: float = 0.01
    localmax_radius: int = 5
    proximity_radius: float = 25.0
    nms_iou: float = 0.5
    max_instances: int = 200
    rescore: str = "disk_mean"  # or "peak": keep the raw local-max value

    def __post_init__(self):
        if self.refine_iterations < 0:
            raise InvalidInputError("refine_iterations must be >= 0")
        if self.localmax_radius < 1 or self.proximity_radius < 1:
            raise InvalidInputError("radii must be >= 1")
        if not 0 <= self.localmax_threshold <= 1 or not 0 <= self.nms_iou <= 1:
            raise InvalidInputError("thresholds must lie in [0, 1]")
        if self.max_instances < 0:
            raise InvalidInputError("max_instances must be >= 0")
        if self.rescore not in ("disk_mean", "peak"):
            raise InvalidInputError(f"unknown rescore mode {self.rescore!r}")

    def to_dict(self) -> dict:
        return {
            "refine_iterations": self.refine_iterations,
            "w_short": self.w_short, "w_long": self.w_long,
            "localmax_threshold": self.localmax_threshold,
            "localmax_radius": self.localmax_radius,
            "proximity_radius": self.proximity_radius,
            "nms_iou": self.nms_iou, "max_instances": self.max_instances,
            "rescore": self.rescore,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FusionConfig":
        return cls(**raw)


def _sigmoid_saturated(z: np.ndarray) -> np.ndarray:
    """Sigmoid with exact 0/1 beyond saturation (float32-identical)."""
    out = np.empty(z.shape, dtype=np.float64)
    hi = z > _SIGMOID_SATURATION
    lo = z < -_SIGMOID_SATURATION
    mid = ~(hi | lo)
    out[hi] = 1.0
    out[lo] = 0.0
    zm = z[mid].astype(np.float64)
    out[mid] = 1.0 / (1.0 + np.exp(-zm))
    return out


def refine_offsets(maps: InstancePredictionMaps, cfg: FusionConfig) -> InstancePredictionMaps:
    """Refine the long-range offsets through the short-range field.

    Each iteration re-bases the offset at the rounded cell it lands on
    and appends that cell's short-range correction; short and middle
    maps pass through unchanged.
    """
    if cfg.refine_iterations == 0:
        return maps
    apply_thread_cap()
    refined = _kernels.refine_long_offsets(
        maps.long.data, maps.short.data, cfg.refine_iterations)
    return InstancePredictionMaps(
        heatmap_logits=maps.heatmap_logits, short=maps.short,
        middle=maps.middle, long=TensorMap(refined))


def hough_scores(maps: InstancePredictionMaps, cfg: FusionConfig) -> TensorMap:
    """Fused keypoint score map from both offset fields.

    Short-range votes are weighted by the sigmoid heatmap probability,
    long-range votes by one; both are splatted bilinearly and summed
    per channel with weights (w_short, w_long). Votes landing outside
    the map are dropped.
    """
    apply_thread_cap()
    P, H, W = maps.heatmap_logits.shape
    # Vote shares are computed in float64 and accumulated in float32,
    # matching the score map's own precision.
    fused = np.zeros((P, H, W), dtype=np.float32)
    cutoff = -_SIGMOID_SATURATION
    for p in range(P):
        _kernels.vote_channel(
            maps.short.data[2 * p], maps.short.data[2 * p + 1],
            maps.heatmap_logits.data[p],
            maps.long.data[2 * p], maps.long.data[2 * p + 1],
            float(cfg.w_short), float(cfg.w_long), cutoff, fused[p])
    return TensorMap(fused)


@lru_cache(maxsize=8)
def _disk_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = int(math.ceil(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= radius * radius
    return (np.ascontiguousarray(dy[keep].astype(np.int64)),
            np.ascontiguousarray(dx[keep].astype(np.int64)))


def localize_keypoints(scores: TensorMap, maps: InstancePredictionMaps,
                       cfg: FusionConfig) -> list[Keypoint]:
    """Local maxima of each score channel, rescored and sorted.

    A cell qualifies when no strictly greater value exists within the
    Chebyshev localmax_radius and its score exceeds localmax_threshold
    times the channel maximum. Keypoints are rescored by the mean
    in-disk heatmap probability (local evidence around the peak) and
    returned sorted by score descending, ties by (kind, y, x).
    """
    found: list[Keypoint] = []
    cap = 4096
    out_y = np.empty(cap, dtype=np.int64)
    out_x = np.empty(cap, dtype=np.int64)
    for p in range(scores.channels):
        channel = scores.data[p]
        peak = float(channel.max())
        if peak <= 0.0:
            continue
        threshold = cfg.localmax_threshold * peak
        n = _kernels.find_peaks(channel, threshold, cfg.localmax_radius, out_y, out_x)
        while n < 0:
            cap = min(cap * 16, channel.size)
            out_y = np.empty(cap, dtype=np.int64)
            out_x = np.empty(cap, dtype=np.int64)
            n = _kernels.find_peaks(channel, threshold, cfg.localmax_radius,
                                    out_y, out_x)
        ys, xs = out_y[:n], out_x[:n]
        if cfg.rescore == "disk_mean":
            kp_scores = np.empty(n, dtype=np.float64)
            dy, dx = _disk_offsets(cfg.proximity_radius)
            _kernels.disk_mean_probs(maps.heatmap_logits.data[p], ys, xs,
                                     dy, dx, kp_scores)
        else:
            kp_scores = channel[ys, xs].astype(np.float64)
        for y, x, s in zip(ys.tolist(), xs.tolist(), kp_scores.tolist()):
            found.append(Keypoint(kind=p, position=(float(y), float(x)), score=s))
    found.sort(key=lambda k: (-k.score, k.kind, k.position[0], k.position[1]))
    return found


def _clamp(y: float, x: float, H: int, W: int) -> tuple[float, float]:
    return min(max(y, 0.0), H - 1.0), min(max(x, 0.0), W - 1.0)


def _cell(y: float, x: float, H: int, W: int) -> tuple[int, int]:
    cy = int(math.floor(y + 0.5))
    cx = int(math.floor(x + 0.5))
    return min(max(cy, 0), H - 1), min(max(cx, 0), W - 1)


def _seed_kinds(graph: DKRG) -> frozenset[int]:
    """Kinds from which all four corners are reachable along the graph.

    The mass center may stay unreachable (rectangle graph); it is then
    synthesized as the corner mean.
    """
    corners = frozenset(range(1, NUM_KEYPOINTS))
    seeds = []
    for start in range(NUM_KEYPOINTS):
        seen = {start}
        frontier = [start]
        while frontier:
            s = frontier.pop()
            for _, d in graph.out_edges(s):
                if d not in seen:
                    seen.add(d)
                    frontier.append(d)
        if corners <= seen:
            seeds.append(start)
    return frozenset(seeds)


def detect_instances(keypoints: list[Keypoint], scores: TensorMap,
                     maps: InstancePredictionMaps, graph: DKRG,
                     cfg: FusionConfig) -> list[Instance]:
    """Greedy keypoint grouping along the relation graph.

    Keypoints are consumed best-first. One within proximity_radius of
    the same-kind keypoint of an existing instance is rejected;
    otherwise the remaining keypoint kinds are derived by hopping the
    middle-range offsets (each hop re-bases at the sampled cell, whose
    stored vector points from that cell). Derived keypoints score the
    fused map value at their landing cell.
    """
    if 2 * graph.num_edges != maps.middle.channels:
        raise DimensionMismatchError(
            f"graph has {graph.num_edges} edges but middle map has "
            f"{maps.middle.channels} channels")
    if cfg.max_instances == 0 or not keypoints:
        return []
    H, W = maps.height, maps.width
    seeds = _seed_kinds(graph)
    seed_ok = np.zeros(NUM_KEYPOINTS, dtype=bool)
    seed_ok[sorted(seeds)] = True
    edges = np.array(graph.edges, dtype=np.int64).reshape(-1, 2)

    n = len(keypoints)
    kp_kind = np.fromiter((k.kind for k in keypoints), np.int64, n)
    kp_y = np.fromiter((k.position[0] for k in keypoints), np.float64, n)
    kp_x = np.fromiter((k.position[1] for k in keypoints), np.float64, n)
    kp_score = np.fromiter((k.score for k in keypoints), np.float64, n)

    cap = cfg.max_instances
    out_pos = np.empty((cap, NUM_KEYPOINTS, 2), dtype=np.float64)
    out_score = np.empty((cap, NUM_KEYPOINTS), dtype=np.float64)
    out_seed = np.empty(cap, dtype=np.int64)
    count = _kernels.greedy_detect(
        kp_kind, kp_y, kp_x, kp_score, maps.middle.data, scores.data, edges,
        seed_ok, float(cfg.proximity_radius), cap, out_pos, out_score, out_seed)

    instances: list[Instance] = []
    for i in range(count):
        members = []
        for k in range(NUM_KEYPOINTS):
            py, px = out_pos[i, k]
            if math.isnan(py):
                # Kind unreachable along the graph (no path from the
                # seed); the mass center is synthesized as the corner
                # mean, scored at its landing cell.
                py = sum(out_pos[i, c, 0] for c in range(1, NUM_KEYPOINTS)) / 4.0
                px = sum(out_pos[i, c, 1] for c in range(1, NUM_KEYPOINTS)) / 4.0
                cell = _cell(py, px, H, W)
                members.append(Keypoint(kind=k, position=(py, px),
                                        score=float(scores.data[k, cell[0], cell[1]])))
            else:
                members.append(Keypoint(kind=k, position=(float(py), float(px)),
                                        score=float(out_score[i, k])))
        instances.append(Instance.from_keypoints(members))
    return instances


def bbox_iou(a: tuple[float, float, float, float],
             b: tuple[float, float, float, float]) -> float:
    """Continuous-box IoU; degenerate boxes overlap nothing but match
    themselves exactly."""
    if a == b:
        return 1.0
    iy = min(a[2], b[2]) - max(a[0], b[0])
    ix = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iy, 0.0) * max(ix, 0.0)
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    if union <= 0.0:
        return 0.0
    return inter / union


def nms_instances(instances: list[Instance], cfg: FusionConfig) -> list[Instance]:
    """Greedy bounding-box suppression in score order; input order is
    preserved among survivors."""
    n = len(instances)
    if n <= 1:
        return list(instances)
    boxes = np.array([ins.bbox for ins in instances], dtype=np.float64)
    scores = np.array([ins.score for ins in instances], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(n, dtype=bool)
    _kernels.greedy_nms(boxes, order, float(cfg.nms_iou), suppressed)
    return [ins for i, ins in enumerate(instances) if not suppressed[i]]


def assign_pixels(instances: list[Instance], maps: InstancePredictionMaps) -> TensorMap:
    """Assign each pixel the instance whose keypoints lie closest (in
    summed L2) to the pixel's predicted keypoints. Ids are 1-based in
    instance-list order; with no instances every pixel gets 0.
    """
    H, W = maps.height, maps.width
    out = np.zeros((H, W), dtype=np.int32)
    if instances:
        apply_thread_cap()
        P = NUM_KEYPOINTS
        yy, xx = np.indices((H, W), dtype=np.float32)
        pred_y = maps.long.data[0::2] + yy
        pred_x = maps.long.data[1::2] + xx
        kp_y = np.array([[k.position[0] for k in ins.keypoints] for ins in instances],
                        dtype=np.float64).reshape(len(instances), P)
        kp_x = np.array([[k.position[1] for k in ins.keypoints] for ins in instances],
                        dtype=np.float64).reshape(len(instances), P)
        _kernels.assign_nearest_instance(
            np.ascontiguousarray(pred_y), np.ascontiguousarray(pred_x),
            kp_y, kp_x, _ASSIGN_BLOCK, _ASSIGN_TILE_BLOCKS, out)
    return TensorMap(out[None])


def fuse_panoptic(semantic_labels: TensorMap, instance_ids: TensorMap,
                  instances: list[Instance], spec: DatasetSpec) -> PanopticMap:
    """Merge semantic labels with instance regions into a panoptic map.

    Stuff-predicted pixels keep their label with instance id 0. Thing
    pixels take their region's majority thing label (ties to the lower
    class id) and a dense 1..M instance id. Thing pixels covered by no
    instance have no identity to carry, so they are demoted to the
    lowest stuff class.
    """
    C = spec.num_classes
    sem = semantic_labels.data[0]
    if sem.min(initial=0) < 0 or sem.max(initial=0) >= C:
        raise InvalidInputError(f"semantic labels must lie in [0,{C})")
    if semantic_labels.shape != instance_ids.shape:
        raise DimensionMismatchError(
            f"semantic {semantic_labels.shape} vs ids {instance_ids.shape}")
    sem = sem.astype(np.int32).copy()
    ids = instance_ids.data[0]

    thing_lut = np.zeros(C, dtype=bool)
    thing_lut[sorted(spec.thing_ids)] = True
    is_thing = thing_lut[sem]
    region = np.where(is_thing, ids, 0)

    out_ids = np.zeros_like(sem)
    max_id = int(region.max(initial=0))
    if max_id > 1_000_000:
        # Sparse huge ids: compact them first so bincount stays small.
        uniq = np.unique(region)
        if uniq[0] != 0:
            uniq = np.concatenate([np.zeros(1, uniq.dtype), uniq])
        region = np.searchsorted(uniq, region).astype(np.int32)
        max_id = int(region.max(initial=0))
    if max_id > 0:
        covered_flat = region.ravel() > 0
        counts = np.bincount(
            (region.ravel()[covered_flat].astype(np.int64) * C
             + sem.ravel()[covered_flat]),
            minlength=(max_id + 1) * C).reshape(max_id + 1, C)
        totals = counts.sum(axis=1)
        majority = counts.argmax(axis=1).astype(np.int32)
        alive = totals > 0
        dense = np.zeros(max_id + 1, dtype=np.int32)
        dense[alive] = np.arange(1, int(alive.sum()) + 1, dtype=np.int32)
        relabel = np.where(alive, majority, 0)
        covered = region > 0
        sem[covered] = relabel[region[covered]]
        out_ids[covered] = dense[region[covered]]

    orphan = is_thing & (region == 0)
    if orphan.any():
        stuff = sorted(spec.stuff_ids)
        if not stuff:
            raise InvalidInputError(
                "thing pixels without an instance and no stuff class to fall back to")
        sem[orphan] = stuff[0]

    return PanopticMap.from_planes(sem, out_ids)


def semantic_argmax(semantic: TensorMap) -> TensorMap:
    """Collapse a (C,H,W) probability map to labels; ties take the
    lower class id. A (1,H,W) int map passes through."""
    if semantic.channels == 1 and semantic.dtype_name == "int32":
        return semantic
    best = semantic.data[0].copy()
    labels = np.zeros(best.shape, dtype=np.int32)
    for c in range(1, semantic.channels):
        better = semantic.data[c] > best
        labels = np.where(better, np.int32(c), labels)
        best = np.where(better, semantic.data[c], best)
    return TensorMap(labels[None])


def parse(semantic: TensorMap, maps: InstancePredictionMaps, spec: DatasetSpec,
          kcfg: KeypointConfig, fcfg: FusionConfig,
          stage_times: dict | None = None) -> PanopticMap:
    """Run the full fusion pipeline; optionally record per-stage ms."""
    if (semantic.height, semantic.width) != (maps.height, maps.width):
        raise DimensionMismatchError(
            f"semantic {semantic.shape} vs instance maps "
            f"({maps.height},{maps.width})")

    times: dict[str, float] = {}
    t0 = time.perf_counter()

    def tick(name: str):
        nonlocal t0
        now = time.perf_counter()
        times[name] = (now - t0) * 1000.0
        t0 = now

    labels = semantic_argmax(semantic)
    tick("argmax")
    refined = refine_offsets(maps, fcfg)
    tick("refine")
    scores = hough_scores(refined, fcfg)
    tick("vote")
    keypoints = localize_keypoints(scores, refined, fcfg)
    tick("localize")
    instances = detect_instances(keypoints, scores, refined, kcfg.graph, fcfg)
    tick("detect")
    instances = nms_instances(instances, fcfg)
    tick("nms")
    ids = assign_pixels(instances, refined)
    tick("assign")
    result = fuse_panoptic(labels, ids, instances, spec)
    tick("fuse")
    if stage_times is not None:
        times["total"] = sum(times.values())
        stage_times.update(times)
    return result
