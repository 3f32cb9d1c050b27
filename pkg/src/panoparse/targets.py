"""Training-target generation for the keypoint-based instance heads.

Each ground-truth instance is represented by five keypoints: its mass
center and the four corners of its axis-aligned bounding box. From a
panoptic ground truth this module derives the four dense target maps
(binary keypoint disks, short/middle/long-range offset fields) together
with their loss-activation masks, plus the forward losses used to
validate them.

Offset convention: channel pair (2k, 2k+1) stores (dy, dx) such that
target position = pixel position + (dy, dx). Coordinates are (y, x) on
pixel centers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatchError, EmptyInstanceError,
                     InvalidDistributionError, InvalidInputError)
from .panoptic import DatasetSpec, PanopticMap
from .tensor import TensorMap

NUM_KEYPOINTS = 5
KP_CENTER = 0
KP_TOP_LEFT = 1
KP_TOP_RIGHT = 2
KP_BOTTOM_LEFT = 3
KP_BOTTOM_RIGHT = 4

_CORNERS = (KP_TOP_LEFT, KP_TOP_RIGHT, KP_BOTTOM_LEFT, KP_BOTTOM_RIGHT)


@dataclass(frozen=True)
class DKRG:
    """Directed keypoint relation graph; edge e owns middle-offset
    channels (2e, 2e+1)."""

    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        edges = tuple((int(s), int(d)) for s, d in self.edges)
        for s, d in edges:
            if not (0 <= s < NUM_KEYPOINTS and 0 <= d < NUM_KEYPOINTS) or s == d:
                raise InvalidInputError(f"bad edge ({s},{d})")
        if len(set(edges)) != len(edges):
            raise InvalidInputError("duplicate edges")
        object.__setattr__(self, "edges", edges)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_index(self, src: int, dst: int) -> int | None:
        try:
            return self.edges.index((src, dst))
        except ValueError:
            return None

    def out_edges(self, src: int) -> list[tuple[int, int]]:
        """(edge index, destination) pairs leaving ``src``."""
        return [(e, d) for e, (s, d) in enumerate(self.edges) if s == src]

    def seed_types(self) -> frozenset[int]:
        """Keypoint types from which every other type is reachable."""
        seeds = []
        for start in range(NUM_KEYPOINTS):
            seen = {start}
            frontier = [start]
            while frontier:
                s = frontier.pop()
                for _, d in self.out_edges(s):
                    if d not in seen:
                        seen.add(d)
                        frontier.append(d)
            if len(seen) == NUM_KEYPOINTS:
                seeds.append(start)
        return frozenset(seeds)


def star_graph() -> DKRG:
    """Mass center connected to each corner in both directions (E=8)."""
    out = tuple((KP_CENTER, c) for c in _CORNERS)
    back = tuple((c, KP_CENTER) for c in _CORNERS)
    return DKRG(out + back)


def rectangle_graph() -> DKRG:
    """Corners connected in a cycle in both directions, no center edges."""
    cycle = (KP_TOP_LEFT, KP_TOP_RIGHT, KP_BOTTOM_RIGHT, KP_BOTTOM_LEFT)
    fwd = tuple((cycle[i], cycle[(i + 1) % 4]) for i in range(4))
    rev = tuple((d, s) for s, d in fwd)
    return DKRG(fwd + rev)


@dataclass(frozen=True)
class KeypointConfig:
    """Parameters of the keypoint representation and its targets."""

    radius: float = 25.0
    num_keypoints: int = NUM_KEYPOINTS
    graph: DKRG = field(default_factory=star_graph)
    small_instance_area: int = 64 * 64
    small_instance_weight: float = 3.0
    topk_fraction: float = 0.15

    def __post_init__(self):
        if self.radius < 1:
            raise InvalidInputError("radius must be >= 1")
        if self.num_keypoints != NUM_KEYPOINTS:
            raise InvalidInputError(f"keypoint count is fixed at {NUM_KEYPOINTS}")
        if not 0 < self.topk_fraction <= 1:
            raise InvalidInputError("topk_fraction must be in (0, 1]")
        if self.small_instance_area < 0 or self.small_instance_weight < 0:
            raise InvalidInputError("small-instance parameters must be non-negative")

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "graph": "rectangle" if self.graph == rectangle_graph() else "star",
            "small_instance_area": self.small_instance_area,
            "small_instance_weight": self.small_instance_weight,
            "topk_fraction": self.topk_fraction,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "KeypointConfig":
        kwargs = dict(raw)
        graph = kwargs.pop("graph", "star")
        if isinstance(graph, str):
            if graph not in ("star", "rectangle"):
                raise InvalidInputError(f"unknown graph {graph!r}")
            graph = rectangle_graph() if graph == "rectangle" else star_graph()
        return cls(graph=graph, **kwargs)


@dataclass(frozen=True, eq=False)
class InstanceTargetMaps:
    """The instance heads' dense targets and loss-activation masks.

    disk_mask gates the short/middle losses and equals the heatmap;
    instance_mask gates the long-range loss.
    """

    heatmap: TensorMap
    short: TensorMap
    middle: TensorMap
    long: TensorMap
    disk_mask: TensorMap
    instance_mask: TensorMap

    def __post_init__(self):
        P = self.heatmap.channels
        hw = (self.heatmap.height, self.heatmap.width)
        checks = (("short", self.short, 2 * P), ("long", self.long, 2 * P),
                  ("disk_mask", self.disk_mask, P), ("instance_mask", self.instance_mask, 1))
        for name, t, c in checks:
            if t.channels != c or (t.height, t.width) != hw:
                raise DimensionMismatchError(
                    f"{name} has shape {t.shape}, expected ({c},{hw[0]},{hw[1]})")
        if self.middle.channels % 2 or (self.middle.height, self.middle.width) != hw:
            raise DimensionMismatchError(f"middle has shape {self.middle.shape}")


def instance_keypoints(mask) -> np.ndarray:
    """Five (y, x) keypoints of a pixel set: mass center plus the four
    axis-aligned bounding-box corners.

    Returns a float64 array of shape (5, 2) ordered
    [center, top-left, top-right, bottom-left, bottom-right].
    """
    coords = np.asarray(sorted(mask) if isinstance(mask, (set, frozenset)) else mask,
                        dtype=np.float64)
    if coords.size == 0:
        raise EmptyInstanceError("instance mask has no pixels")
    coords = coords.reshape(-1, 2)
    ymin, xmin = coords.min(axis=0)
    ymax, xmax = coords.max(axis=0)
    cy, cx = coords.mean(axis=0)
    return np.array([
        (cy, cx),
        (ymin, xmin),
        (ymin, xmax),
        (ymax, xmin),
        (ymax, xmax),
    ])


def _instances_of(gt: PanopticMap) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """(id, ys, xs) per positive instance id, ascending by id."""
    ins = gt.instance_plane()
    ys, xs = np.nonzero(ins > 0)
    if ys.size == 0:
        return []
    ids = ins[ys, xs]
    order = np.argsort(ids, kind="stable")
    ids, ys, xs = ids[order], ys[order], xs[order]
    uniq, starts = np.unique(ids, return_index=True)
    bounds = np.append(starts, ids.size)
    return [(int(uniq[i]), ys[bounds[i]:bounds[i + 1]], xs[bounds[i]:bounds[i + 1]])
            for i in range(uniq.size)]


def scene_keypoints(gt: PanopticMap) -> tuple[list[int], np.ndarray]:
    """Instance ids plus a (num_instances, 5, 2) keypoint array."""
    groups = _instances_of(gt)
    ids = [g[0] for g in groups]
    if not groups:
        return ids, np.zeros((0, NUM_KEYPOINTS, 2))
    kps = np.stack([instance_keypoints(np.stack([ys, xs], axis=1))
                    for _, ys, xs in groups])
    return ids, kps


def generate_targets(gt: PanopticMap, spec: DatasetSpec,
                     cfg: KeypointConfig) -> InstanceTargetMaps:
    """Build all five heads' targets from a panoptic ground truth.

    Disk membership uses Euclidean distance <= radius on pixel centers.
    Where same-type disks of two instances overlap, the short- and
    middle-range targets follow the nearest keypoint (lowest instance id
    on exact ties). Ignore-labeled pixels are excluded from every mask.
    """
    gt.validate(spec)
    H, W = gt.height, gt.width
    R = float(cfg.radius)
    graph = cfg.graph
    E = graph.num_edges
    P = NUM_KEYPOINTS

    groups = _instances_of(gt)
    kps = (np.stack([instance_keypoints(np.stack([ys, xs], axis=1))
                     for _, ys, xs in groups])
           if groups else np.zeros((0, P, 2)))

    best_dist = np.empty((P, H, W))
    best_dist.fill(np.inf)
    owner = np.empty((P, H, W), dtype=np.int32)
    owner.fill(-1)
    win = int(math.ceil(R))
    for i in range(len(groups)):
        for p in range(P):
            ky, kx = kps[i, p]
            y0 = max(0, int(math.ceil(ky - win)))
            y1 = min(H - 1, int(math.floor(ky + win)))
            x0 = max(0, int(math.ceil(kx - win)))
            x1 = min(W - 1, int(math.floor(kx + win)))
            if y0 > y1 or x0 > x1:
                continue
            yy = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
            xx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
            d = np.hypot(yy - ky, xx - kx)
            sub = best_dist[p, y0:y1 + 1, x0:x1 + 1]
            closer = d < sub
            sub[closer] = d[closer]
            owner[p, y0:y1 + 1, x0:x1 + 1][closer] = i

    heat = (best_dist <= R) & (owner >= 0)

    yy = np.arange(H, dtype=np.float64)[:, None]
    xx = np.arange(W, dtype=np.float64)[None, :]
    short = np.empty((2 * P, H, W))
    short.fill(0.0)
    for p in range(P):
        m = heat[p]
        if not m.any():
            continue
        own = owner[p][m]
        short[2 * p][m] = kps[own, p, 0] - np.broadcast_to(yy, (H, W))[m]
        short[2 * p + 1][m] = kps[own, p, 1] - np.broadcast_to(xx, (H, W))[m]

    middle = np.empty((2 * E, H, W))
    middle.fill(0.0)
    for e, (src, dst) in enumerate(graph.edges):
        m = heat[src]
        if not m.any():
            continue
        own = owner[src][m]
        middle[2 * e][m] = kps[own, dst, 0] - np.broadcast_to(yy, (H, W))[m]
        middle[2 * e + 1][m] = kps[own, dst, 1] - np.broadcast_to(xx, (H, W))[m]

    long = np.empty((2 * P, H, W))
    long.fill(0.0)
    instance_mask = np.empty((1, H, W))
    instance_mask.fill(0.0)
    for i, (_, iys, ixs) in enumerate(groups):
        instance_mask[0, iys, ixs] = 1.0
        for p in range(P):
            long[2 * p, iys, ixs] = kps[i, p, 0] - iys
            long[2 * p + 1, iys, ixs] = kps[i, p, 1] - ixs

    if spec.ignore_label is not None:
        ignored = gt.semantic_plane() == spec.ignore_label
        if ignored.any():
            heat[:, ignored] = False
            short[:, ignored] = 0.0
            middle[:, ignored] = 0.0

    heat_f = heat.astype(np.float32)
    return InstanceTargetMaps(
        heatmap=TensorMap(heat_f),
        short=TensorMap(short.astype(np.float32)),
        middle=TensorMap(middle.astype(np.float32)),
        long=TensorMap(long.astype(np.float32)),
        disk_mask=TensorMap(heat_f.copy()),
        instance_mask=TensorMap(instance_mask.astype(np.float32)),
    )


def edge_activation_mask(targets: InstanceTargetMaps, graph: DKRG) -> TensorMap:
    """Per-edge loss mask for the middle-range offsets: edge e is
    activated on the disk of its source keypoint."""
    src = [s for s, _ in graph.edges]
    return TensorMap(targets.disk_mask.data[src].copy())


def semantic_loss_weights(gt: PanopticMap, cfg: KeypointConfig) -> TensorMap:
    """Per-pixel loss weights emphasizing small instances.

    Pixels of thing instances whose area is below
    ``cfg.small_instance_area`` get ``cfg.small_instance_weight``; all
    other pixels get weight 1.
    """
    H, W = gt.height, gt.width
    weights = np.ones((1, H, W), dtype=np.float32)
    for _, ys, xs in _instances_of(gt):
        if ys.size < cfg.small_instance_area:
            weights[0, ys, xs] = cfg.small_instance_weight
    return TensorMap(weights)


def bootstrapped_ce_loss(probs: TensorMap, labels: TensorMap, weights: TensorMap,
                         topk_fraction: float) -> float:
    """Weighted cross-entropy averaged over the K hardest pixels.

    Pixels are ranked by their unweighted cross-entropy; the top
    K = ceil(topk_fraction * N) contribute (ties broken toward lower
    pixel index so exactly K are kept), each scaled by its weight, and
    the sum is divided by K.
    """
    if not 0 < topk_fraction <= 1:
        raise InvalidInputError("topk_fraction must be in (0, 1]")
    C, H, W = probs.shape
    if labels.shape != (1, H, W) or weights.shape != (1, H, W):
        raise DimensionMismatchError(
            f"labels {labels.shape} / weights {weights.shape} vs probs {probs.shape}")
    p = probs.data.reshape(C, -1).astype(np.float64)
    if (p < 0).any():
        raise InvalidDistributionError("negative probability")
    sums = p.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise InvalidDistributionError("per-pixel probabilities do not sum to 1")
    y = labels.data.reshape(-1)
    if y.min() < 0 or y.max() >= C:
        raise InvalidInputError(f"labels must lie in [0,{C})")
    w = weights.data.reshape(-1).astype(np.float64)

    n = y.size
    p_true = p[y, np.arange(n)]
    ce = -np.log(np.maximum(p_true, 1e-12))
    k = int(math.ceil(topk_fraction * n))
    # Stable sort on descending CE keeps the lowest pixel index first on ties.
    order = np.argsort(-ce, kind="stable")[:k]
    return float(np.sum(w[order] * ce[order]) / k)


def heatmap_loss(logits: TensorMap, target: InstanceTargetMaps) -> float:
    """Mean sigmoid cross-entropy between logits and the binary disks."""
    if logits.shape != target.heatmap.shape:
        raise DimensionMismatchError(
            f"logits {logits.shape} vs heatmap {target.heatmap.shape}")
    z = logits.data.astype(np.float64)
    t = target.heatmap.data.astype(np.float64)
    ce = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(ce.mean())


def masked_l1_loss(pred: TensorMap, target: TensorMap, mask: TensorMap) -> float:
    """Mean absolute error over mask-activated positions.

    The mask may have one channel (applies everywhere), one channel per
    (dy, dx) pair, or one channel per prediction channel. An all-zero
    mask yields 0.
    """
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"pred {pred.shape} vs target {target.shape}")
    C, H, W = pred.shape
    if (mask.height, mask.width) != (H, W):
        raise DimensionMismatchError(f"mask {mask.shape} vs pred {pred.shape}")
    m = mask.data.astype(np.float64)
    if mask.channels == C:
        pass
    elif mask.channels == 1:
        m = np.broadcast_to(m, (C, H, W))
    elif 2 * mask.channels == C:
        m = np.repeat(m, 2, axis=0)
    else:
        raise DimensionMismatchError(
            f"mask channels {mask.channels} incompatible with pred channels {C}")
    diff = np.abs(pred.data.astype(np.float64) - target.data.astype(np.float64)) * m
    count = m.sum()
    return float(diff.sum() / max(1.0, count))
