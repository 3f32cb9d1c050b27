"""Panoptic Quality and Parsing Covering.

Both metrics compare two panoptic maps segment-wise. A segment is one
(thing class, instance id) region or the union of all pixels of a stuff
class. PQ matches segments one-to-one at IoU > 0.5 and factors into
segmentation quality (mean matched IoU) times recognition quality; PC is
the area-weighted best-IoU covering per class, with no matching
threshold, so partial overlaps still score.

IoU is computed on exact pixel sets via a single joint-histogram pass
over both maps, so evaluation is O(pixels) regardless of segment count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InternalInvariantError
from .panoptic import DatasetSpec, PanopticMap

MATCH_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Segment:
    class_id: int
    instance_id: int  # 0 for stuff segments
    kind: str  # "thing" or "stuff"
    area: int
    label: int  # this segment's id in the companion labeled map


@dataclass(frozen=True)
class PQClassStats:
    class_id: int
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "pq": self.pq, "sq": self.sq,
                "rq": self.rq, "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass(frozen=True)
class PQAggregate:
    pq: float
    sq: float
    rq: float
    num_classes: int

    def to_dict(self) -> dict:
        return {"pq": self.pq, "sq": self.sq, "rq": self.rq,
                "num_classes": self.num_classes}


@dataclass(frozen=True)
class PQReport:
    pq: float
    sq: float
    rq: float
    per_class: tuple[PQClassStats, ...]
    things: PQAggregate
    stuff: PQAggregate

    def to_dict(self) -> dict:
        return {
            "pq": self.pq, "sq": self.sq, "rq": self.rq,
            "things": self.things.to_dict(),
            "stuff": self.stuff.to_dict(),
            "per_class": [c.to_dict() for c in self.per_class],
        }


@dataclass(frozen=True)
class PCClassStats:
    class_id: int
    covering: float
    gt_area: int

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "covering": self.covering,
                "gt_area": self.gt_area}


@dataclass(frozen=True)
class PCReport:
    pc: float
    per_class: tuple[PCClassStats, ...]

    def to_dict(self) -> dict:
        return {"pc": self.pc, "per_class": [c.to_dict() for c in self.per_class]}


def _encode(pmap: PanopticMap, spec: DatasetSpec, keep: np.ndarray,
            inst_stride: int) -> np.ndarray:
    """Per-pixel segment key: class * stride + (instance if thing else 0).

    Ignore-labeled pixels get key -1.
    """
    sem = pmap.semantic_plane().astype(np.int64).ravel()
    ins = pmap.instance_plane().astype(np.int64).ravel()
    thing = np.isin(sem, np.array(sorted(spec.thing_ids), dtype=np.int64))
    key = sem * inst_stride + np.where(thing, ins, 0)
    if spec.ignore_label is not None:
        key[sem == spec.ignore_label] = -1
    return key[keep]


def _decode_segments(keys: np.ndarray, counts: np.ndarray, spec: DatasetSpec,
                     inst_stride: int) -> tuple[list[Segment], dict[int, int]]:
    segments: list[Segment] = []
    index: dict[int, int] = {}
    for k, area in zip(keys.tolist(), counts.tolist()):
        if k < 0:
            continue
        class_id, inst = divmod(k, inst_stride)
        kind = "thing" if class_id in spec.thing_ids else "stuff"
        index[k] = len(segments)
        segments.append(Segment(class_id=class_id, instance_id=inst, kind=kind,
                                area=int(area), label=len(segments)))
    return segments, index


def _joint_stats(gt: PanopticMap, pred: PanopticMap, spec: DatasetSpec):
    """Segments of both maps plus all pairwise intersection areas.

    Ground-truth ignore pixels are removed from both maps first.
    Intersections come back ordered by (gt key, pred key) ascending, so
    downstream float accumulation is deterministic.
    """
    if gt.semantic.shape != pred.semantic.shape:
        raise DimensionMismatchError(
            f"gt {gt.semantic.shape} vs pred {pred.semantic.shape}")
    gt.validate(spec)
    pred.validate(spec)

    max_inst = max(int(gt.instance_plane().max(initial=0)),
                   int(pred.instance_plane().max(initial=0)))
    stride = max_inst + 1

    keep = np.ones(gt.height * gt.width, dtype=bool)
    if spec.ignore_label is not None:
        keep = gt.semantic_plane().ravel() != spec.ignore_label

    gk = _encode(gt, spec, keep, stride)
    pk = _encode(pred, spec, keep, stride)

    gt_keys, gt_counts = np.unique(gk, return_counts=True)
    pred_keys, pred_counts = np.unique(pk, return_counts=True)
    gt_segments, gt_index = _decode_segments(gt_keys, gt_counts, spec, stride)
    pred_segments, pred_index = _decode_segments(pred_keys, pred_counts, spec, stride)

    span = int(pred_keys.max(initial=0)) + 2
    joint = (gk + 1) * span + (pk + 1)  # shift so ignore (-1) stays representable
    pair_keys, pair_counts = np.unique(joint, return_counts=True)

    intersections: list[tuple[int, int, int]] = []  # (gt label, pred label, area)
    for k, area in zip(pair_keys.tolist(), pair_counts.tolist()):
        gkey = k // span - 1
        pkey = k % span - 1
        if gkey < 0 or pkey < 0:
            continue
        intersections.append((gt_index[gkey], pred_index[pkey], int(area)))
    return gt_segments, pred_segments, intersections


def extract_segments(pmap: PanopticMap, spec: DatasetSpec) -> list[Segment]:
    """All segments of a map: one per thing instance, one per stuff class
    present; ignore-labeled pixels produce none."""
    pmap.validate(spec)
    max_inst = int(pmap.instance_plane().max(initial=0))
    stride = max_inst + 1
    keep = np.ones(pmap.height * pmap.width, dtype=bool)
    keys = _encode(pmap, spec, keep, stride)
    uniq, counts = np.unique(keys, return_counts=True)
    segments, _ = _decode_segments(uniq, counts, spec, stride)
    return segments


def panoptic_quality(gt: PanopticMap, pred: PanopticMap,
                     spec: DatasetSpec) -> PQReport:
    """PQ/SQ/RQ with per-class and thing/stuff breakdowns.

    Segments match when IoU > 0.5, which makes the matching provably
    one-to-one; classes absent from both maps are excluded from all
    averages.
    """
    gt_segments, pred_segments, inter = _joint_stats(gt, pred, spec)

    tp = np.zeros(spec.num_classes, dtype=np.int64)
    fp = np.zeros(spec.num_classes, dtype=np.int64)
    fn = np.zeros(spec.num_classes, dtype=np.int64)
    iou_sum = np.zeros(spec.num_classes, dtype=np.float64)
    gt_matched: set[int] = set()
    pred_matched: set[int] = set()

    for g, p, area in inter:
        gs, ps = gt_segments[g], pred_segments[p]
        if gs.class_id != ps.class_id:
            continue
        iou = area / (gs.area + ps.area - area)
        if iou > MATCH_IOU_THRESHOLD:
            if g in gt_matched or p in pred_matched:
                raise InternalInvariantError(
                    "IoU>0.5 matching produced a duplicate match")
            gt_matched.add(g)
            pred_matched.add(p)
            tp[gs.class_id] += 1
            iou_sum[gs.class_id] += iou

    for i, s in enumerate(gt_segments):
        if i not in gt_matched:
            fn[s.class_id] += 1
    for i, s in enumerate(pred_segments):
        if i not in pred_matched:
            fp[s.class_id] += 1

    per_class = []
    for c in range(spec.num_classes):
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        denom = tp[c] + 0.5 * fp[c] + 0.5 * fn[c]
        sq = iou_sum[c] / tp[c] if tp[c] else 0.0
        rq = tp[c] / denom
        pq = iou_sum[c] / denom
        per_class.append(PQClassStats(class_id=c, pq=pq, sq=sq, rq=rq,
                                      tp=int(tp[c]), fp=int(fp[c]), fn=int(fn[c])))

    def aggregate(rows):
        if not rows:
            return PQAggregate(0.0, 0.0, 0.0, 0)
        n = len(rows)
        return PQAggregate(
            pq=sum(r.pq for r in rows) / n,
            sq=sum(r.sq for r in rows) / n,
            rq=sum(r.rq for r in rows) / n,
            num_classes=n,
        )

    overall = aggregate(per_class)
    things = aggregate([r for r in per_class if r.class_id in spec.thing_ids])
    stuff = aggregate([r for r in per_class if r.class_id not in spec.thing_ids])
    return PQReport(pq=overall.pq, sq=overall.sq, rq=overall.rq,
                    per_class=tuple(per_class), things=things, stuff=stuff)


def parsing_covering(gt: PanopticMap, pred: PanopticMap,
                     spec: DatasetSpec) -> PCReport:
    """Area-weighted best-IoU covering averaged over classes present in
    the ground truth. No matching: every ground-truth region takes its
    best-overlapping predicted region of the same class independently.
    """
    gt_segments, pred_segments, inter = _joint_stats(gt, pred, spec)

    best_iou = np.zeros(len(gt_segments), dtype=np.float64)
    for g, p, area in inter:
        gs, ps = gt_segments[g], pred_segments[p]
        if gs.class_id != ps.class_id:
            continue
        iou = area / (gs.area + ps.area - area)
        if iou > best_iou[g]:
            best_iou[g] = iou

    weighted = np.zeros(spec.num_classes, dtype=np.float64)
    gt_area = np.zeros(spec.num_classes, dtype=np.int64)
    for i, s in enumerate(gt_segments):
        weighted[s.class_id] += s.area * best_iou[i]
        gt_area[s.class_id] += s.area

    per_class = [PCClassStats(class_id=c,
                              covering=weighted[c] / gt_area[c],
                              gt_area=int(gt_area[c]))
                 for c in range(spec.num_classes) if gt_area[c] > 0]
    pc = (sum(r.covering for r in per_class) / len(per_class)) if per_class else 0.0
    return PCReport(pc=pc, per_class=tuple(per_class))
