"""Panoptic label maps and dataset descriptions.

A PanopticMap pairs a semantic-class plane with an instance-id plane and
is both the ground-truth format and the final output of the fusion
pipeline. A DatasetSpec fixes the class count, the thing/stuff split,
and the optional ignore label that is excluded from evaluation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, InvalidAnnotationError, InvalidInputError
from .tensor import TensorMap, read_rten, write_rten

NO_INSTANCE = 0


@dataclass(frozen=True)
class DatasetSpec:
    """Class inventory: how many classes, which are things, what to ignore."""

    num_classes: int
    thing_ids: frozenset[int]
    names: tuple[str, ...] = ()
    ignore_label: int | None = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        things = frozenset(int(t) for t in self.thing_ids)
        object.__setattr__(self, "thing_ids", things)
        if any(t < 0 or t >= self.num_classes for t in things):
            raise InvalidInputError("thing_ids must lie in [0, num_classes)")
        names = tuple(self.names) if self.names else tuple(
            f"class_{i}" for i in range(self.num_classes))
        if len(names) != self.num_classes:
            raise InvalidInputError(
                f"expected {self.num_classes} names, got {len(names)}")
        object.__setattr__(self, "names", names)
        if self.ignore_label is not None and 0 <= self.ignore_label < self.num_classes:
            raise InvalidInputError("ignore_label must lie outside [0, num_classes)")

    @property
    def stuff_ids(self) -> frozenset[int]:
        return frozenset(range(self.num_classes)) - self.thing_ids

    def is_thing(self, class_id: int) -> bool:
        return class_id in self.thing_ids

    def to_json(self) -> str:
        return json.dumps({
            "num_classes": self.num_classes,
            "thing_ids": sorted(self.thing_ids),
            "names": list(self.names),
            "ignore_label": self.ignore_label,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"bad dataset spec JSON: {e}") from e
        if not isinstance(raw, dict) or "num_classes" not in raw or "thing_ids" not in raw:
            raise InvalidInputError("dataset spec needs num_classes and thing_ids")
        return cls(
            num_classes=int(raw["num_classes"]),
            thing_ids=frozenset(int(t) for t in raw["thing_ids"]),
            names=tuple(raw.get("names") or ()),
            ignore_label=raw.get("ignore_label"),
        )

    @classmethod
    def load(cls, path) -> "DatasetSpec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")


@dataclass(frozen=True, eq=False)
class PanopticMap:
    """Per-pixel semantic labels plus per-pixel instance ids.

    Instance id 0 is reserved for "no instance": stuff pixels (and
    ignore-labeled pixels) carry id 0, thing pixels carry a positive id,
    and every positive id covers pixels of exactly one semantic class.
    """

    semantic: TensorMap
    instance: TensorMap

    def __post_init__(self):
        for name, t in (("semantic", self.semantic), ("instance", self.instance)):
            if t.dtype_name != "int32":
                raise InvalidInputError(f"{name} plane must be int32")
            if t.channels != 1:
                raise DimensionMismatchError(f"{name} plane must have 1 channel")
        if self.semantic.shape != self.instance.shape:
            raise DimensionMismatchError(
                f"semantic {self.semantic.shape} vs instance {self.instance.shape}")

    @property
    def height(self) -> int:
        return self.semantic.height

    @property
    def width(self) -> int:
        return self.semantic.width

    def semantic_plane(self) -> np.ndarray:
        """Semantic labels as a read-only (H, W) view."""
        return self.semantic.data[0]

    def instance_plane(self) -> np.ndarray:
        """Instance ids as a read-only (H, W) view."""
        return self.instance.data[0]

    @classmethod
    def from_planes(cls, semantic: np.ndarray, instance: np.ndarray) -> "PanopticMap":
        sem = np.asarray(semantic, dtype=np.int32)
        ins = np.asarray(instance, dtype=np.int32)
        if sem.ndim == 2:
            sem = sem[None]
        if ins.ndim == 2:
            ins = ins[None]
        return cls(TensorMap(sem), TensorMap(ins))

    def validate(self, spec: DatasetSpec) -> None:
        """Check all map invariants against a dataset spec.

        Raises InvalidAnnotationError with a description of the first
        violation found.
        """
        sem = self.semantic_plane()
        ins = self.instance_plane()
        valid = (sem >= 0) & (sem < spec.num_classes)
        if spec.ignore_label is not None:
            valid |= sem == spec.ignore_label
        if not valid.all():
            bad = int(sem[~valid].flat[0])
            raise InvalidAnnotationError(f"semantic label {bad} outside [0,{spec.num_classes})")
        if ins.min() < 0:
            raise InvalidAnnotationError("negative instance id")
        thing_ids = np.array(sorted(spec.thing_ids), dtype=np.int32)
        is_thing = np.isin(sem, thing_ids)
        if spec.ignore_label is not None:
            ignored = sem == spec.ignore_label
            if (ins[ignored] != NO_INSTANCE).any():
                raise InvalidAnnotationError("ignore-labeled pixel with an instance id")
            is_thing &= ~ignored
        if (ins[~is_thing] != NO_INSTANCE).any():
            raise InvalidAnnotationError("stuff pixel with a nonzero instance id")
        if (ins[is_thing] == NO_INSTANCE).any():
            raise InvalidAnnotationError("thing pixel with instance id 0")
        # Each positive id must cover exactly one semantic class.
        pos = ins > 0
        if pos.any():
            pairs = np.unique(
                ins[pos].astype(np.int64) * (spec.num_classes + 1) + sem[pos])
            ids = pairs // (spec.num_classes + 1)
            if np.unique(ids).size != ids.size:
                raise InvalidAnnotationError("an instance id spans multiple semantic classes")

    def instance_ids(self) -> np.ndarray:
        """Sorted positive instance ids present in the map."""
        ids = np.unique(self.instance_plane())
        return ids[ids > 0]

    def to_tensor(self) -> TensorMap:
        stacked = np.concatenate([self.semantic.data, self.instance.data], axis=0)
        return TensorMap(stacked)

    @classmethod
    def from_tensor(cls, t: TensorMap) -> "PanopticMap":
        if t.channels != 2 or t.dtype_name != "int32":
            raise InvalidInputError(
                f"panoptic tensor must be (2,H,W) int32, got {t.shape} {t.dtype_name}")
        return cls(TensorMap(t.data[0:1]), TensorMap(t.data[1:2]))

    def save(self, path) -> None:
        write_rten(path, self.to_tensor())

    @classmethod
    def load(cls, path) -> "PanopticMap":
        return cls.from_tensor(read_rten(path))


def ids_match_up_to_permutation(a: PanopticMap, b: PanopticMap) -> bool:
    """True when the maps agree except for a relabeling of instance ids.

    Semantic planes must match exactly; the positive-id planes must be
    related by a bijection (0 maps to 0).
    """
    if a.semantic.shape != b.semantic.shape:
        return False
    if not np.array_equal(a.semantic_plane(), b.semantic_plane()):
        return False
    ia = a.instance_plane().ravel()
    ib = b.instance_plane().ravel()
    if not np.array_equal(ia > 0, ib > 0):
        return False
    pos = ia > 0
    if not pos.any():
        return True
    pairs = np.unique(np.stack([ia[pos], ib[pos]], axis=1), axis=0)
    return (np.unique(pairs[:, 0]).size == pairs.shape[0]
            and np.unique(pairs[:, 1]).size == pairs.shape[0])
