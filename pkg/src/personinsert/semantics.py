"""Label taxonomies, label-group reduction and label-map geometry.

Every resampling in this module is nearest-neighbour, so no operation can
introduce a label that was absent from its input.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image


class TaxonomyMismatch(ValueError):
    pass


class EmptyForeground(ValueError):
    """Raised when an operation needs a person but the map is all background."""


@dataclass(frozen=True)
class LabelTaxonomy:
    name: str
    group_names: tuple[str, ...]

    def __post_init__(self):
        if not self.group_names or self.group_names[0] != "background":
            raise ValueError(f"taxonomy {self.name!r}: index 0 must be background")

    @property
    def group_count(self) -> int:
        return len(self.group_names)

    def index(self, group_name: str) -> int:
        return self.group_names.index(group_name)


@dataclass(frozen=True)
class ReductionTable:
    source: LabelTaxonomy
    target: LabelTaxonomy
    mapping: tuple[int, ...]

    def __post_init__(self):
        if len(self.mapping) != self.source.group_count:
            raise ValueError("reduction table must map every source label")
        if self.mapping[0] != 0:
            raise ValueError("background must map to background")
        if any(not 0 <= t < self.target.group_count for t in self.mapping):
            raise ValueError("reduction table maps outside the target taxonomy")

    @property
    def lut(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.uint8)


@lru_cache(maxsize=None)
def _config() -> dict:
    text = resources.files("personinsert").joinpath("data/taxonomies.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def get_taxonomy(name: str) -> LabelTaxonomy:
    try:
        names = _config()["taxonomies"][name]
    except KeyError:
        raise KeyError(f"unknown taxonomy {name!r}") from None
    return LabelTaxonomy(name, tuple(names))


@lru_cache(maxsize=None)
def get_reduction(name: str) -> ReductionTable:
    """Load a reduction table such as ``"mhp->stage1"`` from the shipped config."""
    spec = _config()["reductions"][name]
    src_name, dst_name = name.split("->")
    src, dst = get_taxonomy(src_name), get_taxonomy(dst_name)
    mapping = [None] * src.group_count
    for target_group, members in spec.items():
        t = dst.index(target_group)
        for m in members:
            s = src.index(m)
            if mapping[s] is not None:
                raise ValueError(f"{name}: source label {m!r} mapped twice")
            mapping[s] = t
    missing = [src.group_names[i] for i, t in enumerate(mapping) if t is None]
    if missing:
        raise ValueError(f"{name}: unmapped source labels {missing}")
    return ReductionTable(src, dst, tuple(mapping))


STAGE1 = "stage1"
STAGE3 = "stage3"


@dataclass(frozen=True, eq=False)
class SemanticMap:
    """A single-channel label grid under a named taxonomy."""

    labels: np.ndarray
    taxonomy: LabelTaxonomy

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise ValueError(f"semantic map must be a non-empty 2-D grid, got {labels.shape}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ValueError("labels must fit in 8 bits")
            labels = labels.astype(np.uint8)
        if labels.max() >= self.taxonomy.group_count:
            raise ValueError(
                f"label {int(labels.max())} out of range for taxonomy "
                f"{self.taxonomy.name!r} ({self.taxonomy.group_count} groups)"
            )
        labels = labels.copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return self.taxonomy == other.taxonomy and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BodyHeatmap:
    """Binary per-region masks, one channel per non-background label."""

    channels: np.ndarray
    taxonomy: LabelTaxonomy

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.shape[0] != self.taxonomy.group_count - 1:
            raise ValueError("heatmap needs one channel per non-background label")
        if not np.isin(ch, (0, 1)).all() or (ch.sum(axis=0) > 1).any():
            raise ValueError("heatmap channels must be binary and mutually exclusive")


@dataclass(frozen=True)
class PlacementRecord:
    """Links a region of an original grid to a canvas.

    A pixel at original column ``x`` lands near canvas column
    ``pad_left + scale * (x - crop_box[0])``; rows likewise.
    """

    scale: float
    pad_left: int
    pad_top: int
    crop_box: tuple[int, int, int, int]  # x, y, w, h in original coordinates

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.pad_left < 0 or self.pad_top < 0:
            raise ValueError("pads must be non-negative")
        if self.crop_box[2] < 1 or self.crop_box[3] < 1:
            raise ValueError("crop box must be non-empty")

    @property
    def content_size(self) -> tuple[int, int]:
        """(height, width) of the resampled region on the canvas."""
        _, _, w, h = self.crop_box
        return (max(1, math.floor(h * self.scale + 1e-9)),
                max(1, math.floor(w * self.scale + 1e-9)))

    def to_dict(self) -> dict:
        return {"scale": self.scale, "pad_left": self.pad_left,
                "pad_top": self.pad_top, "crop_box": list(self.crop_box)}

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementRecord":
        return cls(float(d["scale"]), int(d["pad_left"]), int(d["pad_top"]),
                   tuple(int(v) for v in d["crop_box"]))


def nn_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Source index sampled by each destination index (pixel-centre aligned)."""
    j = np.arange(dst_len, dtype=np.int64)
    return ((2 * j + 1) * src_len) // (2 * dst_len)


def _fit_dims(h: int, w: int, out_h: int, out_w: int) -> tuple[int, int, float]:
    # integer arithmetic so the longer side fills the canvas exactly
    if out_h * w <= out_w * h:
        new_h, new_w, scale = out_h, (w * out_h) // h, out_h / h
    else:
        new_h, new_w, scale = (h * out_w) // w, out_w, out_w / w
    return max(1, new_h), max(1, new_w), scale


def resize_pad_array(arr: np.ndarray, out_h: int, out_w: int, fill=0):
    """Aspect-preserving nearest-neighbour resize of ``arr`` (H, W[, C]) then centre padding."""
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("cannot resize an empty grid")
    new_h, new_w, scale = _fit_dims(h, w, out_h, out_w)
    resized = arr[nn_indices(h, new_h)][:, nn_indices(w, new_w)]
    pad_top, pad_left = (out_h - new_h) // 2, (out_w - new_w) // 2
    out = np.empty((out_h, out_w) + arr.shape[2:], dtype=arr.dtype)
    out[...] = fill
    out[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = resized
    return out, PlacementRecord(scale, pad_left, pad_top, (0, 0, w, h))


def fit_to_shape(smap: SemanticMap, out_h: int, out_w: int) -> tuple[SemanticMap, PlacementRecord]:
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    out, record = resize_pad_array(smap.labels, out_h, out_w, fill=0)
    return SemanticMap(out, smap.taxonomy), record


def resize_pad(smap: SemanticMap, side: int) -> tuple[SemanticMap, PlacementRecord]:
    """Resize to fit a ``side`` x ``side`` canvas keeping the aspect ratio, zero-padded.

    The scaled size is floored; the odd padding pixel goes right/bottom.
    """
    return fit_to_shape(smap, side, side)


def invert_placement(canvas: np.ndarray, record: PlacementRecord) -> np.ndarray:
    """Resample the canvas content back to the size of ``record.crop_box``."""
    new_h, new_w = record.content_size
    _, _, w, h = record.crop_box
    content = canvas[record.pad_top:record.pad_top + new_h,
                     record.pad_left:record.pad_left + new_w]
    return content[nn_indices(new_h, h)][:, nn_indices(new_w, w)]


def foreground_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x, y, w, h) box of the nonzero cells."""
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if ys.size == 0:
        raise EmptyForeground("no foreground present")
    return int(xs[0]), int(ys[0]), int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1)


def center_crop_resize_with_record(smap: SemanticMap, side: int):
    x, y, w, h = foreground_bbox(smap.foreground())
    crop = SemanticMap(smap.labels[y:y + h, x:x + w], smap.taxonomy)
    out, rec = resize_pad(crop, side)
    # express the record against the square box centred on the person
    L = max(w, h)
    square = (x - (L - w) // 2, y - (L - h) // 2, L, L)
    return out, PlacementRecord(rec.scale, 0, 0, square)


def center_crop_resize(smap: SemanticMap, side: int) -> SemanticMap:
    """Crop the square around the person (tight box grown to its longer side) and resize.

    Raises ``EmptyForeground`` for an all-background map.
    """
    return center_crop_resize_with_record(smap, side)[0]


def reduce_labels(smap: SemanticMap, table: ReductionTable) -> SemanticMap:
    if smap.taxonomy != table.source:
        raise TaxonomyMismatch(
            f"map taxonomy {smap.taxonomy.name!r} does not match table source {table.source.name!r}"
        )
    return SemanticMap(table.lut[smap.labels], table.target)


def to_heatmap(smap: SemanticMap) -> BodyHeatmap:
    if smap.taxonomy.name != STAGE3:
        raise TaxonomyMismatch(f"heatmaps are defined on the {STAGE3} taxonomy, got {smap.taxonomy.name!r}")
    k = np.arange(1, smap.taxonomy.group_count, dtype=np.uint8)[:, None, None]
    return BodyHeatmap((smap.labels[None] == k).astype(np.uint8), smap.taxonomy)


def from_heatmap(hm: BodyHeatmap) -> SemanticMap:
    ch = hm.channels
    labels = np.where(ch.any(axis=0), ch.argmax(axis=0) + 1, 0)
    return SemanticMap(labels.astype(np.uint8), hm.taxonomy)


def merge_persons(maps: Sequence[SemanticMap]) -> SemanticMap:
    """Stack person maps in order; a later person's foreground overwrites earlier ones."""
    if not maps:
        raise ValueError("no person maps to merge")
    out = np.zeros(maps[0].shape, dtype=np.uint8)
    for m in maps:
        if m.shape != out.shape or m.taxonomy != maps[0].taxonomy:
            raise ValueError("person maps must share shape and taxonomy")
        fg = m.labels > 0
        out[fg] = m.labels[fg]
    return SemanticMap(out, maps[0].taxonomy)


def build_context_pair(scene_maps: Sequence[SemanticMap], target_index: int):
    """Split a scene into (context of all other persons, held-out target person)."""
    if len(scene_maps) < 2:
        raise ValueError("a context pair needs at least two persons in the scene")
    if not 0 <= target_index < len(scene_maps):
        raise IndexError(f"target_index {target_index} out of range")
    rest = [m for i, m in enumerate(scene_maps) if i != target_index]
    return merge_persons(rest), scene_maps[target_index]


# -- on-disk formats ---------------------------------------------------------

def save_map(smap: SemanticMap, path) -> None:
    Image.fromarray(np.ascontiguousarray(smap.labels), mode="L").save(path, format="PNG")


def load_map(path, taxonomy: LabelTaxonomy | str) -> SemanticMap:
    if isinstance(taxonomy, str):
        taxonomy = get_taxonomy(taxonomy)
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: label maps must be single-channel 8-bit, got mode {im.mode}")
        arr = np.array(im, dtype=np.uint8)
    return SemanticMap(arr, taxonomy)


@dataclass
class PairRecord:
    scene_id: str
    target_index: int
    seed: int
    extra: dict = field(default_factory=dict)


def write_pair_manifest(records: Iterable[PairRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            row = {"scene_id": r.scene_id, "target_index": r.target_index, "seed": r.seed}
            row.update(r.extra)
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_pair_manifest(path) -> list[PairRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            out.append(PairRecord(row.pop("scene_id"), int(row.pop("target_index")),
                                  int(row.pop("seed")), row))
    return out


def choose_target(n_persons: int, seed: int) -> int:
    """Deterministic stand-in for picking a random held-out person."""
    return int(np.random.default_rng(seed).integers(n_persons))
