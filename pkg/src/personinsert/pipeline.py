"""End-to-end insertion: context map, coarse placement, retrieval, rendering, paste.

Every failure raised by ``generate_person`` is a ``PipelineError`` tagged
with one category: positional (no usable coarse placement), scale (the
placement does not translate into a sensible box in the scene), contextual
(no fitting refined map in the knowledge base) or rendering (the generator
produced unusable output).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .coarse_gen import CoarseGenerationFailed, CoarseModel, canvas_box_to_scene, extract_placement, infer_coarse
from .knowledge_base import EmptyPool, KnowledgeBase, featurize, retrieve
from .renderer import RendererBundle, canonical_sample, image_to_tensor, tensor_to_image
from .semantics import (
    STAGE1,
    STAGE3,
    PlacementRecord,
    SemanticMap,
    fit_to_shape,
    foreground_bbox,
    get_taxonomy,
    merge_persons,
    resize_pad,
    save_map,
)

CATEGORIES = ("positional", "scale", "contextual", "rendering")
SWAP_REGIONS = ("hair", "upper_wear", "lower_wear")
MIN_PERSON_PX = 4


class PipelineError(RuntimeError):
    def __init__(self, category: str, message: str):
        if category not in CATEGORIES:
            raise ValueError(f"unknown failure category {category!r}")
        super().__init__(f"[{category}] {message}")
        self.category = category


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 uint8
    person_maps: list  # stage-1 SemanticMaps, one per person
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("scene image must be H x W x 3")
        for m in self.person_maps:
            if m.shape != self.image.shape[:2]:
                raise ValueError(f"person map {m.shape} does not match image {self.image.shape[:2]}")
            if m.taxonomy.name != STAGE1:
                raise ValueError("scene person maps must use the stage1 taxonomy")


@dataclass
class Exemplar:
    image: np.ndarray  # S x S x 3 uint8
    smap: SemanticMap  # stage-3, S x S
    gender: str

    def __post_init__(self):
        if self.image.shape[:2] != self.smap.shape:
            raise ValueError("exemplar image and map differ in size")
        if self.smap.taxonomy.name != STAGE3:
            raise ValueError("exemplar map must use the stage3 taxonomy")
        if not self.smap.foreground().any():
            raise ValueError("exemplar map has no foreground")

    @classmethod
    def from_raw(cls, image, smap: SemanticMap, gender: str, size: int) -> "Exemplar":
        img, m = canonical_sample(image, smap, size)
        return cls(img, m, gender)


@dataclass
class GenerationResult:
    modified_scene: np.ndarray
    coarse_map: SemanticMap
    refined_map: SemanticMap
    placement: PlacementRecord  # scene -> coarse canvas transform
    coarse_box: tuple  # new person's (x, y, w, h) on the coarse canvas
    paste: PlacementRecord  # scene region <- rendered canvas
    retrieval_scores: list
    candidate_ids: list
    top_index: int
    rendered: np.ndarray
    person_mask: np.ndarray
    clipped: bool
    seed: int


# -- compositing ---------------------------------------------------------------

def paste_geometry(record: PlacementRecord, scene_shape) -> tuple[slice, slice, np.ndarray, np.ndarray, bool]:
    """Scene rows/cols covered by ``record`` (clipped) and the canvas index each one samples."""
    x0, y0, w, h = record.crop_box
    H, W = scene_shape[:2]
    xa, xb, ya, yb = max(x0, 0), min(x0 + w, W), max(y0, 0), min(y0 + h, H)
    clipped = (xa, xb, ya, yb) != (x0, x0 + w, y0, y0 + h)
    xs, ys = np.arange(xa, xb), np.arange(ya, yb)
    u = record.pad_left + np.floor((xs - x0 + 0.5) * record.scale).astype(np.int64)
    v = record.pad_top + np.floor((ys - y0 + 0.5) * record.scale).astype(np.int64)
    return slice(ya, max(ya, yb)), slice(xa, max(xa, xb)), v, u, clipped


def composite(scene_image: np.ndarray, rendered: np.ndarray, person_mask: np.ndarray,
              placement: PlacementRecord) -> tuple[np.ndarray, bool]:
    """Hard nearest-neighbour paste of ``rendered`` where ``person_mask`` is set.

    Scene pixel (x, y) inside ``placement.crop_box`` samples canvas pixel
    (pad_left + floor((x - x0 + 0.5) * scale), likewise for rows). Returns the
    new image and whether the box had to be clipped to the scene.
    """
    if rendered.shape[:2] != person_mask.shape:
        raise ValueError("rendered image and mask differ in size")
    out = scene_image.copy()
    rows, cols, v, u, clipped = paste_geometry(placement, scene_image.shape)
    ok_u, ok_v = (u >= 0) & (u < rendered.shape[1]), (v >= 0) & (v < rendered.shape[0])
    u, v = np.clip(u, 0, rendered.shape[1] - 1), np.clip(v, 0, rendered.shape[0] - 1)
    sel = person_mask[np.ix_(v, u)] & ok_v[:, None] & ok_u[None, :]
    region = out[rows, cols]
    region[sel] = rendered[np.ix_(v, u)][sel]
    out[rows, cols] = region
    return out, clipped


def transformed_mask(scene_shape, person_mask: np.ndarray, placement: PlacementRecord) -> np.ndarray:
    """Scene-sized boolean mask of the pixels ``composite`` would overwrite."""
    probe = np.zeros(tuple(scene_shape[:2]) + (1,), np.uint8)
    ones = np.ones(person_mask.shape + (1,), np.uint8)
    return composite(probe, ones, person_mask, placement)[0][..., 0].astype(bool)


def scene_placement(coarse_box, scene_record: PlacementRecord, refined_mask: np.ndarray,
                    scene_shape) -> PlacementRecord:
    """Fit the rendered person into the coarse box: equal height, bottom-centre aligned."""
    sx, sy, sw, sh = canvas_box_to_scene(coarse_box, scene_record)
    rx, ry, rw, rh = foreground_bbox(refined_mask)
    s = sh / rh  # scene pixels per rendered pixel
    w, h = max(1, round(rw * s)), max(1, round(rh * s))
    if h < MIN_PERSON_PX:
        raise PipelineError("scale", f"person would be {h}px tall in the scene")
    x0 = round(sx + sw / 2 - w / 2)
    y0 = round(sy + sh - h)
    H, W = scene_shape[:2]
    if x0 >= W or y0 >= H or x0 + w <= 0 or y0 + h <= 0:
        raise PipelineError("scale", f"placement box {(x0, y0, w, h)} lies outside the {W}x{H} scene")
    return PlacementRecord(1.0 / s, rx, ry, (x0, y0, w, h))


# -- stages --------------------------------------------------------------------

@dataclass
class CoarseStage:
    coarse_map: SemanticMap
    box: tuple
    scene_record: PlacementRecord


def coarse_stage(scene: Scene, coarse_model: CoarseModel) -> CoarseStage:
    side = coarse_model.config.canvas_side
    s1 = get_taxonomy(STAGE1)
    if scene.person_maps:
        context = merge_persons(scene.person_maps)
    else:
        context = SemanticMap(np.zeros(scene.image.shape[:2], np.uint8), s1)
    canvas, record = resize_pad(context, side)
    coarse = infer_coarse(coarse_model, canvas)
    try:
        _, box_rec = extract_placement(coarse)
    except CoarseGenerationFailed as exc:
        raise PipelineError("positional", str(exc)) from exc
    return CoarseStage(coarse, box_rec.crop_box, record)


def retrieval_stage(coarse: SemanticMap, kb: KnowledgeBase, gender: str, top_k: int, encoder=None):
    query = featurize([coarse], kb.scheme, encoder, query=True)[0]
    try:
        return retrieve(kb, query, gender, top_k=top_k)
    except EmptyPool as exc:
        raise PipelineError("contextual", str(exc)) from exc


def render_stage(exemplar: Exemplar, refined: SemanticMap, renderer: RendererBundle):
    size = renderer.config.image_size
    if exemplar.image.shape[:2] != (size, size):
        raise PipelineError("rendering", f"exemplar is {exemplar.image.shape[:2]}, renderer expects {size}x{size}")
    target = fit_to_shape(refined, size, size)[0]
    if not target.foreground().any():
        raise PipelineError("rendering", "refined map has no foreground at the renderer size")
    try:
        out = renderer.render(exemplar.image, exemplar.smap, target)
    except (RuntimeError, ValueError) as exc:
        raise PipelineError("rendering", f"generator failed: {exc}") from exc
    if not torch.isfinite(out).all():
        raise PipelineError("rendering", "generator produced non-finite values")
    return tensor_to_image(out), target


def refined_map_of(kb: KnowledgeBase, entry_id: str) -> SemanticMap:
    m = kb.maps.get(entry_id) if kb.maps else None
    if m is None:
        raise PipelineError("contextual", f"knowledge-base entry {entry_id} has no stored map")
    return m


def _finish(scene, exemplar, stage, kb, hits, index, renderer, seed) -> GenerationResult:
    entry, _ = hits[index]
    rendered, refined = render_stage(exemplar, refined_map_of(kb, entry.id), renderer)
    mask = refined.foreground()
    paste = scene_placement(stage.box, stage.scene_record, mask, scene.image.shape)
    modified, clipped = composite(scene.image, rendered, mask, paste)
    return GenerationResult(modified, stage.coarse_map, refined, stage.scene_record, stage.box, paste,
                            [s for _, s in hits[:index + 1]], [e.id for e, _ in hits[:index + 1]],
                            index, rendered, mask, clipped, seed)


def generate_person(scene: Scene, exemplar: Exemplar, kb: KnowledgeBase, coarse_model: CoarseModel,
                    renderer: RendererBundle, top_index: int = 0, encoder=None, seed: int = 0) -> GenerationResult:
    """Insert one person rendered in the exemplar's appearance into ``scene``."""
    if top_index < 0:
        raise ValueError("top_index must be non-negative")
    torch.manual_seed(seed)
    stage = coarse_stage(scene, coarse_model)
    hits = retrieval_stage(stage.coarse_map, kb, exemplar.gender, top_index + 1, encoder)
    if len(hits) <= top_index:
        raise PipelineError("contextual", f"retrieval pool holds {len(hits)} candidates; top_index {top_index} unavailable")
    return _finish(scene, exemplar, stage, kb, hits, top_index, renderer, seed)


def diversity_generate(scene: Scene, exemplar: Exemplar, kb: KnowledgeBase, coarse_model: CoarseModel,
                       renderer: RendererBundle, k: int, encoder=None, seed: int = 0) -> list[GenerationResult]:
    """One result per retrieval rank 0..min(k, pool)-1, sharing a single coarse stage."""
    if k < 1:
        raise ValueError("k must be at least 1")
    torch.manual_seed(seed)
    stage = coarse_stage(scene, coarse_model)
    hits = retrieval_stage(stage.coarse_map, kb, exemplar.gender, k, encoder)
    return [_finish(scene, exemplar, stage, kb, hits, i, renderer, seed) for i in range(len(hits))]


# -- appearance swap --------------------------------------------------------------

def swap_with_mask(target_image: torch.Tensor, generated: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """M * generated + (1 - M) * target for a binary region mask M."""
    m = torch.from_numpy(np.asarray(mask, bool))
    if m.shape != target_image.shape[-2:] or generated.shape != target_image.shape:
        raise ValueError("mask, target and generated image must share spatial size")
    return torch.where(m, generated, target_image)


def appearance_swap(target: Exemplar, style: Exemplar, region: str | int, renderer: RendererBundle) -> torch.Tensor:
    """Re-dress one region of ``target`` with the appearance of ``style``; 3 x S x S in [-1, 1]."""
    s3 = get_taxonomy(STAGE3)
    if isinstance(region, str):
        if region not in SWAP_REGIONS:
            raise ValueError(f"region must be one of {SWAP_REGIONS}, got {region!r}")
        region = s3.index(region)
    elif s3.group_names[region] not in SWAP_REGIONS:
        raise ValueError(f"label {region} ({s3.group_names[region]}) is not a swappable region")
    mask = target.smap.labels == region
    if not mask.any():
        raise ValueError(f"region {s3.group_names[region]!r} is absent from the target map")
    generated = renderer.render(style.image, style.smap, target.smap)
    return swap_with_mask(image_to_tensor(target.image), generated, mask)


# -- result bundles -----------------------------------------------------------------

def write_bundle(result: GenerationResult, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result.modified_scene).save(out / "scene.png", format="PNG")
    Image.fromarray(result.rendered).save(out / "rendered.png", format="PNG")
    save_map(result.coarse_map, out / "coarse.png")
    save_map(result.refined_map, out / "refined.png")
    placement = {"scene_to_canvas": result.placement.to_dict(), "coarse_box": list(result.coarse_box),
                 "paste": result.paste.to_dict()}
    (out / "placement.json").write_text(json.dumps(placement, sort_keys=True, indent=2) + "\n")
    manifest = {"top_index": result.top_index, "candidate_ids": result.candidate_ids,
                "retrieval_scores": result.retrieval_scores, "clipped": result.clipped, "seed": result.seed,
                **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out
