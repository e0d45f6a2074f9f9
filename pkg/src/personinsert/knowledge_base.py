"""Clustered store of fine semantic maps and cosine-ranked retrieval.

Maps are encoded into feature vectors, partitioned with Lloyd's K-means on
raw squared-Euclidean distance, and queried by first assigning the query to a
cluster and then ranking that cluster's members by cosine similarity.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .semantics import (
    STAGE1,
    STAGE3,
    SemanticMap,
    center_crop_resize,
    fit_to_shape,
    get_reduction,
    load_map,
    nn_indices,
    reduce_labels,
    resize_pad,
    save_map,
)

log = logging.getLogger(__name__)

ENCODED = "encoded-512"
PIXEL = "pixel-704"
ENCODE_SIDE = 128
PIXEL_SOURCE = (256, 176)  # H, W of the fashion crops
PIXEL_GRID = (32, 22)
GENDERS = ("women", "men")
KB_VERSION = 1

# one colour per stage-3 label; frozen because it defines the encoded feature space
PALETTE = np.array([
    [0, 0, 0],        # background
    [255, 0, 0],      # hair
    [255, 170, 0],    # face
    [255, 255, 0],    # skin
    [0, 128, 255],    # upper body wear
    [0, 255, 128],    # lower body wear
    [170, 0, 255],    # shoes
], dtype=np.uint8)


class FeatureExtractor(Protocol):
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, 128, 128) in [-1, 1] -> (N, 512, 4, 4)."""


class VGGEncoder:
    """Whole VGG-19 convolutional trunk, frozen."""

    def __init__(self):
        from .backbones import vgg19_features
        self.net = vgg19_features((37,))
        self.weights_source = self.net.weights_source

    def encode(self, images):
        with torch.no_grad():
            return self.net(images)[0]


def as_stage3(smap: SemanticMap) -> SemanticMap:
    if smap.taxonomy.name == STAGE3:
        return smap
    if smap.taxonomy.name == STAGE1:
        return reduce_labels(smap, get_reduction("stage1->stage3"))
    raise ValueError(f"cannot encode maps in taxonomy {smap.taxonomy.name!r}")


def render_palette(smap: SemanticMap) -> np.ndarray:
    return PALETTE[as_stage3(smap).labels]


def _to_input(maps: Sequence[SemanticMap]) -> torch.Tensor:
    rgb = np.stack([render_palette(m) for m in maps]).astype(np.float32)
    return torch.from_numpy(rgb).permute(0, 3, 1, 2) / 127.5 - 1.0


def pool_features(grid: torch.Tensor) -> torch.Tensor:
    """Adaptive average pool (N, 512, h, w) -> (N, 512)."""
    return F.adaptive_avg_pool2d(grid, 1).flatten(1)


def encode_maps(maps: Sequence[SemanticMap], fx: FeatureExtractor, batch: int = 32) -> np.ndarray:
    """Encode 128x128 maps; returns an (N, 512) float64 array."""
    for m in maps:
        if m.shape != (ENCODE_SIDE, ENCODE_SIDE):
            raise ValueError(f"maps must be canonicalised to {ENCODE_SIDE}x{ENCODE_SIDE}, got {m.shape}")
    out = []
    for i in range(0, len(maps), batch):
        grid = fx.encode(_to_input(maps[i:i + batch]))
        if tuple(grid.shape[1:]) != (512, 4, 4):
            raise ValueError(f"extractor produced {tuple(grid.shape[1:])}, expected (512, 4, 4)")
        out.append(pool_features(grid).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 512))


def encode_map(smap: SemanticMap, fx: FeatureExtractor) -> np.ndarray:
    return encode_maps([smap], fx)[0]


def encode_pixels(smap: SemanticMap) -> np.ndarray:
    """Nearest-neighbour downscale of a 256x176 map to 32x22, flattened to 704 raw labels."""
    if smap.shape != PIXEL_SOURCE:
        smap, _ = fit_to_shape(smap, *PIXEL_SOURCE)
    small = smap.labels[nn_indices(PIXEL_SOURCE[0], PIXEL_GRID[0])][:, nn_indices(PIXEL_SOURCE[1], PIXEL_GRID[1])]
    return small.astype(np.float64).ravel()


def canonical_fine(smap: SemanticMap) -> SemanticMap:
    return resize_pad(as_stage3(smap), ENCODE_SIDE)[0]


def canonical_query(smap: SemanticMap) -> SemanticMap:
    return center_crop_resize(as_stage3(smap), ENCODE_SIDE)


def featurize(maps: Sequence[SemanticMap], scheme: str, fx: FeatureExtractor | None = None,
              query: bool = False) -> np.ndarray:
    """Feature matrix for knowledge-base maps (``query=False``) or coarse queries."""
    if scheme == ENCODED:
        if fx is None:
            raise ValueError("the encoded scheme needs a feature extractor")
        canon = canonical_query if query else canonical_fine
        return encode_maps([canon(m) for m in maps], fx)
    if scheme == PIXEL:
        if query:
            return np.stack([encode_pixels(_crop_to_person(as_stage3(m))) for m in maps])
        return np.stack([encode_pixels(as_stage3(m)) for m in maps])
    raise ValueError(f"unknown feature scheme {scheme!r}")


def _crop_to_person(smap: SemanticMap) -> SemanticMap:
    from .semantics import foreground_bbox
    x, y, w, h = foreground_bbox(smap.foreground())
    return SemanticMap(smap.labels[y:y + h, x:x + w], smap.taxonomy)


# -- K-means ------------------------------------------------------------------

@dataclass
class ClusterModel:
    K: int
    centroids: np.ndarray
    inertia: float
    params: dict
    n_iter: int = 0
    history: list = field(default_factory=list)  # per-restart inertia after each assignment

    def __post_init__(self):
        if self.K < 1 or self.centroids.shape[0] != self.K:
            raise ValueError("centroid matrix must have K rows")
        if not np.isfinite(self.centroids).all() or self.inertia < 0:
            raise ValueError("invalid cluster model")


def _sq_dists(X, C):
    # direct differences rather than the expanded quadratic, so ties and zeros are exact
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _lloyd(X, init, tolerance, max_iter):
    C = init.copy()
    trace = []
    prev = None
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(X)), labels].sum())
        if trace and inertia > trace[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"K-means inertia increased: {trace[-1]} -> {inertia}")
        trace.append(inertia)
        if prev is not None and (prev == 0 or (prev - inertia) / prev < tolerance):
            break
        prev = inertia
        newC = C.copy()
        for k in range(len(C)):
            members = labels == k
            if members.any():
                newC[k] = X[members].mean(axis=0)
        empty = [k for k in range(len(C)) if not (labels == k).any()]
        if empty:
            # reseed each empty cluster at the point farthest from its centroid
            far = _sq_dists(X, newC)[np.arange(len(X)), labels]
            for k, i in zip(empty, np.argsort(-far, kind="stable")):
                newC[k] = X[i]
        C = newC
    d = _sq_dists(X, C)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return C, labels, inertia, trace, it


def fit_clusters(features, K: int = 8, tolerance: float = 1e-4, max_iter: int = 1000,
                 n_init: int = 10, seed: int = 0) -> ClusterModel:
    """Best-of-``n_init`` Lloyd K-means; each restart starts from K distinct random points."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be an (N, D) matrix")
    if len(X) < K:
        raise ValueError(f"need at least K={K} points, got {len(X)}")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    history = []
    for _ in range(n_init):
        init = X[rng.choice(len(X), size=K, replace=False)]
        C, labels, inertia, trace, n_iter = _lloyd(X, init, tolerance, max_iter)
        history.append(trace)
        if best is None or inertia < best[2]:
            best = (C, labels, inertia, n_iter)
    C, _, inertia, n_iter = best
    return ClusterModel(K, C, inertia,
                        {"tolerance": tolerance, "max_iter": max_iter, "n_init": n_init, "seed": seed},
                        n_iter, history)


def inertia_of(model: ClusterModel, features) -> float:
    d = _sq_dists(np.asarray(features, np.float64), model.centroids)
    return float(d.min(axis=1).sum())


def assign_cluster(model: ClusterModel, feature) -> int:
    """Nearest centroid by squared Euclidean distance; ties go to the lowest index."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (model.centroids.shape[1],):
        raise ValueError(f"feature has shape {x.shape}, model expects ({model.centroids.shape[1]},)")
    d = ((model.centroids - x) ** 2).sum(axis=1)
    return int(np.argmin(d))


# -- knowledge base -----------------------------------------------------------

@dataclass
class KBEntry:
    id: str
    gender: str
    cluster_id: int
    map_path: str | None = None


@dataclass
class KnowledgeBase:
    entries: list
    features: np.ndarray  # (N, D) float32
    clusters: ClusterModel
    scheme: str
    maps: dict = field(default_factory=dict)  # entry id -> SemanticMap

    def __post_init__(self):
        if len(self.entries) != len(self.features):
            raise ValueError("one feature row per entry")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("entry ids must be unique")

    def map_for(self, entry: KBEntry) -> SemanticMap:
        return self.maps[entry.id]


class EmptyPool(LookupError):
    pass


def build_kb(features, ids: Sequence[str], genders: Sequence[str], scheme: str,
             maps: Sequence[SemanticMap] | None = None, **cluster_kwargs) -> KnowledgeBase:
    feats = np.asarray(features, dtype=np.float32)
    for g in genders:
        if g not in GENDERS:
            raise ValueError(f"gender tag must be one of {GENDERS}, got {g!r}")
    # cluster the stored float32 values so stored entries re-assign consistently
    model = fit_clusters(feats.astype(np.float64), **cluster_kwargs)
    entries = [KBEntry(str(i), g, assign_cluster(model, f), f"maps/{i}.png" if maps is not None else None)
               for i, g, f in zip(ids, genders, feats.astype(np.float64))]
    kb_maps = {str(i): m for i, m in zip(ids, maps)} if maps is not None else {}
    return KnowledgeBase(entries, feats, model, scheme, kb_maps)


def cosine_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    M = np.asarray(matrix, np.float64)
    q = np.asarray(query, np.float64)
    denom = np.linalg.norm(M, axis=1) * np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, M @ q / np.where(denom > 0, denom, 1), 0.0)
    return np.clip(s, -1.0, 1.0)


def retrieve(kb: KnowledgeBase, query_feature, gender: str | None = None, top_k: int = 1):
    """Rank the query's cluster members by cosine similarity (ties by entry id).

    Returns a list of ``(KBEntry, score)`` of length ``min(top_k, pool size)``.
    """
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    q = np.asarray(query_feature, np.float64)
    cluster = assign_cluster(kb.clusters, q)
    pool = [i for i, e in enumerate(kb.entries)
            if e.cluster_id == cluster and (gender is None or e.gender == gender)]
    if not pool:
        raise EmptyPool(
            f"cluster {cluster} has no entries" + (f" tagged {gender!r}" if gender else "")
            + "; retry without the gender filter or rebuild the knowledge base with more samples"
        )
    scores = cosine_scores(kb.features[pool], q)
    # scores equal up to rounding count as ties so that the id decides
    key = np.round(scores, 12)
    order = sorted(range(len(pool)), key=lambda j: (-key[j], kb.entries[pool[j]].id))
    return [(kb.entries[pool[j]], float(scores[j])) for j in order[:top_k]]


# -- ablation -----------------------------------------------------------------

ABLATION_KS = (8, 16, 32, 64)
ABLATION_SPLITS = ("men", "women", "overall")
ABLATION_COLUMNS = tuple(f"top1_{s}" for s in ABLATION_SPLITS) + tuple(f"top5_{s}" for s in ABLATION_SPLITS)


@dataclass
class AblationReport:
    scheme: str
    ks: tuple
    columns: tuple
    grid: np.ndarray  # len(ks) x len(columns), NaN where a split had no usable query
    counts: np.ndarray

    def to_records(self) -> list[dict]:
        return [{"scheme": self.scheme, "K": k,
                 **{c: (None if np.isnan(v) else float(v)) for c, v in zip(self.columns, row)}}
                for k, row in zip(self.ks, self.grid)]

    def format_table(self) -> str:
        head = f"{'scheme=' + self.scheme:<22}" + "".join(f"{c:>14}" for c in self.columns)
        lines = [head]
        for k, row in zip(self.ks, self.grid):
            lines.append(f"{'K = ' + str(k):<22}" + "".join(
                f"{'-':>14}" if np.isnan(v) else f"{v:>14.4f}" for v in row))
        return "\n".join(lines)


def ablation_stats(features, genders: Sequence[str], scheme: str, queries, query_scheme: str,
                   ks=ABLATION_KS, top_n: int = 5, seed: int = 0, **cluster_kwargs) -> AblationReport:
    """Mean cosine of the best and of the top-``top_n`` matches per gender split and K."""
    if scheme != query_scheme:
        raise ValueError(f"queries encoded with {query_scheme!r} but the knowledge base uses {scheme!r}")
    feats = np.asarray(features, np.float32)
    Q = np.asarray(queries, np.float64)
    if Q.ndim != 2 or Q.shape[1] != feats.shape[1]:
        raise ValueError("query dimension does not match the knowledge base features")
    ids = [f"{i:06d}" for i in range(len(feats))]
    grid = np.full((len(ks), 2 * len(ABLATION_SPLITS)), np.nan)
    counts = np.zeros_like(grid, dtype=int)
    for r, K in enumerate(ks):
        kb = build_kb(feats, ids, genders, scheme, K=K, seed=seed, **cluster_kwargs)
        for c, split in enumerate(ABLATION_SPLITS):
            g = None if split == "overall" else split
            top1, topn = [], []
            for q in Q:
                try:
                    hits = retrieve(kb, q, g, top_n)
                except EmptyPool:
                    continue
                top1.append(hits[0][1])
                topn.append(np.mean([s for _, s in hits]))
            if top1:
                grid[r, c], grid[r, c + len(ABLATION_SPLITS)] = np.mean(top1), np.mean(topn)
            counts[r, c] = counts[r, c + len(ABLATION_SPLITS)] = len(top1)
    return AblationReport(scheme, tuple(ks), ABLATION_COLUMNS, grid, counts)


# -- persistence --------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_kb(kb: KnowledgeBase, path) -> None:
    """Write the knowledge base directory; see docs/kb_format.md for the layout."""
    root = Path(path)
    if root.exists():
        shutil.rmtree(root)
    (root / "maps").mkdir(parents=True)
    feats = np.ascontiguousarray(kb.features, dtype="<f4")
    cents = np.ascontiguousarray(kb.clusters.centroids, dtype="<f8")
    (root / "features.f32").write_bytes(feats.tobytes())
    (root / "centroids.f64").write_bytes(cents.tobytes())
    for e in kb.entries:
        if e.map_path is not None:
            save_map(kb.maps[e.id], root / e.map_path)
    manifest = {
        "version": KB_VERSION,
        "feature_scheme": kb.scheme,
        "K": kb.clusters.K,
        "dim": int(feats.shape[1]),
        "n_entries": len(kb.entries),
        "params": kb.clusters.params,
        "inertia": kb.clusters.inertia,
        "n_iter": kb.clusters.n_iter,
        "checksums": {"features.f32": _sha256(root / "features.f32"),
                      "centroids.f64": _sha256(root / "centroids.f64")},
        "entries": [{"id": e.id, "gender": e.gender, "map": e.map_path, "cluster": e.cluster_id}
                    for e in kb.entries],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


class CorruptKnowledgeBase(ValueError):
    pass


def load_kb(path) -> KnowledgeBase:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptKnowledgeBase(f"cannot read {root / 'manifest.json'}: {exc}") from exc
    if manifest.get("version") != KB_VERSION:
        raise CorruptKnowledgeBase(f"unsupported knowledge base version {manifest.get('version')}")
    for name, digest in manifest["checksums"].items():
        if _sha256(root / name) != digest:
            raise CorruptKnowledgeBase(f"checksum mismatch for {name}")
    n, d, K = manifest["n_entries"], manifest["dim"], manifest["K"]
    feats = np.frombuffer((root / "features.f32").read_bytes(), dtype="<f4").reshape(n, d).astype(np.float32)
    cents = np.frombuffer((root / "centroids.f64").read_bytes(), dtype="<f8").reshape(K, d).astype(np.float64)
    model = ClusterModel(K, cents, float(manifest["inertia"]), dict(manifest["params"]),
                         int(manifest.get("n_iter", 0)))
    entries = [KBEntry(r["id"], r["gender"], int(r["cluster"]), r["map"]) for r in manifest["entries"]]
    maps = {e.id: load_map(root / e.map_path, STAGE3) for e in entries if e.map_path is not None}
    return KnowledgeBase(entries, feats, model, manifest["feature_scheme"], maps)
