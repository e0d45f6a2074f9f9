"""Command-line entry point: ``personinsert <subcommand> ...``.

Exit status is 0 on success, 2 for usage errors (bad flags, missing paths)
and 3 when a pipeline stage fails. Every subcommand writes a run manifest
holding the command line, the resolved config, its hash, the seed and the
code version; nothing time-dependent is recorded.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .coarse_gen import CoarseGenConfig, infer_coarse, load_coarse, save_coarse, scene_pairs, train_coarse
from .knowledge_base import (
    ABLATION_KS,
    ENCODED,
    PIXEL,
    VGGEncoder,
    ablation_stats,
    build_kb,
    featurize,
    load_kb,
    save_kb,
)
from .pipeline import PipelineError, Exemplar, Scene, diversity_generate, generate_person, write_bundle
from .renderer import (
    ATTENTION_MODES,
    RendererConfig,
    RenderPair,
    canonical_sample,
    load_renderer,
    save_renderer,
    train_renderer,
)
from .semantics import (
    PairRecord,
    SemanticMap,
    get_reduction,
    load_map,
    reduce_labels,
    save_map,
    write_pair_manifest,
)

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 2, 3
LAYOUTS = ("synthetic", "mhp", "deepfashion")
TABLE_ORDER = ("baseline", "hr_only", "lr_only", "full")


class UsageError(Exception):
    pass


# -- manifests -------------------------------------------------------------------

def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(path, command: str, argv, config: dict, seed: int, extra: dict | None = None) -> dict:
    manifest = {"command": command, "argv": list(argv), "config": config, "config_hash": config_hash(config),
                "seed": seed, "code_version": code_version(), **(extra or {})}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def manifest_path_for(out: Path) -> Path:
    return out / "run.json" if out.suffix == "" else out.with_name(out.name + ".run.json")


# -- config flags ----------------------------------------------------------------

def add_config_flags(parser, cls, skip=("seed",)):
    """One flag per config field (``--lambda1``, ``--attention-mode``, ...); unset flags keep file/defaults."""
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        d = f.default
        kw = {"dest": "cfg_" + f.name, "default": None}
        if isinstance(d, bool):
            group.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(d, tuple):
            group.add_argument(flag, nargs="+", type=int, **kw)
        elif d is None:
            group.add_argument(flag, type=int, **kw)
        else:
            group.add_argument(flag, type=type(d), **kw)


def resolve_config(cls, args):
    base = {}
    if args.config:
        base = json.loads(require_path(args.config, "config file").read_text())
    for f in fields(cls):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            base[f.name] = v
    base["seed"] = args.seed
    try:
        return cls.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def require_path(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- prepared data ---------------------------------------------------------------
#
# <data>/scenes.jsonl        one row per scene: id, image, stage-1 person maps
# <data>/scene_pairs.jsonl   one row per held-out person
# <data>/fashion.jsonl       one row per fashion shot: id, identity, gender, image, stage-3 map, split
# <data>/render_pairs.jsonl  ordered same-identity pairs (a, b, split)

def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]


def _save_rgb(img: np.ndarray, path: Path) -> None:
    Image.fromarray(img).save(path, format="PNG")


def _load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def _store_scenes(out: Path, scenes) -> tuple[list, list]:
    """scenes: iterable of (scene_id, image, stage-1 maps)."""
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    rows, pairs = [], []
    for sid, image, maps in scenes:
        _save_rgb(image, out / "scenes" / f"{sid}.png")
        names = []
        for k, m in enumerate(maps):
            names.append(f"scenes/{sid}_p{k}.png")
            save_map(m, out / names[-1])
        rows.append({"scene_id": sid, "image": f"scenes/{sid}.png", "maps": names})
        pairs += [PairRecord(sid, t, 0, {"n_persons": len(maps)}) for t in range(len(maps))
                  if maps[t].foreground().any()]
    _write_jsonl(out / "scenes.jsonl", rows)
    write_pair_manifest(pairs, out / "scene_pairs.jsonl")
    return rows, pairs


def _split_of(identity: str, test_ids: set) -> str:
    return "test" if identity in test_ids else "train"


def _store_fashion(out: Path, samples, test_fraction: float) -> tuple[list, list]:
    """samples: list of (sample_id, identity, gender, image, stage-3 map)."""
    (out / "fashion").mkdir(parents=True, exist_ok=True)
    identities = sorted({s[1] for s in samples})
    n_test = int(round(test_fraction * len(identities))) if len(identities) > 1 else 0
    test_ids = set(identities[len(identities) - n_test:])
    rows = []
    for sid, ident, gender, image, smap in samples:
        _save_rgb(image, out / "fashion" / f"{sid}.png")
        save_map(smap, out / "fashion" / f"{sid}_map.png")
        rows.append({"id": sid, "identity": ident, "gender": gender, "image": f"fashion/{sid}.png",
                     "map": f"fashion/{sid}_map.png", "split": _split_of(ident, test_ids)})
    by_id = {}
    for r in rows:
        by_id.setdefault(r["identity"], []).append(r["id"])
    pairs = [{"a": a, "b": b, "split": _split_of(ident, test_ids)}
             for ident in identities for a in by_id[ident] for b in by_id[ident] if a != b]
    _write_jsonl(out / "fashion.jsonl", rows)
    _write_jsonl(out / "render_pairs.jsonl", pairs)
    return rows, pairs


def prepare_synthetic(out: Path, n_scenes: int, n_identities: int, poses: int, seed: int, test_fraction: float):
    from .synthetic import make_fashion_identity, make_scene
    rng = np.random.default_rng(seed)
    to_s1, to_s3 = get_reduction("mhp->stage1"), get_reduction("deepfashion->stage3")

    def scenes():
        for i in range(n_scenes):
            sc = make_scene(rng, f"scene{i:05d}")
            yield sc.scene_id, sc.image, [reduce_labels(m, to_s1) for m in sc.person_maps]

    scene_rows, scene_pairs_ = _store_scenes(out, scenes())
    samples = []
    for i in range(n_identities):
        for s in make_fashion_identity(rng, f"id{i:05d}", n_poses=poses):
            samples.append((s.sample_id, s.identity, s.gender, s.image, reduce_labels(s.smap, to_s3)))
    fashion_rows, render_pairs = _store_fashion(out, samples, test_fraction)
    return {"scenes": len(scene_rows), "scene_pairs": len(scene_pairs_),
            "fashion_samples": len(fashion_rows), "render_pairs": len(render_pairs)}


MHP_ANNOTATION = re.compile(r"^(?P<image>.+)_(?P<count>\d{2})_(?P<index>\d{2})\.png$")


def prepare_mhp(source: Path, out: Path):
    """LV-MHP-v1 layout: images/<name>.jpg and annotations/<name>_<NN>_<MM>.png (one map per person)."""
    img_dir, ann_dir = source / "images", source / "annotations"
    if not img_dir.is_dir() or not ann_dir.is_dir():
        raise UsageError(f"{source} is not an MHP layout (expected images/ and annotations/)")
    groups = {}
    for p in sorted(ann_dir.glob("*.png")):
        m = MHP_ANNOTATION.match(p.name)
        if m:
            groups.setdefault(m["image"], []).append((int(m["index"]), p))
    table = get_reduction("mhp->stage1")

    def scenes():
        for name in sorted(groups):
            if len(groups[name]) < 2:
                continue  # no context person to condition on
            images = sorted(img_dir.glob(name + ".*"))
            if not images:
                continue
            maps = [reduce_labels(load_map(p, "mhp"), table) for _, p in sorted(groups[name])]
            yield name, _load_rgb(images[0]), maps

    rows, pairs = _store_scenes(out, scenes())
    return {"scenes": len(rows), "scene_pairs": len(pairs)}


def prepare_deepfashion(source: Path, out: Path, test_fraction: float):
    """img/<MEN|WOMEN>/<category>/<identity>/<shot>.jpg with label maps at segm/<same path>.png."""
    img_dir, seg_dir = source / "img", source / "segm"
    if not img_dir.is_dir() or not seg_dir.is_dir():
        raise UsageError(f"{source} is not a DeepFashion layout (expected img/ and segm/)")
    table = get_reduction("deepfashion->stage3")
    samples = []
    for p in sorted(img_dir.rglob("*.jpg")):
        rel = p.relative_to(img_dir)
        if len(rel.parts) != 4 or rel.parts[0] not in ("MEN", "WOMEN"):
            continue
        seg = (seg_dir / rel).with_suffix(".png")
        if not seg.exists():
            continue
        gender = rel.parts[0].lower()
        ident = "_".join(rel.parts[:3])
        sid = "_".join(rel.with_suffix("").parts)
        samples.append((sid, ident, gender, _load_rgb(p), reduce_labels(load_map(seg, "deepfashion"), table)))
    rows, pairs = _store_fashion(out, samples, test_fraction)
    return {"fashion_samples": len(rows), "render_pairs": len(pairs)}


def load_scene_maps(data: Path) -> list[tuple[str, np.ndarray, list]]:
    rows = _read_jsonl(require_path(data / "scenes.jsonl", "prepared scenes"))
    return [(r["scene_id"], data / r["image"], [load_map(data / m, "stage1") for m in r["maps"]]) for r in rows]


def load_fashion(data: Path) -> list[dict]:
    return _read_jsonl(require_path(data / "fashion.jsonl", "prepared fashion samples"))


def load_render_pairs(data: Path, size: int, split: str | None, limit: int | None = None) -> list[RenderPair]:
    rows = _read_jsonl(require_path(data / "render_pairs.jsonl", "prepared render pairs"))
    if split:
        rows = [r for r in rows if r["split"] == split]
    if limit:
        rows = rows[:limit]
    info = {r["id"]: r for r in load_fashion(data)}
    cache = {}

    def sample(sid):
        if sid not in cache:
            r = info[sid]
            cache[sid] = canonical_sample(_load_rgb(data / r["image"]), load_map(data / r["map"], "stage3"), size)
        return cache[sid]

    return [RenderPair(*sample(r["a"]), *sample(r["b"])) for r in rows]


# -- subcommands -----------------------------------------------------------------

def cmd_prepare_data(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.layout == "synthetic":
        counts = prepare_synthetic(out, args.n_scenes, args.n_identities, args.poses, args.seed, args.test_fraction)
    else:
        if not args.source:
            raise UsageError(f"--source is required for the {args.layout} layout")
        source = require_path(args.source, "dataset directory")
        counts = prepare_mhp(source, out) if args.layout == "mhp" else \
            prepare_deepfashion(source, out, args.test_fraction)
    config = {"layout": args.layout, "source": args.source, "n_scenes": args.n_scenes,
              "n_identities": args.n_identities, "poses": args.poses, "test_fraction": args.test_fraction}
    write_run_manifest(out / f"run_prepare_{args.layout}.json", "prepare-data", argv, config, args.seed,
                       {"counts": counts})
    for k, v in counts.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_train_coarse(args, argv) -> int:
    config = resolve_config(CoarseGenConfig, args)
    data = require_path(args.data, "data directory")
    pairs = []
    for _, _, maps in load_scene_maps(data):
        if len(maps) >= 2:
            pairs += scene_pairs(maps, config.canvas_side)
    print(f"training coarse generator on {len(pairs)} pairs")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model = train_coarse(pairs, config, log_path=out.with_name(out.name + ".log.jsonl"))
    save_coarse(model, out)
    last = model.log[-1]
    print(f"step {last['step']}: objective {last['objective']:.4f}, D {last['D']:.4f}")
    write_run_manifest(manifest_path_for(out), "train-coarse", argv, asdict(config), config.seed,
                       {"data": str(data), "n_pairs": len(pairs), "checkpoint": {"path": str(out), "sha256": file_digest(out)}})
    return EXIT_OK


def _encoder_for(scheme: str):
    return VGGEncoder() if scheme == ENCODED else None


def cmd_build_kb(args, argv) -> int:
    data = require_path(args.data, "data directory")
    rows = load_fashion(data)
    if args.split:
        rows = [r for r in rows if r["split"] == args.split]
    maps = [load_map(data / r["map"], "stage3") for r in rows]
    feats = featurize(maps, args.scheme, _encoder_for(args.scheme))
    cluster = {"K": args.K, "tolerance": args.tolerance, "max_iter": args.max_iter, "n_init": args.n_init,
               "seed": args.seed}
    kb = build_kb(feats, [r["id"] for r in rows], [r["gender"] for r in rows], args.scheme, maps=maps, **cluster)
    out = Path(args.out)
    save_kb(kb, out)
    sizes = np.bincount([e.cluster_id for e in kb.entries], minlength=args.K)
    print(f"knowledge base: {len(kb.entries)} entries, scheme {args.scheme}, K={args.K}, cluster sizes {sizes.tolist()}")
    write_run_manifest(out / "run.json", "build-kb", argv, {"scheme": args.scheme, "split": args.split, **cluster},
                       args.seed, {"data": str(data)})
    return EXIT_OK


def cmd_train_renderer(args, argv) -> int:
    config = resolve_config(RendererConfig, args)
    data = require_path(args.data, "data directory")
    pairs = load_render_pairs(data, config.image_size, "train", args.limit_pairs)
    print(f"training renderer ({config.attention_mode}) on {len(pairs)} pairs for {config.steps} steps")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle = train_renderer(pairs, config, log_path=out.with_name(out.name + ".log.jsonl"))
    save_renderer(bundle, out)
    last = bundle.log[-1]
    print(f"step {last['step']}: total {last['total']:.4f}, D {last['D']:.4f}")
    write_run_manifest(manifest_path_for(out), "train-renderer", argv, asdict(config), config.seed,
                       {"data": str(data), "n_pairs": len(pairs),
                        "checkpoint": {"path": str(out), "sha256": file_digest(out)}})
    return EXIT_OK


def _scene_from_args(args) -> Scene:
    if args.scene_id:
        data = require_path(args.data, "data directory") if args.data else None
        if data is None:
            raise UsageError("--scene-id needs --data")
        for sid, image_path, maps in load_scene_maps(data):
            if sid == args.scene_id:
                return Scene(_load_rgb(image_path), maps, {"scene_id": sid})
        raise UsageError(f"scene {args.scene_id!r} not found in {data}")
    if not args.scene_image or not args.person_map:
        raise UsageError("give --scene-id with --data, or --scene-image with one --person-map per person")
    image = _load_rgb(require_path(args.scene_image, "scene image"))
    maps = [load_map(require_path(p, "person map"), args.map_taxonomy) for p in args.person_map]
    if args.map_taxonomy != "stage1":
        maps = [reduce_labels(m, get_reduction(f"{args.map_taxonomy}->stage1")) for m in maps]
    return Scene(image, maps, {"scene_image": str(args.scene_image)})


def _exemplar_from_args(args, size: int) -> Exemplar:
    if args.exemplar_id:
        if not args.data:
            raise UsageError("--exemplar-id needs --data")
        data = require_path(args.data, "data directory")
        rows = {r["id"]: r for r in load_fashion(data)}
        if args.exemplar_id not in rows:
            raise UsageError(f"exemplar {args.exemplar_id!r} not found in {data}")
        r = rows[args.exemplar_id]
        image, smap, gender = _load_rgb(data / r["image"]), load_map(data / r["map"], "stage3"), r["gender"]
        gender = args.gender or gender
    else:
        if not args.exemplar_image or not args.exemplar_map or not args.gender:
            raise UsageError("give --exemplar-id with --data, or --exemplar-image, --exemplar-map and --gender")
        image = _load_rgb(require_path(args.exemplar_image, "exemplar image"))
        smap = load_map(require_path(args.exemplar_map, "exemplar map"), args.exemplar_taxonomy)
        if args.exemplar_taxonomy != "stage3":
            smap = reduce_labels(smap, get_reduction(f"{args.exemplar_taxonomy}->stage3"))
        gender = args.gender
    return Exemplar.from_raw(image, smap, gender, size)


def cmd_generate(args, argv) -> int:
    coarse = load_coarse(require_path(args.coarse, "coarse checkpoint"))
    kb = load_kb(require_path(args.kb, "knowledge base"))
    renderer = load_renderer(require_path(args.renderer, "renderer checkpoint"))
    scene = _scene_from_args(args)
    exemplar = _exemplar_from_args(args, renderer.config.image_size)
    encoder = _encoder_for(kb.scheme)
    out = Path(args.out)
    inputs = {"coarse": file_digest(args.coarse), "kb": file_digest(Path(args.kb) / "manifest.json"),
              "renderer": file_digest(args.renderer)}
    if args.diversity:
        results = diversity_generate(scene, exemplar, kb, coarse, renderer, args.diversity, encoder, args.seed)
        for r in results:
            write_bundle(r, out / f"rank_{r.top_index:02d}", {"inputs": inputs})
        print(f"wrote {len(results)} bundles sharing one coarse map to {out}")
    else:
        r = generate_person(scene, exemplar, kb, coarse, renderer, args.top_index, encoder, args.seed)
        write_bundle(r, out, {"inputs": inputs})
        print(f"inserted person from knowledge-base entry {r.candidate_ids[-1]} "
              f"(rank {r.top_index + 1}, cosine {r.retrieval_scores[-1]:.4f}) into {out / 'scene.png'}")
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    write_run_manifest(out / "run.json", "generate", argv, config, args.seed, {"inputs": inputs})
    return EXIT_OK


def _clustering_queries(args, data: Path) -> list[SemanticMap]:
    """Coarse maps for every held-out person: predicted when a coarse model is given, else ground truth."""
    model = load_coarse(require_path(args.coarse, "coarse checkpoint")) if args.coarse else None
    side = model.config.canvas_side if model else args.canvas_side
    queries = []
    for _, _, maps in load_scene_maps(data):
        if len(maps) < 2:
            continue
        for ctx, tgt in scene_pairs(maps, side):
            q = infer_coarse(model, ctx) if model else tgt
            if q.foreground().any():
                queries.append(q)
    return queries


def cmd_ablate(args, argv) -> int:
    data = require_path(args.data, "data directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"data": str(data)}
    if args.kind == "clustering":
        rows = load_fashion(data)
        maps = [load_map(data / r["map"], "stage3") for r in rows]
        genders = [r["gender"] for r in rows]
        queries = _clustering_queries(args, data)
        print(f"{len(maps)} knowledge-base maps, {len(queries)} queries")
        tables, records = [], []
        for scheme in args.schemes:
            fx = _encoder_for(scheme)
            rep = ablation_stats(featurize(maps, scheme, fx), genders, scheme, featurize(queries, scheme, fx, query=True),
                                 scheme, ks=tuple(args.ks), top_n=args.top_n, seed=args.seed)
            tables.append(rep.format_table())
            records += rep.to_records()
        text = "\n\n".join(tables) + "\n"
        (out / "clustering.txt").write_text(text)
        _write_jsonl(out / "clustering.jsonl", records)
        extra["coarse"] = {"path": args.coarse, "sha256": file_digest(args.coarse)} if args.coarse else None
        config = {"kind": "clustering", "schemes": args.schemes, "ks": args.ks, "top_n": args.top_n,
                  "canvas_side": args.canvas_side}
    else:
        bundles, checkpoints = _renderers_by_mode(args.renderer)
        size = {b.config.image_size for b in bundles.values()}
        if len(size) != 1:
            raise UsageError("all renderer checkpoints must share one image size")
        pairs = load_render_pairs(data, size.pop(), "test", args.limit)
        from .metrics_eval import default_extractors, evaluate_renderer
        rep = evaluate_renderer(pairs, bundles, default_extractors())
        text = rep.format_table() + "\n"
        (out / "attention.txt").write_text(text)
        (out / "attention.jsonl").write_text(rep.to_jsonl())
        extra["checkpoints"] = checkpoints
        config = {"kind": "attention", "modes": list(bundles), "limit": args.limit, "n_pairs": len(pairs)}
    print(text, end="")
    write_run_manifest(out / "run.json", "ablate", argv, config, args.seed, extra)
    return EXIT_OK


def _renderers_by_mode(specs) -> tuple[dict, dict]:
    """Parse MODE=PATH entries into bundles in table order."""
    if not specs:
        raise UsageError("give at least one --renderer MODE=PATH")
    paths = {}
    for spec in specs:
        mode, sep, path = spec.partition("=")
        if not sep or mode not in ATTENTION_MODES:
            raise UsageError(f"--renderer expects MODE=PATH with MODE in {ATTENTION_MODES}, got {spec!r}")
        if mode in paths:
            raise UsageError(f"mode {mode} given twice")
        paths[mode] = require_path(path, "renderer checkpoint")
    bundles, checkpoints = {}, {}
    for mode in TABLE_ORDER:
        if mode in paths:
            b = load_renderer(paths[mode])
            if b.config.attention_mode != mode:
                raise UsageError(f"{paths[mode]} holds a {b.config.attention_mode} renderer, not {mode}")
            bundles[mode] = b
            checkpoints[mode] = {"path": str(paths[mode]), "sha256": file_digest(paths[mode])}
    return bundles, checkpoints


def cmd_evaluate(args, argv) -> int:
    from .metrics_eval import default_extractors, evaluate_renderer
    data = require_path(args.data, "data directory")
    loaded = [(path, load_renderer(require_path(path, "renderer checkpoint"))) for path in args.renderer]
    modes = [b.config.attention_mode for _, b in loaded]
    by_mode = len(set(modes)) == len(modes)  # otherwise rows are named after the files
    bundles, checkpoints = {}, {}
    for path, b in loaded:
        label = b.config.attention_mode if by_mode else Path(path).stem
        bundles[label] = b
        checkpoints[label] = {"path": str(path), "sha256": file_digest(path)}
    size = {b.config.image_size for b in bundles.values()}
    if len(size) != 1:
        raise UsageError("all renderer checkpoints must share one image size")
    pairs = load_render_pairs(data, size.pop(), args.split, args.limit)
    rep = evaluate_renderer(pairs, bundles, default_extractors())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(rep.format_table() + "\n")
    (out / "metrics.jsonl").write_text(rep.to_jsonl())
    print(rep.format_table())
    write_run_manifest(out / "run.json", "evaluate", argv, {"split": args.split, "limit": args.limit,
                       "n_pairs": len(pairs)}, args.seed, {"data": str(data), "checkpoints": checkpoints})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="personinsert", description="Insert a new person into a scene image.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = command("prepare-data", cmd_prepare_data, "Reduce label maps and write pair manifests.")
    p.add_argument("--layout", choices=LAYOUTS, required=True)
    p.add_argument("--source", help="dataset root (mhp and deepfashion layouts)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=100)
    p.add_argument("--n-identities", type=int, default=60)
    p.add_argument("--poses", type=int, default=2)
    p.add_argument("--test-fraction", type=float, default=0.1)

    p = command("train-coarse", cmd_train_coarse, "Train the coarse semantic-map generator.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON file of config fields")
    add_config_flags(p, CoarseGenConfig)

    p = command("build-kb", cmd_build_kb, "Encode and cluster fine semantic maps into a knowledge base.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="knowledge-base directory")
    p.add_argument("--scheme", choices=(ENCODED, PIXEL), default=ENCODED)
    p.add_argument("--split", choices=("train", "test"), default=None, help="restrict to one split (default: all)")
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--n-init", type=int, default=10)

    p = command("train-renderer", cmd_train_renderer, "Train the appearance renderer on same-person pairs.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON file of config fields")
    p.add_argument("--limit-pairs", type=int, default=None)
    add_config_flags(p, RendererConfig)

    p = command("generate", cmd_generate, "Insert a person into a scene.")
    p.add_argument("--coarse", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--renderer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="prepared data directory for --scene-id / --exemplar-id")
    p.add_argument("--scene-id")
    p.add_argument("--scene-image")
    p.add_argument("--person-map", action="append", help="label map of one person in the scene (repeatable)")
    p.add_argument("--map-taxonomy", choices=("stage1", "mhp"), default="stage1")
    p.add_argument("--exemplar-id")
    p.add_argument("--exemplar-image")
    p.add_argument("--exemplar-map")
    p.add_argument("--exemplar-taxonomy", choices=("stage3", "deepfashion"), default="stage3")
    p.add_argument("--gender", choices=("women", "men"))
    g = p.add_mutually_exclusive_group()
    g.add_argument("--top-index", type=int, default=0, help="0-based retrieval rank to render")
    g.add_argument("--diversity", type=int, default=None, help="render the top K retrievals")

    p = command("ablate", cmd_ablate, "Run the clustering or attention ablation.")
    p.add_argument("kind", choices=("clustering", "attention"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schemes", nargs="+", choices=(ENCODED, PIXEL), default=[ENCODED, PIXEL])
    p.add_argument("--ks", nargs="+", type=int, default=list(ABLATION_KS))
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--coarse", help="coarse checkpoint; queries are its predictions instead of ground truth")
    p.add_argument("--canvas-side", type=int, default=368)
    p.add_argument("--renderer", action="append", help="MODE=PATH, one per attention mode")
    p.add_argument("--limit", type=int, default=None, help="cap on test pairs")

    p = command("evaluate", cmd_evaluate, "Score renderer checkpoints on held-out pairs.")
    p.add_argument("--data", required=True)
    p.add_argument("--renderer", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=None)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"personinsert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"personinsert {args.command}: {exc.category} failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, RuntimeError, LookupError, OSError) as exc:
        print(f"personinsert {args.command}: stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
