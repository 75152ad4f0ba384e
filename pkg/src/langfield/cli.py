"""Command-line pipeline driver.

One binary, one stage per subcommand, one JSON config naming every
artifact (see config.py). A typical full run:

    langfield synth          --config fixture.json
    langfield train-ae       --config fixture.json
    langfield encode-targets --config fixture.json
    langfield train-field    --config fixture.json
    langfield segment        --config fixture.json
    langfield localize       --config fixture.json
    langfield eval           --config fixture.json

Stage outputs land under paths.output: ae.laep, targets/, field.lsplat,
render/, relevancy/, segmentation/, localizations.json, metrics.json.
Subcommands that read a trained scene default to output/field.lsplat and
take --scene to point elsewhere.

Exit codes: 0 ok, 2 usage or bad settings, 3 broken or missing data,
4 numerical failure. With fixed seeds every artifact except bench.json
is byte-identical across runs; bench.json carries wall-clock timings.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .autoencoder import encode, train_autoencoder
from .config import PipelineConfig
from .errors import ConfigError, DataFormatError, NumericalError
from .evalmetrics import (
    MetricsReport,
    SceneMetrics,
    benchmark_channels,
    benchmark_query,
    eval_iou,
    eval_localization,
    eval_miou_accuracy,
    load_ground_truth,
    save_ground_truth,
)
from .fixture import (
    fixture_canonical,
    fixture_queries,
    ground_truth_from_labels,
    jittered_table,
    planted_labels,
    region_basis,
)
from .formats import (
    load_autoencoder_params,
    load_bitmap,
    load_canonical,
    load_embedding_table,
    load_feature_image,
    load_label_map,
    load_queries,
    relevancy_png,
    save_autoencoder_params,
    save_bitmap,
    save_canonical,
    save_embedding_table,
    save_feature_image,
    save_label_map,
    save_queries,
)
from .masks import SegmentationMap, assign_embedding_image, validate_pair
from .query import (
    localize as localize_maps,
    ovs_choice,
    relevancy_from_image,
    segment_lerf,
    segment_ovs,
    viz_latent,
)
from .rasterizer import FeatureImage, render_level
from .scene import (
    LEVELS,
    SemanticLevel,
    load_cameras,
    load_scene,
    save_cameras,
    save_scene,
    synth_scene,
)
from .trainer import TrainingView, train_field

N_LEVELS = len(LEVELS)
_LEVEL_BY_KEY = {lv.key: lv for lv in LEVELS}


def slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out(cfg: PipelineConfig, *parts: str) -> Path:
    p = Path(cfg.paths.output).joinpath(*parts)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _need_artifact(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataFormatError(f"{path} not found; run `{hint}` first")
    return path


def _mask_pairs(masks_dir: str) -> list[tuple[str, SemanticLevel]]:
    """(view, level) pairs from {view}_{level}.png names, sorted."""
    pairs = []
    for p in sorted(Path(masks_dir).glob("*.png")):
        view, _, key = p.stem.rpartition("_")
        if not view or key not in _LEVEL_BY_KEY:
            raise DataFormatError(
                f"{p}: label maps must be named <view>_<subpart|part|whole>.png"
            )
        pairs.append((view, _LEVEL_BY_KEY[key]))
    if not pairs:
        raise DataFormatError(f"no label maps under {masks_dir}")
    return pairs


def _load_pair(cfg: PipelineConfig, view: str, level: SemanticLevel):
    table = load_embedding_table(
        Path(cfg.paths.embeddings) / f"{view}_{level.key}.lemb", view, level
    )
    seg = load_label_map(
        Path(cfg.paths.masks) / f"{view}_{level.key}.png", view, level, n_masks=len(table)
    )
    validate_pair(seg, table)
    return seg, table


def _filter_cameras(cameras, views):
    if not views:
        return cameras
    by_id = {c.id: c for c in cameras}
    missing = [v for v in views if v not in by_id]
    if missing:
        raise ConfigError(f"unknown view(s): {', '.join(missing)}")
    return [by_id[v] for v in views]


def _trained_scene(cfg: PipelineConfig, args):
    scene_path = Path(args.scene) if args.scene else _out(cfg, "field.lsplat")
    return load_scene(_need_artifact(scene_path, "train-field"))


def _query_inputs(cfg: PipelineConfig, args):
    """Everything the query-side subcommands share: the trained scene, the
    requested cameras, the query and canonical sets, and the autoencoder."""
    scene = _trained_scene(cfg, args)
    cameras = _filter_cameras(load_cameras(cfg.paths.cameras), args.views)
    queries = load_queries(cfg.paths.queries)
    if not queries:
        raise DataFormatError(f"{cfg.paths.queries} holds no queries")
    canon = load_canonical(cfg.paths.canonical)
    params = load_autoencoder_params(_need_artifact(_out(cfg, "ae.laep"), "train-ae"))
    return scene, cameras, queries, canon, params


def _relevancy_stack(scene, cam, queries, canon, params, cfg):
    """Per-query relevancy maps at all levels, rendering each level once."""
    imgs = {lv: render_level(scene, cam, lv, cfg.raster) for lv in LEVELS}
    return {
        q.label: [
            relevancy_from_image(imgs[lv], params, q, canon, lv, cfg.query) for lv in LEVELS
        ]
        for q in queries
    }


# ------------------------------------------------------------------- stages

def cmd_synth(cfg: PipelineConfig, args) -> int:
    for name in ("scene", "cameras", "masks", "embeddings", "queries",
                 "canonical", "ground_truth"):
        if getattr(cfg.paths, name) is None:
            raise ConfigError(f"paths.{name} must be set to synthesize a fixture")
    spec = cfg.synth
    scene, cameras, region_ids = synth_scene(spec)
    n_regions = spec.n_objects + 1
    basis, anchor = region_basis(cfg.autoencoder.input_dim, n_regions, spec.seed)
    queries = fixture_queries(basis)

    for p in ("scene", "cameras", "queries", "canonical", "ground_truth"):
        Path(getattr(cfg.paths, p)).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.paths.masks).mkdir(parents=True, exist_ok=True)
    Path(cfg.paths.embeddings).mkdir(parents=True, exist_ok=True)

    save_scene(scene, cfg.paths.scene)
    save_cameras(cameras, cfg.paths.cameras)
    save_queries(cfg.paths.queries, queries)
    save_canonical(cfg.paths.canonical, fixture_canonical(basis, anchor))

    grids = {}
    jitter_rng = np.random.default_rng(spec.seed)
    for cam in cameras:
        grids[cam.id] = planted_labels(scene, cam, region_ids, cfg.raster)
        for level in LEVELS:
            seg = SegmentationMap(
                image_id=cam.id, level=level, labels=grids[cam.id], n_masks=n_regions
            )
            seg.validate()
            save_label_map(Path(cfg.paths.masks) / f"{cam.id}_{level.key}.png", seg)
            table = jittered_table(basis, cam.id, level, jitter_rng)
            save_embedding_table(
                Path(cfg.paths.embeddings) / f"{cam.id}_{level.key}.lemb", table
            )

    gt = ground_truth_from_labels("synthetic", grids, queries)
    save_ground_truth(cfg.paths.ground_truth, gt)
    print(
        f"fixture: {len(scene)} gaussians, {len(cameras)} views, "
        f"{spec.n_objects} objects + backdrop"
    )
    return 0


def cmd_validate(cfg: PipelineConfig, args) -> int:
    checked = []
    paths = cfg.paths
    if paths.scene is not None:
        load_scene(paths.scene).validate()
        checked.append("scene")
    if paths.cameras is not None:
        for cam in load_cameras(paths.cameras):
            cam.validate()
        checked.append("cameras")
    if paths.masks is not None:
        pairs = _mask_pairs(paths.masks)
        if paths.embeddings is not None:
            lembs = {p.name for p in Path(paths.embeddings).glob("*.lemb")}
            want = {f"{view}_{level.key}.lemb" for view, level in pairs}
            if lembs != want:
                raise DataFormatError(
                    "label maps and embedding tables do not pair up 1:1: "
                    f"unmatched {sorted(lembs ^ want)}"
                )
            for view, level in pairs:
                seg, table = _load_pair(cfg, view, level)
                seg.validate()
                table.validate()
            checked.append(f"{len(pairs)} mask/embedding pairs")
        else:
            for view, level in pairs:
                load_label_map(
                    Path(paths.masks) / f"{view}_{level.key}.png", view, level
                ).validate()
            checked.append(f"{len(pairs)} label maps")
    if paths.queries is not None:
        for q in load_queries(paths.queries):
            q.validate()
        checked.append("queries")
    if paths.canonical is not None:
        load_canonical(paths.canonical).validate()
        checked.append("canonical")
    if paths.ground_truth is not None and Path(paths.ground_truth).exists():
        load_ground_truth(paths.ground_truth).validate()
        checked.append("ground truth")
    ae = Path(cfg.paths.output) / "ae.laep"
    if ae.exists():
        load_autoencoder_params(ae).validate()
        checked.append("autoencoder params")
    field = Path(cfg.paths.output) / "field.lsplat"
    if field.exists():
        load_scene(field).validate()
        checked.append("trained field")
    print("valid: " + ", ".join(checked))
    return 0


def cmd_train_ae(cfg: PipelineConfig, args) -> int:
    if args.iterations is not None:
        cfg.autoencoder.epochs = args.iterations
    tables = [
        load_embedding_table(p, *_parse_lemb_name(p))
        for p in sorted(Path(cfg.paths.embeddings).glob("*.lemb"))
    ]
    if not tables:
        raise DataFormatError(f"no embedding tables under {cfg.paths.embeddings}")
    params, report = train_autoencoder(tables, cfg.autoencoder)
    save_autoencoder_params(_out(cfg, "ae.laep"), params)
    _write_json(_out(cfg, "ae_report.json"), {
        "totals": report.totals,
        "l1_terms": report.l1_terms,
        "cos_terms": report.cos_terms,
        "final_cosine": report.final_cosine,
    })
    print(
        f"autoencoder {params.input_dim}->{params.latent_dim}: "
        f"loss {report.totals[0]:.5f} -> {report.totals[-1]:.5f}, "
        f"cosine distance {report.final_cosine:.5f}"
    )
    return 0


def _parse_lemb_name(p: Path) -> tuple[str, SemanticLevel]:
    view, _, key = p.stem.rpartition("_")
    if not view or key not in _LEVEL_BY_KEY:
        raise DataFormatError(
            f"{p}: embedding tables must be named <view>_<subpart|part|whole>.lemb"
        )
    return view, _LEVEL_BY_KEY[key]


def cmd_encode_targets(cfg: PipelineConfig, args) -> int:
    params = load_autoencoder_params(_need_artifact(_out(cfg, "ae.laep"), "train-ae"))
    pairs = _mask_pairs(cfg.paths.masks)
    for view, level in pairs:
        seg, table = _load_pair(cfg, view, level)
        emb, valid = assign_embedding_image(seg, table)
        h, w = valid.shape
        target = np.zeros((h, w, params.latent_dim))
        if valid.any():
            target[valid] = encode(params, emb[valid].astype(np.float64))
        save_feature_image(
            _out(cfg, "targets", f"{view}_{level.key}.lfim"),
            FeatureImage(width=w, height=h, channels=params.latent_dim, data=target),
        )
        save_bitmap(_out(cfg, "targets", f"{view}_{level.key}_valid.png"), valid)
    print(f"encoded {len(pairs)} target images into {params.latent_dim} channels")
    return 0


def cmd_train_field(cfg: PipelineConfig, args) -> int:
    if args.iterations is not None:
        cfg.field_train.iterations = args.iterations
    scene = load_scene(cfg.paths.scene)
    views = []
    for cam in load_cameras(cfg.paths.cameras):
        targets, valids = [], []
        for level in LEVELS:
            stem = f"{cam.id}_{level.key}"
            img = load_feature_image(
                _need_artifact(_out(cfg, "targets", f"{stem}.lfim"), "encode-targets")
            )
            targets.append(img.data)
            valids.append(load_bitmap(_out(cfg, "targets", f"{stem}_valid.png")))
        views.append(TrainingView(
            camera=cam, targets=np.stack(targets), valid=np.stack(valids)
        ))
    report = train_field(scene, views, cfg.field_train, cfg.raster)
    save_scene(scene, _out(cfg, "field.lsplat"))
    _out(cfg, "field_report.json").write_text(report.to_json())
    last = report.losses[-1] if len(report.log_iterations) else [float("nan")] * N_LEVELS
    print(
        f"field: {report.iterations} iterations over {len(views)} views, "
        "final losses " + " ".join(f"{lv.key}={x:.4f}" for lv, x in zip(LEVELS, last))
    )
    return 0


def cmd_render(cfg: PipelineConfig, args) -> int:
    scene = _trained_scene(cfg, args)
    cameras = _filter_cameras(load_cameras(cfg.paths.cameras), args.views)
    count = 0
    for cam in cameras:
        for level in LEVELS:
            img = render_level(scene, cam, level, cfg.raster)
            save_feature_image(_out(cfg, "render", f"{cam.id}_{level.key}.lfim"), img)
            count += 1
    print(f"rendered {count} feature images")
    return 0


def cmd_query(cfg: PipelineConfig, args) -> int:
    scene, cameras, queries, canon, params = _query_inputs(cfg, args)
    count = 0
    for cam in cameras:
        maps = _relevancy_stack(scene, cam, queries, canon, params, cfg)
        for label, per_level in maps.items():
            for rmap in per_level:
                stem = f"{cam.id}_{slug(label)}_{rmap.level.key}"
                save_feature_image(
                    _out(cfg, "relevancy", f"{stem}.lfim"),
                    FeatureImage(
                        width=cam.width, height=cam.height, channels=1,
                        data=rmap.scores[..., None],
                    ),
                )
                relevancy_png(rmap.scores).save(_out(cfg, "relevancy", f"{stem}.png"))
                count += 1
    print(f"scored {count} relevancy maps")
    return 0


def cmd_localize(cfg: PipelineConfig, args) -> int:
    scene, cameras, queries, canon, params = _query_inputs(cfg, args)
    entries = []
    for cam in cameras:
        maps = _relevancy_stack(scene, cam, queries, canon, params, cfg)
        for q in queries:
            loc = localize_maps(maps[q.label], cfg.query)
            entries.append({
                "view": cam.id, "query": q.label,
                "x": loc.x, "y": loc.y,
                "level": loc.level.key, "score": loc.score,
            })
    entries.sort(key=lambda e: (e["view"], e["query"]))
    _write_json(_out(cfg, "localizations.json"), {"entries": entries})
    print(f"localized {len(entries)} (view, query) pairs")
    return 0


def cmd_segment(cfg: PipelineConfig, args) -> int:
    scene, cameras, queries, canon, params = _query_inputs(cfg, args)
    legend = {str(i + 1): q.label for i, q in enumerate(queries)}
    for cam in cameras:
        maps = _relevancy_stack(scene, cam, queries, canon, params, cfg)
        best = np.full((cam.height, cam.width), -np.inf)
        combined = np.zeros((cam.height, cam.width), dtype=np.uint16)
        for qi, q in enumerate(queries):
            if args.mode == "lerf":
                mask = segment_lerf(maps[q.label], cfg=cfg.query)
            else:
                mask = segment_ovs(maps[q.label], cfg.query)
            save_bitmap(_out(cfg, "segmentation", f"{cam.id}_{slug(q.label)}.png"), mask)
            # the combined map always follows the raw-threshold rule; per
            # pixel the strongest claim wins, earlier query on exact ties
            chosen = ovs_choice(maps[q.label], cfg.query)
            if chosen is None:
                continue
            claim = (chosen.scores >= cfg.query.ovs_threshold) & (chosen.scores > best)
            combined[claim] = qi + 1
            best[claim] = chosen.scores[claim]
        seg = SegmentationMap(
            image_id=cam.id, level=SemanticLevel.WHOLE,
            labels=combined, n_masks=len(queries),
        )
        save_label_map(_out(cfg, "segmentation", f"{cam.id}_labels.png"), seg)
    _write_json(_out(cfg, "segmentation", "legend.json"), legend)
    print(f"segmented {len(cameras)} views x {len(queries)} queries ({args.mode})")
    return 0


def cmd_eval(cfg: PipelineConfig, args) -> int:
    gt = load_ground_truth(cfg.paths.ground_truth)
    queries = load_queries(cfg.paths.queries)
    loc_path = _need_artifact(_out(cfg, "localizations.json"), "localize")
    try:
        entries = json.loads(loc_path.read_text())["entries"]
        by_pair = {(e["view"], e["query"]): (e["x"], e["y"]) for e in entries}
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataFormatError(f"{loc_path} is not a localization report: {e}") from e
    pred_points, gt_boxes = [], []
    for key in sorted(gt.boxes):
        if key not in by_pair:
            raise DataFormatError(f"no localization for view {key[0]!r} query {key[1]!r}")
        pred_points.append(by_pair[key])
        gt_boxes.append(gt.boxes[key])
    loc_acc = eval_localization(pred_points, gt_boxes)

    pred_masks, gt_masks = [], []
    for view, label in sorted(gt.masks):
        p = _need_artifact(
            _out(cfg, "segmentation", f"{view}_{slug(label)}.png"), "segment"
        )
        pred_masks.append(load_bitmap(p))
        gt_masks.append(gt.masks[(view, label)])
    mean_iou = eval_iou(pred_masks, gt_masks)

    # label maps: ids follow query order, ground truth rebuilt from the masks
    label_of = {q.label: i + 1 for i, q in enumerate(queries)}
    views = sorted({view for view, _ in gt.masks})
    pred_grids, gt_grids = [], []
    for view in views:
        p = _need_artifact(_out(cfg, "segmentation", f"{view}_labels.png"), "segment")
        pred = load_label_map(p, view, SemanticLevel.WHOLE).labels
        grid = np.zeros_like(pred)
        for (v, label), mask in sorted(gt.masks.items()):
            if v == view:
                if label not in label_of:
                    raise DataFormatError(f"ground truth query {label!r} not in query set")
                grid[mask] = label_of[label]
        pred_grids.append(pred)
        gt_grids.append(grid)
    miou, accuracy = eval_miou_accuracy(
        np.concatenate(pred_grids), np.concatenate(gt_grids)
    )

    report = MetricsReport(scenes={
        gt.scene_id: SceneMetrics(
            localization_accuracy=loc_acc, mean_iou=mean_iou,
            miou=miou, accuracy=accuracy,
        )
    })
    report.validate()
    _write_json(_out(cfg, "metrics.json"), json.loads(report.to_json()))
    _out(cfg, "metrics.csv").write_text(report.to_csv())
    print(
        f"{gt.scene_id}: localization {loc_acc:.2f}%  IoU {mean_iou:.2f}%  "
        f"mIoU {miou:.2f}%  accuracy {accuracy:.2f}%"
    )
    return 0


def cmd_viz(cfg: PipelineConfig, args) -> int:
    scene = _trained_scene(cfg, args)
    cameras = _filter_cameras(load_cameras(cfg.paths.cameras), args.views)
    for cam in cameras:
        for level in LEVELS:
            rgb = viz_latent(scene, cam, level, cfg.raster)
            Image.fromarray(rgb).save(_out(cfg, "viz", f"{cam.id}_{level.key}.png"))
    print(f"wrote {len(cameras) * N_LEVELS} latent previews")
    return 0


def cmd_bench(cfg: PipelineConfig, args) -> int:
    scene = _trained_scene(cfg, args)
    cameras = _filter_cameras(load_cameras(cfg.paths.cameras), args.views)
    results = {"threads": os.environ.get("LANGFIELD_THREADS", "1")}
    if not args.channels_only:
        queries = load_queries(cfg.paths.queries)
        canon = load_canonical(cfg.paths.canonical)
        params = load_autoencoder_params(_need_artifact(_out(cfg, "ae.laep"), "train-ae"))
        timing, _ = benchmark_query(
            scene, cameras, params, queries, canon, cfg.query, cfg.raster
        )
        results["query"] = json.loads(timing.to_json())
        print(
            f"query: {timing.per_query_s * 1e3:.1f} ms/query over "
            f"{timing.n_queries} queries"
        )
    if not args.query_only:
        widths = [int(w) for w in args.widths.split(",")]
        times = benchmark_channels(
            scene, cameras[0], widths, repeats=args.repeats, raster=cfg.raster
        )
        results["channels"] = {str(k): v for k, v in times.items()}
        base = times[widths[0]]
        for k in widths[1:]:
            print(f"channels {widths[0]} -> {k}: {times[k] / base:.1f}x slower")
    _write_json(_out(cfg, "bench.json"), results)
    return 0


# ------------------------------------------------------------------ plumbing

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="pipeline config JSON")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config knob, e.g. field.lr=1e-3 (repeatable)",
    )
    common.add_argument("--output", metavar="DIR", help="override paths.output")

    scened = argparse.ArgumentParser(add_help=False)
    scened.add_argument(
        "--scene", metavar="FILE",
        help="scene checkpoint to read (default: <output>/field.lsplat)",
    )
    scened.add_argument(
        "--view", dest="views", action="append", metavar="ID",
        help="restrict to this camera id (repeatable; default: all)",
    )

    parser = argparse.ArgumentParser(
        prog="langfield",
        description="Feature-field splatting pipeline: train, query, evaluate.",
    )
    sub = parser.add_subparsers(dest="cmd", metavar="SUBCOMMAND")

    def add(name, func, help_, parents=(common,), needs=()):
        p = sub.add_parser(name, parents=list(parents), help=help_)
        p.set_defaults(func=func, needs=needs)
        return p

    add("synth", cmd_synth, "generate the synthetic fixture at the configured paths")
    add("validate", cmd_validate, "load and check every configured artifact")
    p = add("train-ae", cmd_train_ae, "fit the embedding autoencoder",
            needs=("embeddings",))
    p.add_argument("--iterations", type=int, help="override autoencoder.epochs")
    add("encode-targets", cmd_encode_targets,
        "encode per-pixel embeddings into latent target images",
        needs=("masks", "embeddings"))
    p = add("train-field", cmd_train_field, "optimize the scene's latent field",
            needs=("scene", "cameras"))
    p.add_argument("--iterations", type=int, help="override field.iterations")
    add("render", cmd_render, "render latent feature images",
        parents=(common, scened), needs=("cameras",))
    add("query", cmd_query, "export relevancy maps for every query",
        parents=(common, scened), needs=("cameras", "queries", "canonical"))
    add("localize", cmd_localize, "report the best pixel per (view, query)",
        parents=(common, scened), needs=("cameras", "queries", "canonical"))
    p = add("segment", cmd_segment, "binary masks and a combined label map per view",
            parents=(common, scened), needs=("cameras", "queries", "canonical"))
    p.add_argument("--mode", choices=("ovs", "lerf"), default="ovs",
                   help="per-query mask rule (default ovs)")
    add("eval", cmd_eval, "score localization and segmentation against annotations",
        needs=("ground_truth", "queries"))
    add("viz", cmd_viz, "color previews of the rendered latents",
        parents=(common, scened), needs=("cameras",))
    p = add("bench", cmd_bench, "time the query path and channel-width scaling",
            parents=(common, scened), needs=("cameras",))
    p.add_argument("--widths", default="3,512",
                   help="comma-separated channel counts (default 3,512)")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats (default 3)")
    only = p.add_mutually_exclusive_group()
    only.add_argument("--query-only", action="store_true")
    only.add_argument("--channels-only", action="store_true")
    return parser


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage or help
        return int(e.code or 0)
    if args.cmd is None:
        parser.print_help()
        return 2
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        for spec in args.overrides:
            cfg.apply_override(spec)
        if args.output:
            cfg.paths.output = args.output
        require = args.needs
        if args.cmd == "validate":
            require = tuple(
                name for name in ("scene", "cameras", "masks", "embeddings",
                                  "queries", "canonical")
                if getattr(cfg.paths, name) is not None
            )
        cfg.validate(require=require)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def main() -> None:
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
