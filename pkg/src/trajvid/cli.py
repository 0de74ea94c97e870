"""Command-line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.  Every
successful run writes ``<output>.run.json`` describing inputs, config digest
and output digests.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import TrajVidError, ValidationError

DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 6.0
DEFAULT_CONTROL_SCALE = 1.0
KIND_ALIASES = {"mask": "mask", "box": "box", "sparse": "sparse_box"}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _kind(args) -> str:
    return KIND_ALIASES[args.kind]


def _check_k(args) -> None:
    from .errors import InvalidSparsity
    from .trajgeo import MAX_SPARSE_FRAMES
    if not 1 <= args.k <= MAX_SPARSE_FRAMES:
        raise InvalidSparsity(f"--k must be in [1, {MAX_SPARSE_FRAMES}] (sparse boxes use fewer than 10 frames)")


def _resolve(ref: str, root) -> str:
    p = Path(ref)
    return str(p if p.is_absolute() or root is None else Path(root) / p)


def _load_records(manifest, video_root):
    from .datapipe import read_manifest
    from .videoio import load_video
    records = read_manifest(manifest)
    for r in records:
        if r.trajectory is not None:
            r.video = load_video(_resolve(r.video_ref, video_root))
    return records


# -- subcommands ------------------------------------------------------------------


def cmd_render(args) -> list[Path]:
    from .stages import make_condition
    from .trajgeo import load_trajectory
    from .videoio import save_video
    if args.kind == "sparse":
        _check_k(args)
    clip = make_condition(load_trajectory(args.trajectory), _kind(args), args.k)
    return [save_video(clip, args.out)]


def cmd_train(args) -> list[Path]:
    from .stages import StageConfig, train_stage
    doc = json.loads(Path(args.config).read_text())
    if args.override_lambda:
        doc["override_lambda"] = True
    if args.output:
        doc["output"] = args.output
    if args.max_steps is not None:
        doc["max_steps"] = args.max_steps
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = StageConfig.from_json(doc)
    if not cfg.output:
        raise ValidationError("stage config needs an output directory (set 'output' or --output)")
    report = train_stage(cfg, _load_records(args.dataset, args.video_root))
    out = report.write_jsonl(args.report or Path(cfg.output) / "report.jsonl")
    print(f"stage {cfg.stage_id} ({report.label}): {len(report.steps)} logged steps, "
          f"checkpoint {report.checkpoint}")
    return [Path(report.checkpoint), out]


def cmd_pipeline(args) -> list[Path]:
    from .stages import StageConfig, run_pipeline
    cfgs = [StageConfig.from_json(json.loads(Path(p).read_text())) for p in args.configs]
    reports = run_pipeline(cfgs, _load_records(args.dataset, args.video_root), args.workdir)
    for r in reports:
        print(f"stage {r.stage_id} ({r.label}): checkpoint {r.checkpoint}")
    return [Path(r.checkpoint) for r in reports]


def _sampling_kwargs(args) -> dict:
    return dict(n_steps=args.steps, guidance=args.guidance, control_scale=args.control_scale, seed=args.seed)


def _single_inputs(args):
    from PIL import Image
    from .trajgeo import load_trajectory
    from .videoio import load_video
    if not args.trajectory or not (args.image or args.video):
        raise ValidationError("need --trajectory and one of --image/--video (or --manifest)")
    if args.image:
        image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    else:
        image = load_video(args.video)[0]
    return image, load_trajectory(args.trajectory)


def cmd_generate(args) -> list[Path]:
    from .datapipe import _safe_name
    from .model import TrajVideoModel
    from .videoio import save_video
    from .workflow import generate_clip, generate_for_records, latent_segment
    if args.kind == "sparse":
        _check_k(args)
    model = TrajVideoModel.load(args.checkpoint)
    if args.manifest:
        if args.dump_latent_seg:
            raise ValidationError("--dump-latent-seg needs a single --image/--video input")
        records = [r for r in _load_records(args.manifest, args.video_root) if r.status == "kept"]
        clips = generate_for_records(model, records, _kind(args), args.k, **_sampling_kwargs(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for ref, clip in clips.items():
            save_video(clip, out / f"{_safe_name(ref)}.mmt")
        return [out]
    image, ts = _single_inputs(args)
    clip = generate_clip(model, image, ts, _kind(args), args.k, **_sampling_kwargs(args))
    outputs = [save_video(clip, args.out)]
    if args.dump_latent_seg:
        seg = latent_segment(model, image, ts, _kind(args), args.k, **_sampling_kwargs(args))
        outputs.append(save_video(seg, args.dump_latent_seg))
    return outputs


def _curate_clients(args):
    from .clients import cached, clients_from_env
    from .synthetic import replay_clients
    cache_dir = args.cache_dir or os.environ.get("MM_CACHE_DIR")
    if args.clients == "replay":
        if not cache_dir:
            raise ValidationError("replay clients need --cache-dir or MM_CACHE_DIR")
        return replay_clients(cache_dir)
    return cached(clients_from_env(), cache_dir)


def cmd_curate(args) -> list[Path]:
    from concurrent.futures import ThreadPoolExecutor
    from .datapipe import curate, read_caption_manifest, write_manifest
    from .videoio import load_video
    root = args.video_root or Path(args.captions).parent
    rows = read_caption_manifest(args.captions)
    clients = _curate_clients(args)

    def one(row):
        video = load_video(_resolve(row["video_ref"], root))
        return curate(video, row["caption"], clients, video_ref=row["video_ref"])

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            records = list(pool.map(one, rows))
    else:
        records = [one(r) for r in rows]
    out = write_manifest(records, args.out)
    print(f"curated {len(records)} videos -> {out}")
    return [out, out.parent / "trajectories"]


def cmd_filter(args) -> list[Path]:
    from .datapipe import FilterThresholds, filter_record, read_manifest, write_manifest
    th = FilterThresholds(args.min_flow, tuple(args.count_range), tuple(args.area_range), args.min_fg_flow)
    records = [filter_record(r, th) for r in read_manifest(args.manifest)]
    if args.kept_only:
        records = [r for r in records if r.status == "kept"]
    out = write_manifest(records, args.out)
    kept = sum(r.status == "kept" for r in records)
    print(f"kept {kept} of {len(records)} -> {out}")
    return [out, out.parent / "trajectories"]


def cmd_bench_build(args) -> list[Path]:
    from .datapipe import build_benchmark, read_manifest, write_benchmark
    records = [r for r in read_manifest(args.manifest) if r.status == "kept"]
    bench = build_benchmark(records, capacity=args.capacity)
    out = write_benchmark(bench, args.out)
    print(json.dumps(bench.counts()))
    return [out]


def cmd_evaluate(args) -> list[Path]:
    from .errors import ClientError
    from .datapipe import _safe_name, read_benchmark, read_manifest
    from .evalkit import ColorMatchTracker, FrozenFirstFrameTracker, HttpTracker, OracleTracker, evaluate
    from .videoio import load_video
    gt_path = Path(args.gt)
    if gt_path.is_dir():
        gt = [r for recs in read_benchmark(gt_path).values() for r in recs]
    else:
        gt = [r for r in read_manifest(gt_path) if r.status == "kept"]
    videos = {}
    for r in gt:
        if args.gt_as_pred:
            videos[r.video_ref] = load_video(_resolve(r.video_ref, args.video_root))
        else:
            if not args.generated:
                raise ValidationError("need --generated DIR or --gt-as-pred")
            base = Path(args.generated) / _safe_name(r.video_ref)
            mmt = base.with_name(base.name + ".mmt")
            videos[r.video_ref] = load_video(mmt if mmt.exists() else base)
    if args.tracker == "oracle":
        tracker = OracleTracker(gt)
    elif args.tracker == "frozen":
        tracker = FrozenFirstFrameTracker()
    elif args.tracker == "color":
        tracker = ColorMatchTracker()
    else:
        url = os.environ.get("MM_CLIENT_ENDPOINT_TRACKER")
        if not url:
            raise ClientError("MM_CLIENT_ENDPOINT_TRACKER is not set")
        tracker = HttpTracker(url)
    report = evaluate(videos, gt, tracker, workers=args.workers)
    out = report.write(args.out, args.csv)
    ov = report.overall
    print(f"mask_iou={ov.mask_iou} box_iou={ov.box_iou} videos={ov.n_videos} errors={len(report.errors)}")
    return [out] + ([Path(args.csv)] if args.csv else [])


# -- parser ------------------------------------------------------------------------


def _add_sampling(p) -> None:
    p.add_argument("--kind", choices=sorted(KIND_ALIASES), default="mask")
    p.add_argument("--k", type=int, default=6, help="keyframes per track for --kind sparse (<= 9)")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE)
    p.add_argument("--control-scale", type=float, default=DEFAULT_CONTROL_SCALE)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajvid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="trajectory JSON -> condition video")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--kind", choices=sorted(KIND_ALIASES), default="mask")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--out", required=True, help="frame directory, or a .mmt raw tensor file")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True, help="triplet manifest (JSON Lines)")
    p.add_argument("--video-root", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--override-lambda", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pipeline", help="run the three chained stages")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--video-root", default=None)
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("generate", help="animate an image along a trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", default=None)
    p.add_argument("--video", default=None, help="use the first frame of this clip as the image")
    p.add_argument("--trajectory", default=None)
    p.add_argument("--manifest", default=None, help="generate one clip per kept record")
    p.add_argument("--video-root", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-latent-seg", default=None, metavar="PATH",
                   help="also decode the segment head's latent masks to PATH")
    _add_sampling(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("curate", help="annotate captioned videos with trajectories")
    p.add_argument("--captions", required=True, help="JSON Lines {video_ref, caption}")
    p.add_argument("--out", required=True)
    p.add_argument("--video-root", default=None)
    p.add_argument("--clients", choices=["env", "replay"], default="env")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("filter", help="apply motion/count/area filters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-flow", type=float, default=2.0)
    p.add_argument("--min-fg-flow", type=float, default=2.0)
    p.add_argument("--count-range", type=int, nargs=2, default=[1, 3])
    p.add_argument("--area-range", type=float, nargs=2, default=[0.008, 0.83])
    p.add_argument("--kept-only", action="store_true")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("bench-build", help="bucket kept records by object count")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--capacity", type=int, default=100)
    p.set_defaults(func=cmd_bench_build)

    p = sub.add_parser("evaluate", help="Mask_IoU / Box_IoU of generated clips")
    p.add_argument("--gt", required=True, help="triplet manifest or benchmark directory")
    p.add_argument("--generated", default=None)
    p.add_argument("--gt-as-pred", action="store_true")
    p.add_argument("--video-root", default=None)
    p.add_argument("--tracker", choices=["oracle", "frozen", "color", "http"], default="color")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)
    return parser


# -- run manifest ------------------------------------------------------------------


def _digest_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file() and not p.name.endswith(".run.json")):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    elif path.exists():
        h.update(path.read_bytes())
    return h.hexdigest()


_CONFIG_KEYS = ("config", "configs", "trajectory", "captions", "manifest", "dataset")


def _config_digest(args, argv) -> str:
    h = hashlib.sha256(json.dumps(list(argv)).encode())
    for key in _CONFIG_KEYS:
        val = getattr(args, key, None)
        for item in (val if isinstance(val, list) else [val]):
            if item and Path(item).is_file():
                h.update(Path(item).read_bytes())
    return h.hexdigest()


def write_run_manifest(args, argv, outputs: list[Path], started: float) -> Path:
    primary = Path(outputs[0])
    doc = {
        "command": args.command,
        "argv": list(argv),
        "config_digest": _config_digest(args, argv),
        "seed": getattr(args, "seed", None),
        "inputs": {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)},
        "outputs": {str(p): _digest_path(Path(p)) for p in outputs},
        "tool_version": __version__,
        "wall_clock": time.time() - started,
    }
    target = primary.with_name(primary.name + ".run.json")
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    os.replace(tmp, target)
    return target


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        outputs = args.func(args)
        write_run_manifest(args, argv, outputs, started)
        return 0
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (TrajVidError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
