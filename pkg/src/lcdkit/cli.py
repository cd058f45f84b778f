"""``lcdkit`` command line.

Exit codes: 0 success, 1 internal error, 2 bad input.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from lcdkit import __version__
from lcdkit.bow import load_vocabulary, save_vocabulary, VocabularyTree
from lcdkit.descriptors import (
    DescriptorFormatError,
    DescriptorSet,
    load_descriptors,
    load_local_features,
    normalize,
    save_descriptors,
    save_local_features,
    synth_descriptors,
    synth_local_features,
)
from lcdkit.geometry import (
    GroundTruth,
    PoseParseError,
    PoseValidationError,
    build_ground_truth,
    cluster_ground_truth,
    figure_eight_trajectory,
    format_poses,
    load_poses,
    straight_trajectory,
)
from lcdkit.index import FlatIndex, IvfIndex, load_index, save_index
from lcdkit.metrics import pr_curve, recall_at_n, similarity_heatmap, write_heatmap
from lcdkit.pipeline import (
    PUBLISHED_KITTI00_FRAMES,
    PUBLISHED_KITTI00_TIMINGS,
    LcdConfig,
    benchmark,
    run_online,
    write_events,
)

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
METRIC_NAMES = {"l2": "euclidean", "cos": "cosine", "euclidean": "euclidean", "cosine": "cosine"}


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return str(value)
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


def write_manifest(path, args: argparse.Namespace, inputs=()) -> None:
    """Write the run manifest (config, input digests, version, timestamp)."""
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    body = {
        "tool": "lcdkit",
        "version": __version__,
        "command": args.command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and Path(p).is_file()},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    Path(path).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {path}")
    return p


def _load_ds(path, do_normalize: bool) -> DescriptorSet:
    _require_file(path)
    ds = load_descriptors(path)
    return normalize(ds) if do_normalize else ds


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _metric(text: str) -> str:
    if text not in METRIC_NAMES:
        raise argparse.ArgumentTypeError(f"metric must be l2 or cos, got {text!r}")
    return METRIC_NAMES[text]


def cmd_gen_gt(args) -> int:
    _require_file(args.poses)
    poses = load_poses(args.poses)
    if not poses:
        raise InputError(f"{args.poses}: no poses")
    gt = build_ground_truth(poses, args.trans, args.rot, args.window)
    Path(args.out).write_text(gt.to_json(), encoding="utf-8")
    write_manifest(_manifest_path(args.out), args, [args.poses])
    print(f"pairs: {gt.pair_count} clusters: {len(cluster_ground_truth(gt))}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.trajectory == "figure8":
        poses = figure_eight_trajectory(args.frames, laps=args.laps, scale=args.scale)
    else:
        poses = straight_trajectory(args.frames, spacing=args.spacing)
    ds = synth_descriptors(poses, args.dim, args.noise, args.seed)
    save_descriptors(ds, args.out)
    if args.poses_out:
        Path(args.poses_out).write_text(format_poses(poses), encoding="utf-8")
    if args.features_out:
        feats = synth_local_features(
            poses, dim_local=args.local_dim, n_landmarks=args.landmarks, seed=args.seed
        )
        save_local_features(feats, args.features_out)
    write_manifest(_manifest_path(args.out), args)
    print(f"frames: {ds.count} dim: {ds.dim}")
    return EXIT_OK


def _build_index(args, ds: DescriptorSet):
    if args.kind == "flat":
        return FlatIndex(metric=args.metric).fit(ds)
    return IvfIndex(
        nlist=args.nlist, nprobe=args.nprobe, metric=args.metric, seed=args.seed, max_iter=args.kmeans_iters
    ).fit(ds)


def cmd_build_index(args) -> int:
    ds = _load_ds(args.descriptors, args.normalize)
    if args.kind == "ivf" and ds.count < args.nlist:
        raise InputError(f"need at least nlist={args.nlist} descriptors, got {ds.count}")
    index = _build_index(args, ds)
    save_index(index, args.out)
    write_manifest(_manifest_path(args.out), args, [args.descriptors])
    print(f"indexed: {index.ntotal} kind: {args.kind}")
    return EXIT_OK


def cmd_query(args) -> int:
    _require_file(args.index)
    index = load_index(args.index, nprobe=args.nprobe)
    ds = _load_ds(args.descriptors, args.normalize)
    frames = range(ds.count) if args.frames is None else args.frames
    lines = []
    for f in frames:
        if not 0 <= f < ds.count:
            raise InputError(f"frame {f} out of range")
        filt = None
        if args.window is not None:
            filt = lambda ids, f=f: np.abs(ids - f) > args.window
        if isinstance(index, IvfIndex):
            res = index.query(ds.data[f], args.k, nprobe=args.nprobe, filter=filt)
        else:
            res = index.query(ds.data[f], args.k, filter=filt)
        lines.append(json.dumps({"query": f, "results": [[i, s] for i, s in res]}))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(_manifest_path(args.out), args, [args.index, args.descriptors])
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _config_from(args, k: int) -> LcdConfig:
    return LcdConfig(
        k=k,
        exclusion_window=args.window,
        metric=args.metric,
        backend=args.backend,
        nprobe=args.nprobe,
        nlist=args.nlist,
        accept_threshold=args.accept,
        group_size=args.group_size,
        max_gap=args.max_gap,
        stride=args.stride,
        normalize=args.normalize,
        seed=args.seed,
        kmeans_iters=args.kmeans_iters,
        branching=args.branching,
        depth=args.depth,
    )


def _load_stream(args):
    _require_file(args.descriptors)
    if args.backend == "bow":
        return load_local_features(args.descriptors)
    return load_descriptors(args.descriptors)


def _vocabulary(args):
    if args.backend == "bow" and getattr(args, "vocab", None):
        _require_file(args.vocab)
        return load_vocabulary(args.vocab)
    return None


def cmd_eval(args) -> int:
    _require_file(args.gt)
    stream = _load_stream(args)
    gt = GroundTruth.from_json(Path(args.gt).read_text(encoding="utf-8"))
    if len(stream) != gt.n_frames:
        raise InputError(f"descriptor count {len(stream)} != ground-truth frame count {gt.n_frames}")
    config = _config_from(args, max(args.k))
    result = run_online(stream, config, ground_truth=gt, vocabulary=_vocabulary(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in args.k:
        curve = pr_curve(result.outcomes, k)
        curve.write_csv(out / f"pr_top{k}.csv")
        best = curve.max_f1()
        try:
            r_at = f"{recall_at_n(result.outcomes, k):.4f}"
        except ValueError:
            r_at = "n/a"
        prec = "n/a" if best.precision is None else f"{best.precision:.4f}"
        print(
            f"K={k} max_f1={best.f1:.4f} precision={prec} recall={best.recall:.4f} "
            f"theta={best.theta!r} recall@{k}={r_at}"
        )
    if args.events_out:
        write_events(result.events, args.events_out)
        n_consistent = sum(e.consistent for e in result.events)
        print(f"events: {len(result.events)} consistent: {n_consistent}")
    timing = result.timing
    (out / "timing.json").write_text(timing.to_json() + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", args, [args.descriptors, args.gt])
    return EXIT_OK


def cmd_heatmap(args) -> int:
    ds = _load_ds(args.descriptors, args.normalize)
    dist = similarity_heatmap(ds)
    write_heatmap(dist, args.out, band=args.band)
    write_manifest(_manifest_path(args.out), args, [args.descriptors])
    print(f"heatmap: {ds.count}x{ds.count} max_distance={dist.max():.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    poses = figure_eight_trajectory(args.frames, laps=2, scale=args.scale)
    if args.descriptors:
        stream = _load_stream(args)
    elif args.backend == "bow":
        stream = synth_local_features(poses, dim_local=args.local_dim, n_landmarks=args.landmarks, seed=args.seed)
    else:
        stream = synth_descriptors(poses, args.dim, args.noise, args.seed)
    config = _config_from(args, args.k[0] if isinstance(args.k, list) else args.k)
    report = benchmark(stream, config, repetitions=args.repetitions, vocabulary=_vocabulary(args))
    summary = report.summary()
    summary["note"] = "encoding measures descriptor ingest or BoW quantization only"
    summary["published_reference_s"] = {
        "frames": PUBLISHED_KITTI00_FRAMES,
        **PUBLISHED_KITTI00_TIMINGS,
    }
    print(
        f"backend={report.backend} frames={report.count} "
        f"encoding={report.total_encoding:.6f}s retrieval={report.total_retrieval:.6f}s "
        f"query={report.total_query:.6f}s keyframes/s={report.keyframes_per_second:.1f} "
        f"real_time={'yes' if report.real_time else 'no'}"
    )
    for name, t in PUBLISHED_KITTI00_TIMINGS.items():
        print(
            f"  published {name}: encoding={t['encoding']:.3f}s retrieval={t['retrieval']:.3f}s "
            f"over {PUBLISHED_KITTI00_FRAMES} frames"
        )
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        write_manifest(_manifest_path(args.out), args, [args.descriptors])
    return EXIT_OK


def cmd_train_vocab(args) -> int:
    _require_file(args.features)
    feats = load_local_features(args.features)
    vocab = VocabularyTree(branching=args.branching, depth=args.depth, seed=args.seed).fit(feats)
    save_vocabulary(vocab, args.out)
    write_manifest(_manifest_path(args.out), args)
    print(f"words: {vocab.n_words_}")
    return EXIT_OK


def _add_backend_opts(p, default_k="1,5,10,25"):
    p.add_argument("--k", type=_int_list, default=_int_list(default_k))
    p.add_argument("--backend", choices=("flat", "ivf", "bow"), default="flat")
    p.add_argument("--metric", type=_metric, default="euclidean")
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--nlist", type=int, default=64)
    p.add_argument("--kmeans-iters", type=int, default=25)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--branching", type=int, default=10)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--vocab", help="pretrained vocabulary file for the bow backend")
    p.add_argument("--accept", type=float, default=-math.inf, help="event score threshold")
    p.add_argument("--group-size", type=int, default=3)
    p.add_argument("--max-gap", type=int, default=2)
    _add_norm(p)


def _add_norm(p):
    p.add_argument("--normalize", dest="normalize", action="store_true", default=True)
    p.add_argument("--no-normalize", dest="normalize", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcdkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lcdkit {__version__}")
    parser.add_argument("--config", help="key=value file; command-line flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        p.set_defaults(func=func)
        return p

    p = command("gen-gt", cmd_gen_gt, "pose file -> ground-truth JSON")
    p.add_argument("poses")
    p.add_argument("--out", required=True)
    p.add_argument("--trans", type=float, default=1.5)
    p.add_argument("--rot", type=float, default=0.3)
    p.add_argument("--window", type=int, default=100)

    p = command("synth", cmd_synth, "synthetic trajectory and descriptors")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--trajectory", choices=("figure8", "straight"), default="figure8")
    p.add_argument("--laps", type=int, default=2)
    p.add_argument("--scale", type=float, default=20.0)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--poses-out")
    p.add_argument("--features-out")
    p.add_argument("--local-dim", type=int, default=32)
    p.add_argument("--landmarks", type=int, default=400)

    p = command("build-index", cmd_build_index, "descriptors -> index file")
    p.add_argument("descriptors")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("flat", "ivf"), default="flat")
    p.add_argument("--metric", type=_metric, default="euclidean")
    p.add_argument("--nlist", type=int, default=64)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--kmeans-iters", type=int, default=100)
    _add_norm(p)

    p = command("query", cmd_query, "search an index with descriptor rows")
    p.add_argument("index")
    p.add_argument("descriptors")
    p.add_argument("--frames", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--window", type=int, help="drop candidates within this many frames of the query")
    p.add_argument("--out")
    _add_norm(p)

    p = command("eval", cmd_eval, "online replay -> fine-grained top-K PR curves")
    p.add_argument("descriptors", help="descriptor file, or local-feature directory for --backend bow")
    p.add_argument("gt")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--events-out", help="JSON-lines loop-closure events")
    _add_backend_opts(p)

    p = command("heatmap", cmd_heatmap, "pairwise distance heatmap (PGM)")
    p.add_argument("descriptors")
    p.add_argument("--out", required=True)
    p.add_argument("--band", type=int, help="mask entries with |i - j| <= band")
    _add_norm(p)

    p = command("bench", cmd_bench, "time the online loop")
    p.add_argument("descriptors", nargs="?")
    p.add_argument("--frames", type=int, default=PUBLISHED_KITTI00_FRAMES)
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--scale", type=float, default=150.0)
    p.add_argument("--local-dim", type=int, default=32)
    p.add_argument("--landmarks", type=int, default=3000)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--out")
    _add_backend_opts(p, default_k="10")

    p = command("train-vocab", cmd_train_vocab, "local features -> vocabulary file")
    p.add_argument("features")
    p.add_argument("--out", required=True)
    p.add_argument("--branching", type=int, default=10)
    p.add_argument("--depth", type=int, default=3)
    return parser


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    _require_file(args.config)
    values = read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    converted = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise InputError(f"{args.config}: unknown key {key!r} for {args.command}")
        if key == "normalize":
            converted[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            converted[key] = action.type(raw)
        else:
            converted[key] = raw
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except (InputError, FileNotFoundError, PoseParseError, PoseValidationError, DescriptorFormatError) as exc:
        print(f"lcdkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, argparse.ArgumentTypeError, json.JSONDecodeError, KeyError) as exc:
        print(f"lcdkit: error: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"lcdkit: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
