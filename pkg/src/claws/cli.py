"""Command-line entry point: ``claws synth|fit-stats|train|eval|score``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, default_seed, parse_ablation
from .dataset import (FRAMES_PER_SEGMENT, DataFormatError, PreprocStats, SynthConfig, VideoFeatures,
                      fit_stats, load_annotations, load_manifest, load_split, normalize,
                      read_feature_file, synth_generate)
from .evaluation import MetricError, evaluate, expand_to_frames
from .model import CheckpointError, load_checkpoint, score_segments
from .trainer import TrainingError, train

log = logging.getLogger("claws")

ERRORS = (ConfigError, DataFormatError, CheckpointError, MetricError, TrainingError,
          ValueError, OSError)

# RunConfig fields that are plain paths or strings
_STR_FIELDS = {"train_manifest", "test_manifest", "annotations", "stats", "checkpoint", "out_dir",
               "cluster_mode"}


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config; flags given here override it")
    p.add_argument("--ablation", action="append", metavar="KEY=on|off",
                   help="toggle rbs, nsm1, nsm2, loss_ts_s or loss_c (repeatable)")
    defaults = RunConfig(seed=0)
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        kw = dict(dest=f.name, default=argparse.SUPPRESS)
        if isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name in _STR_FIELDS:
            p.add_argument(flag, type=str, **kw)
        elif isinstance(default, int):
            p.add_argument(flag, type=int, **kw)
        else:
            p.add_argument(flag, type=float, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="claws", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic train/test dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None, help="default: $CLAWS_SEED, else 7")
    s.add_argument("--train-normal", type=int, default=40)
    s.add_argument("--train-abnormal", type=int, default=40)
    s.add_argument("--test-normal", type=int, default=20)
    s.add_argument("--test-abnormal", type=int, default=20)
    s.add_argument("--min-segments", type=int, default=64)
    s.add_argument("--max-segments", type=int, default=192)
    s.add_argument("--d", type=int, default=16)
    s.add_argument("--anomaly-fraction", type=float, default=0.3)
    s.add_argument("--shift-magnitude", type=float, default=3.0)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit-stats", help="compute the training-set feature mean")
    _add_run_flags(f)
    f.add_argument("--output", required=True, help="where to write the stats JSON")
    f.add_argument("--with-std", action="store_true", help="also store per-dimension std")
    f.set_defaults(func=cmd_fit_stats)

    t = sub.add_parser("train", help="train a model and write checkpoints and metrics")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a test split and write the ROC summary")
    _add_run_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("score", help="print frame scores for one feature file")
    _add_run_flags(c)
    c.add_argument("--features", required=True, help="feature file to score")
    c.add_argument("--num-frames", type=int, default=None,
                   help=f"frame count (default: segments * {FRAMES_PER_SEGMENT})")
    c.set_defaults(func=cmd_score)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    cfg = cfg.updated(overrides, source="flags")
    return cfg.updated(parse_ablation(getattr(args, "ablation", None)), source="--ablation")


@contextlib.contextmanager
def _transaction(out_dir):
    """Remove anything created under ``out_dir`` if the body raises."""
    out = Path(out_dir)
    existed = out.exists()
    before = set(out.rglob("*")) if existed else set()
    try:
        yield out
    except BaseException:
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for path in sorted(set(out.rglob("*")) - before, reverse=True):
                if path.is_dir():
                    shutil.rmtree(path, ignore_errors=True)
                else:
                    path.unlink(missing_ok=True)
        raise


def _load_stats(cfg: RunConfig, near=None) -> PreprocStats | None:
    if cfg.stats is not None:
        return PreprocStats.load(cfg.stats)
    if near is not None and (Path(near).parent / "stats.json").is_file():
        return PreprocStats.load(Path(near).parent / "stats.json")
    log.warning("no stats file given; features are used without mean subtraction")
    return None


def _prepared(videos: list[VideoFeatures], stats: PreprocStats | None) -> list[VideoFeatures]:
    return videos if stats is None else [normalize(v, stats) for v in videos]


def cmd_synth(args) -> int:
    if args.seed is not None:
        seed = args.seed
    else:
        seed = default_seed() if os.environ.get("CLAWS_SEED") else 7
    seg = (args.min_segments, args.max_segments)
    common = dict(segments_per_video=seg, d=args.d, anomaly_fraction=args.anomaly_fraction,
                  shift_magnitude=args.shift_magnitude, seed=seed)
    train_cfg = SynthConfig(args.train_normal, args.train_abnormal, **common)
    test_cfg = SynthConfig(args.test_normal, args.test_abnormal, **common)
    train_cfg.validate()
    test_cfg.validate()
    with _transaction(args.out_dir) as out:
        synth_generate(train_cfg, out, "train")
        synth_generate(test_cfg, out, "test")
    for path in sorted(p for p in out.rglob("*") if p.is_file()):
        print(f"{path.relative_to(out)}\t{path.stat().st_size}")
    return 0


def cmd_fit_stats(args) -> int:
    cfg = resolve_config(args)
    cfg.require_paths("train_manifest")
    videos = load_split(load_manifest(cfg.train_manifest, "train", cfg.segment_len), cfg.d)
    stats = fit_stats(videos, with_std=args.with_std or cfg.normalize_std)
    stats.save(args.output)
    PreprocStats.load(args.output)
    print(f"wrote {args.output} (mean over {stats.computed_over} segments)")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.require_paths("train_manifest")
    if cfg.stats is not None:
        cfg.require_paths("stats")
    if cfg.out_dir is None:
        raise ConfigError("--out-dir is required")
    tcfg = cfg.train_config()
    videos = load_split(load_manifest(cfg.train_manifest, "train", cfg.segment_len), cfg.d)
    with _transaction(cfg.out_dir) as out:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.stats is not None:
            stats = PreprocStats.load(cfg.stats)
        else:
            stats = fit_stats(videos, with_std=cfg.normalize_std)
        stats.save(out / "stats.json")
        (out / "run_config.json").write_text(cfg.to_json())
        result = train(_prepared(videos, stats), tcfg, out)
        _, _, it = load_checkpoint(out / "final.ckpt")
        if it != result.state.iteration:
            raise CheckpointError("final checkpoint failed to validate")
    print(f"wrote {out / 'final.ckpt'} after {result.state.iteration} iterations")
    if result.metrics:
        print(f"last window total loss {result.metrics[-1]['total']:.6g}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    cfg.require_paths("test_manifest", "annotations", "checkpoint")
    if cfg.stats is not None:
        cfg.require_paths("stats")
    if cfg.out_dir is None:
        raise ConfigError("--out-dir is required")
    params, _, _ = load_checkpoint(cfg.checkpoint)
    stats = _load_stats(cfg, near=cfg.checkpoint)
    videos = load_split(load_manifest(cfg.test_manifest, "test", cfg.segment_len), params.dims[0])
    ann = load_annotations(cfg.annotations)
    with _transaction(cfg.out_dir) as out:
        res = evaluate(_prepared(videos, stats), ann, params, cfg.model_config(False),
                       b=cfg.batch_size, p=cfg.segment_len, out_dir=out, per_video=cfg.per_video)
        header = (out / "summary.csv").read_text().splitlines()[0]
        if not header.startswith("auc,"):
            raise MetricError("summary failed to validate")
    line = f"auc={res.roc.auc:.6f} eer={res.roc.eer:.6f}"
    if res.per_video_auc is not None:
        line += f" per_video_auc={res.per_video_auc:.6f}"
    print(line)
    return 0


def cmd_score(args) -> int:
    cfg = resolve_config(args)
    cfg.require_paths("checkpoint")
    if not Path(args.features).is_file():
        raise ConfigError(f"features does not exist: {args.features}")
    params, _, _ = load_checkpoint(cfg.checkpoint)
    stats = _load_stats(cfg, near=cfg.checkpoint)
    seg = read_feature_file(args.features, params.dims[0])
    n = args.num_frames if args.num_frames is not None else seg.shape[0] * cfg.segment_len
    video = _prepared([VideoFeatures(Path(args.features).stem, 0, seg, n)], stats)[0]
    scores = score_segments(video.segments, params, cfg.batch_size, cfg.model_config(False))
    series = expand_to_frames(scores, n, cfg.segment_len, video.video_id)
    out = sys.stdout
    out.write("frame,score\n")
    for i, s in enumerate(series.scores):
        out.write(f"{i},{float(s)!r}\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except ERRORS as e:
        print(f"claws {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
