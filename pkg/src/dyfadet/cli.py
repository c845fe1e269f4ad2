"""Command line: synth, train, infer, eval, gradcheck, dump-diagnostics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dyfadet import diagnostics, io
from dyfadet.config import load_config
from dyfadet.errors import DyfadetError
from dyfadet.evaluation import DEFAULT_THRESHOLDS, map_report
from dyfadet.gradsuite import TOLERANCE, run_suite
from dyfadet.synth import annotations_json, split, synth_dataset, videos_from_files
from dyfadet.train import infer, load_model, save_result, train

log = logging.getLogger("dyfadet")


def _videos(args, require_annotations: bool = False):
    if args.features is None:
        raise DyfadetError("--features is required")
    features = io.read_feature_dir(args.features)
    if not features:
        raise DyfadetError(f"no .dft files in {args.features}")
    annotations = None
    if args.annotations is not None:
        annotations = io.load_annotations(args.annotations)
        features = {k: v for k, v in features.items() if k in annotations}
    elif require_annotations:
        raise DyfadetError("--annotations is required")
    return videos_from_files(features, annotations)


def cmd_synth(args) -> int:
    out = Path(args.out)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    videos = synth_dataset(seed=args.seed, num_videos=args.num_videos, length=args.length,
                           num_classes=args.num_classes, noise_level=args.noise)
    for v in videos:
        io.write_features(feat_dir / f"{v.video_id}.dft", v.features)
    train_v, test_v = split(videos, args.num_train)
    io.save_json(out / "train.json", annotations_json(train_v))
    io.save_json(out / "test.json", annotations_json(test_v))
    log.info("wrote %d videos to %s", len(videos), out)
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    videos = _videos(args, require_annotations=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, videos, dump_dir=out.parent)
    save_result(out, result, train_cfg)
    io.save_json(out.with_suffix(".log.json"), {"seconds": result.seconds, "epochs": result.history})
    log.info("trained %d epochs in %.1fs -> %s", train_cfg.epochs, result.seconds, out)
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    dets = infer(model, _videos(args))
    io.save_json(args.out, io.detections_to_json(dets))
    log.info("%d detections -> %s", len(dets), args.out)
    return 0


def cmd_eval(args) -> int:
    dets = io.load_detections(args.detections)
    gts = io.ground_truth_segments(io.load_annotations(args.annotations))
    report = map_report(dets, gts, args.thresholds)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed or 0)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<12} max rel err {r.max_rel_error:.3e}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"{len(failed)} check(s) above {TOLERANCE:g}: {', '.join(failed)}")
        return 1
    return 0


def cmd_dump(args) -> int:
    model = load_model(args.checkpoint)
    data = diagnostics.dump(model, _videos(args), include_matrices=not args.summary_only)
    Path(args.out).write_text(json.dumps(data) + "\n")
    log.info("diagnostics for %d videos -> %s", len(data), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyfadet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        if "config" in flags:
            p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
        if "seed" in flags:
            p.add_argument("--seed", type=int, default=None)
        if "features" in flags:
            p.add_argument("--features", help="directory of .dft feature files")
        if "annotations" in flags:
            p.add_argument("--annotations", help="annotation JSON")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint", required=True)
        if "out" in flags:
            p.add_argument("--out", required=True)
        return p

    p = common(sub.add_parser("synth", help="write the synthetic dataset"), "out")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--num-videos", type=int, default=40)
    p.add_argument("--num-train", type=int, default=32)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a detector"),
               "config", "seed", "features", "annotations", "out")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("infer", help="detections JSON from a checkpoint"),
               "checkpoint", "features", "annotations", "out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mAP report for a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), "seed")
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("dump-diagnostics", help="gate values and similarity matrices as JSON"),
               "checkpoint", "features", "annotations", "out")
    p.add_argument("--summary-only", action="store_true", help="omit the T x T matrices")
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DyfadetError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
