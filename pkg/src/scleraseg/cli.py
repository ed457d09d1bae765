"""``scleraseg`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from . import __version__
from .config import RunConfig, echo_config, resolve_config
from .errors import DataError, NumericalError, UsageError

if TYPE_CHECKING:
    from .dataset import ImageSample
    from .pipeline import Pipeline
    from .training import TrainConfig

# Heavy modules (numba kernels, torch networks) are imported inside the
# commands that use them so that cheap commands such as describe-model start fast.

log = logging.getLogger("scleraseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
STUB_MODES = ("gt-echo", "background")
SENSORS = ("UBIRIS_V2", "MICHE_GS4", "MICHE_IP5", "MICHE_GT2")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# shared helpers

def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in RunConfig.__dataclass_fields__}
    return resolve_config(getattr(args, "config", None), overrides)


def _echo(cfg: RunConfig, where: Path, args) -> None:
    echo_config(cfg, where, args.command, args.argv)


def _load_split_samples(manifest: str, split_path: str | None, which: str,
                        db: str | None) -> tuple[Path, list[ImageSample]]:
    from .dataset import parse_database, read_manifest, read_split

    root, samples = read_manifest(manifest)
    if split_path is not None:
        wanted = set(read_split(split_path).of(which))
        samples = [s for s in samples if s.id in wanted]
    if db:
        tags = parse_database(db)
        samples = [s for s in samples if s.sensor in tags]
    return root, samples


def _db_label(db: str | None, samples: Sequence[ImageSample]) -> str:
    from .dataset import database_label, parse_database

    if db:
        return database_label(parse_database(db))
    return database_label({s.sensor for s in samples}) if samples else ""


def _load_detector(path: str | None):
    from .checkpoint import DETECTOR, load_checkpoint

    if path is None:
        return None
    kind, net, _ = load_checkpoint(path)
    if kind != DETECTOR:
        raise UsageError(f"{path} holds a {kind} checkpoint, not a detector")
    return net


def _segmenter(args):
    """Build the segmenter from ``--segmenter`` or ``--stub``; returns (segmenter, payload)."""
    from .checkpoint import DETECTOR, load_checkpoint
    from .dataset import as_kind
    from .pipeline import NetworkSegmenter, StubSegmenter

    if args.stub:
        if not args.kind:
            raise UsageError("--stub needs --kind")
        return StubSegmenter(args.kind, args.stub), {}
    if not args.segmenter:
        raise UsageError("give --segmenter CHECKPOINT or --stub MODE")
    kind, net, payload = load_checkpoint(args.segmenter)
    if kind == DETECTOR:
        raise UsageError(f"{args.segmenter} is a detector checkpoint")
    if args.kind and as_kind(args.kind).value != kind:
        raise UsageError(f"{args.segmenter} holds a {kind} checkpoint, not the requested {args.kind}")
    return NetworkSegmenter(kind, net), payload


def _pipeline(args, cfg: RunConfig, segmenter) -> Pipeline:
    from .pipeline import Pipeline

    return Pipeline(segmenter, _load_detector(args.detector), cfg.padding, cfg.threshold,
                    cfg.metrics_at, cfg.confidence_threshold)


def _write_eval(out: Path, records, row, args, cfg: RunConfig) -> None:
    from .evaluation import emit_report, write_metrics_csv

    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", records, row.database, row.approach)
    emit_report([row], out / "report.txt", "text")
    emit_report([row], out / "report.csv", "csv")
    _echo(cfg, out, args)
    sys.stdout.write(emit_report([row], None, "text"))


# --------------------------------------------------------------------------
# subcommands

def cmd_ingest(args) -> int:
    from .dataset import Layout, load_dataset, write_manifest

    cfg = _config(args)
    if args.layout:
        layout = Layout.from_file(args.layout)
    else:
        layout = Layout.single(args.sensor, args.pattern, args.mask_suffix, args.mask_dir)
    samples = load_dataset(args.root, layout)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    write_manifest(tmp, samples, args.root)
    tmp.replace(out)
    _echo(cfg, out, args)
    masked = sum(s.mask_path is not None for s in samples)
    print(f"{len(samples)} samples ({masked} with masks) -> {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .dataset import make_splits, parse_database, read_manifest, split_text

    cfg = _config(args)
    if cfg.seed is None:
        raise UsageError("split needs an explicit --seed (or seed = N in the config file)")
    _, samples = read_manifest(args.manifest)
    if args.db:
        tags = parse_database(args.db)
        samples = [s for s in samples if s.sensor in tags]
    split = make_splits(samples, cfg.ratio_tuple, cfg.seed)
    out = Path(args.out)
    out.write_text(split_text(split, samples))
    _echo(cfg, out, args)
    print(f"train {len(split.train)} / validation {len(split.validation)} / "
          f"test {len(split.test)} -> {out}")
    return EXIT_OK


def _train_config(kind: str, cfg: RunConfig, args) -> TrainConfig:
    from .training import TrainConfig

    return TrainConfig(kind, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate, seed=cfg.seed or 0,
                       lambda_l1=cfg.lambda_l1, checkpoint_dir=Path(args.out),
                       select_on=cfg.select_on, width_divisor=cfg.width_divisor,
                       sclera_weight=cfg.sclera_weight, grad_clip=cfg.grad_clip,
                       deterministic=cfg.deterministic, threshold=cfg.threshold,
                       train_db=args.db or "")


def cmd_train_detector(args) -> int:
    from .checkpoint import DETECTOR
    from .detector import DetectorConfig, read_boxes
    from .training import prepare_detection_set, train

    cfg = _config(args)
    boxes = read_boxes(args.boxes)
    root, train_s = _load_split_samples(args.manifest, args.split, "train", args.db)
    _, val_s = _load_split_samples(args.manifest, args.split, "validation", args.db)
    dcfg = DetectorConfig(confidence_threshold=cfg.confidence_threshold,
                          width_divisor=cfg.width_divisor)
    tcfg = _train_config(DETECTOR, cfg, args)
    result = train(tcfg, prepare_detection_set(root, train_s, boxes, dcfg),
                   prepare_detection_set(root, val_s, boxes, dcfg), detector_cfg=dcfg)
    _echo(cfg, tcfg.checkpoint_dir, args)
    print(f"best validation IoU {result.best_metric:.4f} -> {result.checkpoint}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    from .detector import read_boxes
    from .training import prepare_segmentation_set, train

    cfg = _config(args)
    boxes = read_boxes(args.boxes) if args.boxes else None
    root, train_s = _load_split_samples(args.manifest, args.split, "train", args.db)
    _, val_s = _load_split_samples(args.manifest, args.split, "validation", args.db)
    tcfg = _train_config(args.kind, cfg, args)
    result = train(tcfg, prepare_segmentation_set(root, train_s, args.kind, boxes, cfg.padding),
                   prepare_segmentation_set(root, val_s, args.kind, boxes, cfg.padding))
    _echo(cfg, tcfg.checkpoint_dir, args)
    print(f"best validation F-score {result.best_metric:.4f} -> {result.checkpoint}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from .dataset import read_image, write_mask

    cfg = _config(args)
    if args.stub == "gt-echo":
        raise UsageError("the gt-echo stub needs ground truth; use it with evaluate")
    segmenter, _ = _segmenter(args)
    pipe = _pipeline(args, cfg, segmenter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for path in args.images:
        try:
            image = read_image(path)
        except (OSError, ValueError) as exc:
            log.error("cannot read %s: %s", path, exc)
            failed += 1
            continue
        result = pipe.run(image)
        write_mask(out / f"{Path(path).stem}_mask.png", result.mask)
    _echo(cfg, out, args)
    done = len(args.images) - failed
    print(f"{done} of {len(args.images)} images segmented -> {out}")
    if failed:
        log.error("%d image(s) could not be read", failed)
        return EXIT_DATA
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import APPROACH_LABELS, EvaluationError, evaluate

    cfg = _config(args)
    segmenter, _ = _segmenter(args)
    pipe = _pipeline(args, cfg, segmenter)
    root, samples = _load_split_samples(args.manifest, args.split, "test", args.db)
    if not samples:
        raise EvaluationError("no test samples selected")
    approach = APPROACH_LABELS[pipe.kind.value]
    records, row = evaluate(pipe, samples, root, _db_label(args.db, samples), approach,
                            args.overlays, cfg.workers)
    _write_eval(Path(args.out), records, row, args, cfg)
    return EXIT_OK


def cmd_cross_eval(args) -> int:
    from .dataset import DatasetError, database_label, parse_database
    from .evaluation import APPROACH_LABELS, cross_sensor_evaluate

    cfg = _config(args)
    train_db, test_db = parse_database(args.train_db), parse_database(args.test_db)
    if train_db & test_db:
        raise DatasetError(f"train database {database_label(train_db)} overlaps test database "
                           f"{database_label(test_db)}")
    segmenter, payload = _segmenter(args)
    trained_on = payload.get("meta", {}).get("train_db", "")
    if trained_on and parse_database(trained_on) != train_db:
        raise UsageError(f"checkpoint was trained on {trained_on}, not {args.train_db}")
    pipe = _pipeline(args, cfg, segmenter)
    root, samples = _load_split_samples(args.manifest, args.split, "test", None)
    records, row = cross_sensor_evaluate(train_db, test_db, pipe, samples, root,
                                         APPROACH_LABELS[pipe.kind.value], args.overlays)
    _write_eval(Path(args.out), records, row, args, cfg)
    return EXIT_OK


def cmd_overlay(args) -> int:
    from .dataset import read_image, read_mask, write_image
    from .evaluation import pixel_counts, render_error_overlay

    pred, gt = read_mask(args.pred), read_mask(args.gt)
    base = read_image(args.image)
    out = render_error_overlay(pred, gt, base)
    write_image(args.out, out)
    c = pixel_counts(pred, gt)
    print(f"tp {c.tp} fp {c.fp} tn {c.tn} fn {c.fn} -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import aggregate, emit_report, read_metrics_csv

    rows = []
    for path in args.metrics:
        records, database, approach = read_metrics_csv(path)
        rows.append(aggregate(records, database, approach))
    text = emit_report(rows, args.out, args.format)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_describe_model(args) -> int:
    from .architectures import DetectorConfig, detector_spec, segnet_spec

    div = args.width_divisor
    if args.model == "detector":
        spec = detector_spec(DetectorConfig(width_divisor=div))
    elif args.model == "segnet":
        spec = segnet_spec(width_divisor=div)
    elif args.model == "discriminator":
        from .segmenters import build_segmenter, discriminator_spec
        pair = build_segmenter("gan", div)
        spec = discriminator_spec(pair.discriminator)
    else:
        from .segmenters import build_segmenter, model_spec
        net = build_segmenter(args.model, div)
        spec = model_spec(net.generator if args.model == "gan" else net)
    sys.stdout.write(spec.describe())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _add_config_flags(p: argparse.ArgumentParser, *groups: str) -> None:
    p.add_argument("--config", help="flat key = value config file (flags override it)")
    if "infer" in groups:
        p.add_argument("--padding-x", dest="padding_x", type=float)
        p.add_argument("--padding-y", dest="padding_y", type=float)
        p.add_argument("--threshold", type=float, help="sclera probability threshold")
        p.add_argument("--confidence-threshold", dest="confidence_threshold", type=float)
        p.add_argument("--metrics-at", dest="metrics_at", choices=("original", "network"))
        p.add_argument("--workers", type=int)
    if "split" in groups:
        p.add_argument("--seed", type=int)
        p.add_argument("--ratios", help="train,validation,test fractions (default 0.40,0.20,0.40)")
    if "train" in groups:
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
        p.add_argument("--lambda-l1", dest="lambda_l1", type=float)
        p.add_argument("--grad-clip", dest="grad_clip", type=float)
        p.add_argument("--sclera-weight", dest="sclera_weight", type=float)
        p.add_argument("--width-divisor", dest="width_divisor", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--padding-x", dest="padding_x", type=float)
        p.add_argument("--padding-y", dest="padding_y", type=float)
        p.add_argument("--confidence-threshold", dest="confidence_threshold", type=float)
        p.add_argument("--nondeterministic", dest="deterministic", action="store_const",
                       const=False, default=None)


def _add_segmenter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--segmenter", help="segmenter checkpoint")
    p.add_argument("--detector", help="detector checkpoint (omit to segment full images)")
    p.add_argument("--kind", choices=("fcn", "segnet", "gan"))
    p.add_argument("--stub", choices=STUB_MODES,
                   help="replace the segmenter with a test double")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scleraseg", description="Periocular detection and sclera segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", dest="sub_verbose", action="count", default=0,
                        help="more logging (repeat for debug output)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("ingest", help="scan a dataset directory into a manifest")
    p.add_argument("root")
    p.add_argument("--out", required=True)
    p.add_argument("--layout", help="layout descriptor file")
    p.add_argument("--sensor", default="UBIRIS_V2", choices=SENSORS,
                   help="sensor tag when no layout is given")
    p.add_argument("--pattern", default="**/*")
    p.add_argument("--mask-suffix", default="_mask")
    p.add_argument("--mask-dir", default="")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="seeded train/validation/test split of a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--db", help="restrict to a database, e.g. UBIRIS or MICHE")
    _add_config_flags(p, "split")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-detector", help="train the periocular detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--boxes", required=True, help="'id cx cy w h' annotation file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--db")
    _add_config_flags(p, "train")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-seg", help="train a segmenter")
    p.add_argument("--kind", required=True, choices=("fcn", "segnet", "gan"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--boxes", help="crop training images around these boxes")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--db")
    _add_config_flags(p, "train")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("segment", help="write sclera masks for images")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True)
    _add_segmenter_flags(p)
    _add_config_flags(p, "infer")
    p.set_defaults(func=cmd_segment)

    for name, func, helptext in (("evaluate", cmd_evaluate, "metrics on the test split"),
                                 ("cross-eval", cmd_cross_eval, "cross-sensor evaluation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", help="split file (default: every manifest sample)")
        p.add_argument("--out", required=True)
        p.add_argument("--overlays", help="directory for FP/FN overlay images")
        if name == "evaluate":
            p.add_argument("--db")
        else:
            p.add_argument("--train-db", required=True)
            p.add_argument("--test-db", required=True)
        _add_segmenter_flags(p)
        _add_config_flags(p, "infer")
        p.set_defaults(func=func)

    p = sub.add_parser("overlay", help="render FP (green) / FN (red) pixels on an image")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("report", help="mean/std table from per-image metrics CSV files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("describe-model", help="print a network's layer table")
    p.add_argument("model", choices=("detector", "fcn", "segnet", "gan", "discriminator"))
    p.add_argument("--width-divisor", type=int, default=1)
    p.set_defaults(func=cmd_describe_model)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = argv[argv.index(args.command) + 1:] if args.command in argv else []
    verbosity = args.verbose + getattr(args, "sub_verbose", 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(verbosity, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scleraseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"scleraseg: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"scleraseg: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
