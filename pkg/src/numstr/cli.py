"""Command-line entry point: synth, anchors, train, predict, eval, context-exp."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .anchors import format_anchors, kmeans_anchors, parse_anchors
from .core import ConfigError, ConsistencyError, FormatError, TrainingError
from .data import SynthConfig, generate_dataset, load_dataset, load_idx, open_maybe_gzip, read_pgm, resolve_dataset_dir, save_splits, write_pgm
from .detector import DEFAULT_SCALES, LossWeights, TrainConfig, load_model, save_model, train
from .evaluation import evaluate
from .experiment import box_shapes
from .inference import DEFAULT_CONF, predict_string
from .net import SgdConfig

log = logging.getLogger("numstr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pair(text: str, sep: str, conv=int):
    parts = text.split(sep)
    return tuple(conv(p) for p in parts)


def _scales(text: str):
    return tuple(_pair(s.strip(), "x") for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="numstr", description="Handwritten numeral-string recognition by digit detection.")
    p.add_argument("--config", help="key=value file; flags override it")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize train/val/test string datasets")
    s.add_argument("--digits-images", required=True)
    s.add_argument("--digits-labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--min-len", type=int, default=2)
    s.add_argument("--max-len", type=int, default=6)
    s.add_argument("--gap-min", type=int, default=-6)
    s.add_argument("--gap-max", type=int, default=12)
    s.add_argument("--border", type=int, default=5)
    s.add_argument("--jitter", type=float, default=0.15)
    s.add_argument("--split", default="0.7,0.15,0.15", help="train,val,test fractions")
    s.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("anchors", help="cluster ground-truth boxes into anchors")
    a.add_argument("--data", required=True)
    a.add_argument("--k", type=int, default=3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--frame", choices=("network", "native"), default="network", help="cluster boxes in letterboxed network pixels or source pixels")
    a.add_argument("--out", help="write rows here instead of stdout")

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--anchors", required=True)
    t.add_argument("--out", required=True)
    _train_flags(t)

    pr = sub.add_parser("predict", help="read digit strings from PGM images")
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True, nargs="+")
    pr.add_argument("--overlay", help="write a PGM with the detected boxes drawn (single image only)")
    pr.add_argument("--conf", type=float, default=DEFAULT_CONF)
    pr.add_argument("--nms", type=float, default=0.45)

    e = sub.add_parser("eval", help="per-length accuracy with classification/detection error split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--conf", type=float, default=DEFAULT_CONF)
    e.add_argument("--nms", type=float, default=0.45)
    e.add_argument("--tsv", help="also write the report as TSV here")

    c = sub.add_parser("context-exp", help="isolated-digit vs string training, both tested on strings")
    c.add_argument("--isolated", required=True, help="split root of an isolated-digit dataset")
    c.add_argument("--strings", required=True, help="split root of a string dataset")
    c.add_argument("--out", help="directory for the two checkpoints and reports")
    c.add_argument("--k", type=int, default=3)
    _train_flags(c)
    return p


def _train_flags(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--final-lr", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--multi-scale-every", type=int, default=10)
    p.add_argument("--scales", default=",".join(f"{h}x{w}" for h, w in DEFAULT_SCALES))
    p.add_argument("--conf", type=float, default=DEFAULT_CONF)
    p.add_argument("--nms", type=float, default=0.45)


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def train_config(args) -> TrainConfig:
    try:
        return TrainConfig(
            sgd=SgdConfig(args.lr, args.final_lr, args.momentum, args.weight_decay, args.batch_size),
            epochs_max=args.epochs,
            patience=args.patience,
            multi_scale_every=args.multi_scale_every,
            scale_choices=_scales(args.scales),
            seed=args.seed,
            weights=LossWeights(),
            conf_threshold=args.conf,
            nms_iou=args.nms,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"{p} does not exist")


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, out):
    _require(args.digits_images, args.digits_labels)
    try:
        cfg = SynthConfig(
            min_len=args.min_len,
            max_len=args.max_len,
            gap_distribution=(args.gap_min, args.gap_max),
            border=args.border,
            seed=args.seed,
            count=args.count,
            split_fractions=_pair(args.split, ",", float),
            jitter=args.jitter,
        )
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    source = load_idx(open_maybe_gzip(args.digits_images), open_maybe_gzip(args.digits_labels))
    splits = generate_dataset(cfg, source)
    save_splits(splits, args.out)
    for ds in splits:
        print(f"{ds.split_tag}: {len(ds)} samples -> {Path(args.out) / ds.split_tag}", file=out)


def cmd_anchors(args, out):
    ds = load_dataset(resolve_dataset_dir(args.data, "train"))
    anchors, mean_iou = kmeans_anchors(box_shapes(ds.samples, args.frame), args.k, args.seed)
    text = format_anchors(anchors)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    out.write(text)
    log.info("mean IoU %.4f; aspect ratios %s", mean_iou, ", ".join(f"{a.aspect:.2f}" for a in anchors))


def _fit(train_dir, val_dir, anchors, cfg, out):
    tr = load_dataset(resolve_dataset_dir(train_dir, "train"))
    va = load_dataset(resolve_dataset_dir(val_dir, "val"))
    return train(tr.samples, va.samples, anchors, cfg, progress=lambda msg: print(msg, file=out, flush=True))


def cmd_train(args, out):
    _require(args.train, args.val, args.anchors)
    cfg = train_config(args)
    anchors = parse_anchors(Path(args.anchors).read_text(encoding="utf-8"))
    model, history = _fit(args.train, args.val, anchors, cfg, out)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out, cfg)
    print(f"best epoch {history.best_epoch}; checkpoint -> {args.out}", file=out)


def draw_boxes(image: np.ndarray, boxes) -> np.ndarray:
    canvas = np.array(image, dtype=np.uint8)
    h, w = canvas.shape
    for b in boxes:
        x0, y0 = int(np.clip(np.floor(b.x_min), 0, w - 1)), int(np.clip(np.floor(b.y_min), 0, h - 1))
        x1, y1 = int(np.clip(np.ceil(b.x_max) - 1, 0, w - 1)), int(np.clip(np.ceil(b.y_max) - 1, 0, h - 1))
        canvas[y0, x0 : x1 + 1] = 128
        canvas[y1, x0 : x1 + 1] = 128
        canvas[y0 : y1 + 1, x0] = 128
        canvas[y0 : y1 + 1, x1] = 128
    return canvas


def format_reading(name: str, reading) -> str:
    boxes = ";".join(
        f"{d.digit}:{d.box.x_min:.2f},{d.box.y_min:.2f},{d.box.x_max:.2f},{d.box.y_max:.2f}" for d in reading.detections
    )
    return f"{name}\t{reading.text}\t{reading.probability:.6f}\t{boxes}"


def cmd_predict(args, out):
    _require(args.model, *args.image)
    if args.overlay and len(args.image) != 1:
        raise UsageError("--overlay needs exactly one --image")
    model, _ = load_model(args.model)
    for path in args.image:
        image = read_pgm(path)
        reading = predict_string(model, image, args.conf, args.nms)
        print(format_reading(Path(path).name, reading), file=out)
        if args.overlay:
            write_pgm(args.overlay, draw_boxes(image, [d.box for d in reading.detections]))


def cmd_eval(args, out):
    _require(args.model, args.data)
    model, _ = load_model(args.model)
    ds = load_dataset(resolve_dataset_dir(args.data, "test"))
    report = evaluate(model, ds.samples, args.conf, args.nms)
    out.write(report.to_table())
    if args.tsv:
        Path(args.tsv).write_text(report.to_tsv(), encoding="utf-8")


def cmd_context(args, out):
    _require(args.isolated, args.strings)
    cfg = train_config(args)
    test = load_dataset(resolve_dataset_dir(args.strings, "test"))
    results = {}
    for name, root in (("isolated", args.isolated), ("strings", args.strings)):
        tr = load_dataset(resolve_dataset_dir(root, "train"))
        anchors, _ = kmeans_anchors(box_shapes(tr.samples), args.k, cfg.seed)
        print(f"[{name}] training on {len(tr)} samples; anchors {format_anchors(anchors).strip().replace(chr(10), ' | ')}", file=out)
        model, history = _fit(root, root, anchors, cfg, out)
        report = evaluate(model, test.samples, cfg.conf_threshold, cfg.nms_iou)
        results[name] = report
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            save_model(model, Path(args.out) / f"{name}.nsrm", cfg)
            (Path(args.out) / f"{name}.tsv").write_text(report.to_tsv(), encoding="utf-8")
        print(f"[{name}] string test set:", file=out)
        out.write(report.to_table())
    gap = results["strings"].overall_accuracy - results["isolated"].overall_accuracy
    print(
        f"string accuracy: isolated-trained {results['isolated'].overall_accuracy:.2f}%, "
        f"string-trained {results['strings'].overall_accuracy:.2f}%, gap {gap:.2f} points",
        file=out,
    )


COMMANDS = {
    "synth": cmd_synth,
    "anchors": cmd_anchors,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "context-exp": cmd_context,
}


def _thread_limit():
    value = os.environ.get("NUMSTR_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} does not exist")
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices.get(args.command) if args.command else None
        target = sub or parser
        known = {a.dest for a in target._actions}
        unknown = set(values) - known - {"config"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        target.set_defaults(**{k: v for k, v in values.items() if k != "config"})
        args = parser.parse_args(argv)
        for action in target._actions:
            # values taken from the file arrive as strings; apply the flag's type
            v = getattr(args, action.dest, None)
            if action.dest in values and isinstance(v, str) and action.type not in (None, str):
                setattr(args, action.dest, action.type(v))
    if not args.command:
        parser.print_help(sys.stderr)
        raise UsageError("no subcommand given")
    return args


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit():
            COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (FormatError, ConsistencyError, ConfigError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
