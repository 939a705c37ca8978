"""Command-line entry point ``sseg``.

Every subcommand takes ``--config FILE`` (``key = value`` lines) and flag overrides;
flags win over the file, the file wins over defaults. The resolved configuration is
written into the output directory. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import apply_overrides, format_value, load_config, save_config
from .errors import ConfigError, ParseError, SSegError
from .evaluation import PROTOCOLS, EvalReport, accumulate, save_report
from .selftrain import StudentConfig

log = logging.getLogger("sseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------------
# option sets (config-file key sets)


@dataclass
class SynthOptions:
    out: str = ""
    seed: int = 0
    n_images: int = 250
    n_test: int = 50
    image_size: int = 64


@dataclass
class PseudomaskOptions:
    manifest: str = ""
    out: str = ""
    k: int = 8
    stride: int = 2
    position_weight: float = 0.1
    seed: int = 0
    n_init: int = 3


@dataclass
class InferOptions:
    image: str = ""
    classes: str = ""
    checkpoint: str = ""
    out: str = ""
    tau: float | None = None
    template: str = "{}"


@dataclass
class EvalOptions:
    gt: str = ""
    pred: str = ""
    protocol: str = "without_background"
    tau: float = 0.5
    checkpoint: str = ""
    template: str = "{}"
    out: str = ""


@dataclass
class SelftrainOptions:
    checkpoint: str = ""
    images: str = ""
    classes: str = ""
    out_dir: str = ""
    tau: float | None = 0.5
    template: str = "{}"
    eval_gt: str = ""
    protocol: str = "without_background"
    student: StudentConfig = field(default_factory=StudentConfig)


def _nested(f):
    return f.default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(f.default_factory())


def _show_default(f):
    value = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    return format_value(value) if value != "" else "(empty)"


def _add_option_flags(parser, cls):
    for f in dataclasses.fields(cls):
        if _nested(f):
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), dest="opt:" + f.name,
                            default=argparse.SUPPRESS, metavar=f.name.upper(),
                            help=f"default: {_show_default(f)}")
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any (dotted) config key")


def _resolve(args, base):
    """defaults < config file < --set < explicit flags."""
    opts = base
    if args.config:
        try:
            opts = load_config(args.config, opts)
        except ParseError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    sets = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v
    opts = apply_overrides(opts, sets)
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt:")}
    return apply_overrides(opts, flags)


def _require(opts, *names):
    missing = [n for n in names if not getattr(opts, n)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-")
                                                                       for n in missing))


def _emit(section, rows):
    """Delimited block on stdout: a header line, then tab-separated key/value rows."""
    print(f"[{section}]")
    for k, v in rows:
        print(f"{k}\t{format_value(v) if not isinstance(v, str) else v}")
    sys.stdout.flush()


def _class_list(text):
    from .data import read_class_names

    p = Path(text)
    if p.is_file():
        names = read_class_names(p)
    else:
        names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise UsageError("--classes is empty")
    return names


def _class_vocab(text, template):
    from .labels import BACKGROUND, ClassVocabulary

    names = [n for n in _class_list(text) if n != BACKGROUND]
    return ClassVocabulary(names, template)


def _image_items(path):
    """(id, image) pairs from a manifest, a directory of PNGs or a single image."""
    from .data import load_pairs, read_image

    p = Path(path)
    if p.is_dir() and (p / "manifest.jsonl").is_file():
        p = p / "manifest.jsonl"
    if p.suffix == ".jsonl":
        return [(pair.id, pair.image) for pair in load_pairs(p)]
    if p.is_dir():
        return [(f.stem, read_image(f)) for f in sorted(p.glob("*.png"))]
    return [(p.stem, read_image(p))]


def _gt_manifest(path):
    p = Path(path)
    return p / "manifest.jsonl" if p.is_dir() else p


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .data import synth_dataset, write_dataset

    o = _resolve(args, SynthOptions())
    _require(o, "out")
    if not 0 <= o.n_test <= o.n_images:
        raise ConfigError("n_test must lie in [0, n_images]")
    pairs, labeled = synth_dataset(o.seed, o.n_images, o.image_size)
    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(o, out / "synth.cfg")
    n_train = o.n_images - o.n_test
    write_dataset(out / "train", pairs[:n_train], labeled[:n_train])
    if o.n_test:
        write_dataset(out / "test", pairs[n_train:], labeled[n_train:])
    _emit("synth", [("train_images", n_train), ("test_images", o.n_test),
                    ("train_manifest", str(out / "train" / "manifest.jsonl")),
                    ("classes", ",".join(labeled[0].class_names))])
    return 0


def cmd_pseudomask(args):
    from .data import load_labeled, read_manifest_records
    from .pseudomask import ColorPositionExtractor, PseudoMaskCache, oracle_miou

    o = _resolve(args, PseudomaskOptions())
    _require(o, "manifest", "out")
    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(o, out / "pseudomask.cfg")
    backbone = ColorPositionExtractor(o.stride, o.position_weight)
    cache = PseudoMaskCache(out, backbone, o.k, o.seed, o.n_init)
    records = read_manifest_records(o.manifest)
    has_labels = bool(records) and all("labels" in r for r in records)
    scores = []
    if has_labels:
        for item in load_labeled(o.manifest):
            pm = cache.get(item.id, item.image)
            scores.append(oracle_miou(pm, item))
    else:
        from .data import load_pairs

        for pair in load_pairs(o.manifest):
            cache.get(pair.id, pair.image)
    rows = [("images", len(records)), ("k", o.k), ("cache_dir", str(cache.dir))]
    if scores:
        rows += [("oracle_miou_mean", float(np.mean(scores))),
                 ("oracle_miou_min", float(np.min(scores)))]
    _emit("pseudomask", rows)
    return 0


def cmd_train(args):
    from .data import load_pairs
    from .plotting import plot_loss_curve
    from .train import TrainConfig, read_log, train

    cfg = _resolve(args, TrainConfig())
    if not args.manifest or not args.out:
        raise UsageError("--manifest and --out are required")
    pairs = list(load_pairs(args.manifest))
    t0 = time.perf_counter()
    last = [None]

    def on_step(rec):
        last[0] = rec
        if args.log_every and rec["step"] % args.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", rec["step"], rec["total"], rec["lr"])

    path = train(cfg, pairs, args.out, resume=args.resume, max_steps=args.max_steps,
                 on_step=on_step)
    out = Path(args.out)
    records = read_log(out / "train_log.jsonl")
    fig = plot_loss_curve(records, out / "loss_curve.png")
    rows = [("checkpoint", str(path)), ("steps", len(records)),
            ("seconds", round(time.perf_counter() - t0, 2)), ("figure", str(fig))]
    if last[0] is not None:
        rows += [(k, last[0][k]) for k in ("total", "mask", "contrastive", "temperature")]
    _emit("train", rows)
    return 0


def _load_any(path):
    from .checkpoint import read_container

    header, _ = read_container(path)
    if header.get("kind") == "student":
        from .selftrain import load_student

        return "student", load_student(path), None
    from .checkpoint import load_model

    model, vocab, _, _ = load_model(path)
    return "sseg", model, vocab


def _predict_fn(checkpoint, classes, tau, drop_background):
    from .inference import encode_classes, predict

    kind, model, vocab = _load_any(checkpoint)
    if kind == "student":
        if model.foreground_names() != list(classes.names):
            raise SSegError("student classes differ from the requested classes")
        return lambda image: model.predict(image, drop_background=drop_background)
    embs = encode_classes(classes, model, vocab)
    return lambda image: predict(image, model, vocab, classes, tau, class_embs=embs)


def cmd_infer(args):
    from .data import read_image
    from .inference import write_prediction

    o = _resolve(args, InferOptions())
    _require(o, "image", "classes", "checkpoint", "out")
    classes = _class_vocab(o.classes, o.template)
    fn = _predict_fn(o.checkpoint, classes, o.tau, drop_background=o.tau is None)
    seg = fn(read_image(o.image))
    out = Path(o.out)
    prefix = out / Path(o.image).stem if out.suffix == "" else out.with_suffix("")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_config(o, prefix.parent / "infer.cfg")
    write_prediction(seg, prefix)
    names = seg.names_with_background()
    counts = np.bincount(seg.labels.ravel(), minlength=max(names) + 1)
    rows = [("prefix", str(prefix))]
    rows += [(f"pixels:{names[i]}", int(counts[i])) for i in sorted(names)]
    _emit("infer", rows)
    return 0


def evaluate_dir(gt_manifest, pred_dir, protocol, tau=None) -> EvalReport:
    from .data import load_labeled
    from .evaluation import WITH_BACKGROUND
    from .inference import read_prediction

    report = None
    for item in load_labeled(gt_manifest):
        if report is None:
            report = EvalReport(item.class_names, protocol,
                                tau if protocol == WITH_BACKGROUND else None)
        prefix = Path(pred_dir) / item.id
        if not Path(f"{prefix}_labels.png").is_file():
            raise SSegError(f"no prediction for {item.id!r} in {pred_dir}")
        accumulate(read_prediction(prefix), item, report)
    if report is None:
        raise SSegError("ground-truth manifest is empty")
    return report


def predict_dir(checkpoint, gt_manifest, pred_dir, protocol, tau, template="{}"):
    """Write predictions for every image of a labeled manifest."""
    from .data import load_labeled, read_class_names
    from .evaluation import WITH_BACKGROUND
    from .inference import write_prediction

    names = read_class_names(Path(gt_manifest).parent / "classes.txt")
    classes = _class_vocab(",".join(names), template)
    with_bg = protocol == WITH_BACKGROUND
    fn = _predict_fn(checkpoint, classes, tau if with_bg else None, drop_background=not with_bg)
    for item in load_labeled(gt_manifest):
        write_prediction(fn(item.image), Path(pred_dir) / item.id)


def cmd_eval(args):
    from .plotting import plot_iou_bars

    o = _resolve(args, EvalOptions())
    _require(o, "gt", "pred")
    if o.protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}")
    gt = _gt_manifest(o.gt)
    if o.checkpoint:
        predict_dir(o.checkpoint, gt, o.pred, o.protocol, o.tau, o.template)
    report = evaluate_dir(gt, o.pred, o.protocol, o.tau)
    out = Path(o.out or o.pred)
    out.mkdir(parents=True, exist_ok=True)
    save_config(o, out / "eval.cfg")
    save_report(report, out / "report.json")
    fig = plot_iou_bars(report, out / "iou_per_class.png")
    print(report.format_table())
    _emit("eval", [("protocol", report.protocol), ("miou", report.miou),
                   ("pixel_accuracy", report.pixel_accuracy), ("report", str(out / "report.json")),
                   ("figure", str(fig))])
    return 0


def cmd_selftrain(args):
    from .checkpoint import load_model
    from .plotting import plot_comparison, plot_loss_curve
    from .selftrain import compare, generate_labels, train_student
    from .train import read_log

    o = _resolve(args, SelftrainOptions())
    _require(o, "checkpoint", "images", "classes", "out_dir")
    out = Path(o.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(o, out / "selftrain.cfg")
    classes = _class_vocab(o.classes, o.template)
    model, vocab, _, _ = load_model(o.checkpoint)
    manifest, summary = generate_labels(model, vocab, _image_items(o.images), classes, o.tau,
                                        out / "labels")
    rows = [("labels_written", summary["written"]), ("labels_failed", summary["failed"])]
    student = train_student(manifest, o.student, out / "student")
    rows.append(("student_checkpoint", str(student)))
    plot_loss_curve(read_log(out / "student" / "student_log.jsonl"), out / "student_loss.png",
                    keys=("loss",))
    if o.eval_gt:
        gt = _gt_manifest(o.eval_gt)
        reports = {}
        for name, ck in (("teacher", o.checkpoint), ("student", str(student))):
            pred = out / f"eval_{name}"
            predict_dir(ck, gt, pred, o.protocol, o.tau, o.template)
            reports[name] = evaluate_dir(gt, pred, o.protocol, o.tau)
            save_report(reports[name], pred / "report.json")
        delta = compare(reports["teacher"], reports["student"])
        (out / "compare.json").write_text(json.dumps(delta, indent=2), encoding="utf-8")
        plot_comparison(reports["teacher"], reports["student"], out / "compare.png")
        rows += [("teacher_miou", delta["teacher_miou"]), ("student_miou", delta["student_miou"]),
                 ("miou_delta", delta["miou_delta"]), ("figure", str(out / "compare.png"))]
    _emit("selftrain", rows)
    return 0


# ----------------------------------------------------------------------------


def build_parser():
    from .train import TrainConfig

    parser = _Parser(prog="sseg", description="Open-vocabulary segmentation from image-text pairs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.subcommands = sub.choices

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    _add_option_flags(p, SynthOptions)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudomask", help="cluster features into pseudo-masks and cache them")
    _add_option_flags(p, PseudomaskOptions)
    p.set_defaults(func=cmd_pseudomask)

    p = sub.add_parser("train", help="train on an image-text manifest")
    _add_option_flags(p, TrainConfig)
    p.add_argument("--manifest", required=False)
    p.add_argument("--out", required=False)
    p.add_argument("--resume", default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one image for a list of class names")
    _add_option_flags(p, InferOptions)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_option_flags(p, EvalOptions)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftrain", help="label images with a model and train a student")
    _add_option_flags(p, SelftrainOptions)
    p.set_defaults(func=cmd_selftrain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        argv = sys.argv[1:] if argv is None else argv
        cmd = next((a for a in argv if a in parser.subcommands), None)
        (parser.subcommands[cmd] if cmd else parser).print_help(sys.stderr)
        print(f"sseg: error: {exc}", file=sys.stderr)
        return 1
    except (SSegError, OSError, ValueError) as exc:
        print(f"sseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
