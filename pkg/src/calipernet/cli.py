"""Command-line entry point: ``calipernet synth|crossval|measure|report``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 unmeasurable image. Progress goes to standard error; results go to files
under ``--out`` and to standard output.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
import zipfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as M
from .data import (
    DatasetConfig,
    DatasetError,
    crop_roi,
    load_dataset,
    make_sample,
    read_dataset_config,
    read_png,
    resize_sample,
    synth_generate,
    write_dataset,
)
from .measurement import MeasurementLine, measure, render_overlay
from .metrics import paired_t_test, write_report_kv, write_reports_csv
from .tensor import Tensor
from .trainer import (
    PredictionsFormatError,
    TrainConfig,
    cross_validate,
    read_predictions,
    report_from_records,
    write_predictions,
)

log = logging.getLogger("calipernet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_UNMEASURABLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

RUN_DEFAULTS = {"jobs": 1, "split_seed": 0}
DATA_DEFAULTS = {"roi": None}

FIELD_DOCS = {
    "model": {
        "input_size": "model input height and width, multiples of 8",
        "encoder_channels": "widths of the three encoder stages",
        "num_classes": "output channels including background",
        "dropout_rate": "spatial dropout after each encoder stage",
        "seed": "weight initialisation seed (fold f adds f)",
        "coordconv": "append row/column coordinate channels to the input",
        "norm_epsilon": "variance floor of the per-channel normalisation",
    },
    "train": {
        "epochs": "passes over the training split",
        "batch_size": "samples per step (only 1 is supported)",
        "lr0": "initial Adam learning rate",
        "lr_decay": "multiplicative decay applied every lr_step epochs",
        "lr_step": "epochs between decays",
        "beta1": "Adam first-moment decay",
        "beta2": "Adam second-moment decay",
        "adam_eps": "Adam denominator floor",
        "grad_clip": "global gradient norm limit, <= 0 disables",
        "seed": "shuffle, augmentation and dropout seed (fold f adds f)",
        "augment": "random contrast, brightness and gamma during training",
        "report_every": "epochs between progress lines, 0 silences them",
    },
    "data": {"roi": "crop rectangle row0 col0 height width applied before resizing; empty = none"},
    "run": {
        "jobs": "folds trained in parallel",
        "split_seed": "seed of the fold assignment",
    },
}


@dataclasses.dataclass
class RunConfig:
    model: M.ModelConfig = dataclasses.field(default_factory=M.ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    roi: Optional[tuple[int, int, int, int]] = None
    jobs: int = 1
    split_seed: int = 0

    def sections(self) -> dict[str, dict]:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "data": {"roi": self.roi},
            "run": {"jobs": self.jobs, "split_seed": self.split_seed},
        }

    def write(self, path) -> None:
        lines = []
        for section, values in self.sections().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"# {FIELD_DOCS[section][key]}")
                lines.append(f"{key} = {_format_value(value)}")
            lines.append("")
        Path(path).write_text("\n".join(lines))


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return " ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(section: str, key: str, text: str, default):
    text = text.strip()
    where = f"[{section}] {key}"
    try:
        if key == "roi":
            if not text:
                return None
            vals = tuple(int(v) for v in text.replace(",", " ").split())
            if len(vals) != 4:
                raise ValueError("need 4 integers")
            return vals
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true or false")
        if isinstance(default, (list, tuple)):
            vals = [int(v) for v in text.replace(",", " ").split()]
            return type(default)(vals)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise UsageError(f"config {where}: cannot parse {text!r} ({exc})") from None
    raise UsageError(f"config {where}: unsupported value")


def build_run_config(config_path: Optional[str], overrides: Sequence[str]) -> RunConfig:
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    values = cfg.sections()
    assignments: list[tuple[str, str, str]] = []
    if config_path:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        try:
            with open(config_path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config {config_path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                assignments.append((section, key, text))
    for item in overrides:
        name, sep, text = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} must look like section.key=value")
        assignments.append((section, key, text))
    for section, key, text in assignments:
        if section not in values:
            raise UsageError(f"config: unknown section [{section}]")
        if key not in values[section]:
            raise UsageError(f"config: unknown key {key!r} in [{section}]")
        default = values[section][key]
        if default is None and key != "roi":
            raise UsageError(f"config [{section}] {key}: unsupported value")
        values[section][key] = _parse_value(section, key, text, default)
    try:
        model_cfg = M.ModelConfig.from_dict(values["model"])
        model_cfg.validate()
        train_cfg = TrainConfig(**values["train"])
        train_cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None
    if values["run"]["jobs"] < 1:
        raise UsageError("config: [run] jobs must be >= 1")
    return RunConfig(model_cfg, train_cfg, values["data"]["roi"], values["run"]["jobs"], values["run"]["split_seed"])


# ---------------------------------------------------------------------------
# commands


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def _emit(pairs) -> None:
    for key, value in pairs:
        print(f"{key} = {value}")


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    h, w = args.size
    if h < 8 or w < 8:
        raise UsageError("--size sides must be >= 8")
    out = _prepare_out(args.out)
    samples = synth_generate(args.count, (h, w), np.random.default_rng(args.seed))
    try:
        write_dataset(samples, out, DatasetConfig(target_size=(h, w)))
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from None
    mm = np.array([s.thickness_mm for s in samples])
    states = [s.state for s in samples]
    _emit([
        ("count", len(samples)),
        ("resting", states.count("resting")),
        ("contracted", states.count("contracted")),
        ("thickness_mm_mean", f"{mm.mean():.4f}"),
        ("thickness_mm_min", f"{mm.min():.4f}"),
        ("thickness_mm_max", f"{mm.max():.4f}"),
        ("mm_per_pixel", repr(samples[0].mm_per_pixel)),
    ])
    log.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def _load(data_dir, roi):
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    try:
        samples = load_dataset(root)
        ds_cfg = read_dataset_config(root)
        roi = roi if roi is not None else ds_cfg.roi
        samples = [crop_roi(s, roi) for s in samples]
    except (DatasetError, ValueError) as exc:
        raise DataError(str(exc)) from None
    return samples


def cmd_crossval(args) -> int:
    overrides = list(args.set or [])
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.jobs is not None:
        overrides.append(f"run.jobs={args.jobs}")
    run = build_run_config(args.config, overrides)
    if args.folds < 2:
        raise UsageError("--folds must be >= 2")
    samples = _load(args.data, run.roi)
    if len(samples) < args.folds:
        raise UsageError(f"dataset has {len(samples)} samples, fewer than --folds {args.folds}")
    out = _prepare_out(args.out)
    run.write(out / "config.ini")
    log.info(
        "cross-validating %d samples, %d folds, %d epochs, %d jobs",
        len(samples), args.folds, run.train.epochs, run.jobs,
    )
    res = cross_validate(samples, args.folds, run.train, run.model, run.split_seed, run.jobs)
    rows = []
    for fr in res.folds:
        fold_dir = out / f"fold{fr.fold}"
        fr.log.write_csv(fold_dir / "log.csv")
        cfg_f = M.ModelConfig.from_dict({**run.model.to_dict(), "seed": run.model.seed + fr.fold})
        model = M.build_model(cfg_f)
        model.load_state(fr.state)
        M.save_checkpoint(model, fold_dir / "model.npz", extra={"fold": fr.fold, "best_epoch": fr.log.best_epoch})
        if fr.evaluation.report is not None:
            write_report_kv(fr.evaluation.report, fold_dir / "report.txt")
            rows.append((str(fr.fold), fr.evaluation.report))
    write_predictions(res.records, out / "predictions.csv")
    _write_pooled(res.pooled, res.records, rows, out)
    return EXIT_OK


def cmd_measure(args) -> int:
    if not args.mm_per_pixel > 0:
        raise UsageError("--mm-per-pixel must be positive")
    try:
        model = M.load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"image {path} does not exist")
    try:
        image = read_png(path)
    except DatasetError as exc:
        raise DataError(str(exc)) from None
    h, w = image.shape
    # a placeholder annotation lets the shared resize path run
    holder = make_sample(path.stem, image, (0, 0), (h - 1, 0), args.mm_per_pixel)
    prep = resize_sample(holder, tuple(model.config.input_size))
    res = measure(M.predict_probs(model, Tensor(prep.model_input)))
    line = None
    if res.status == "ok":
        sy, sx = prep.image.shape[0] / h, prep.image.shape[1] / w
        # back to original pixel coordinates so the given scale applies directly
        line = MeasurementLine.from_points(
            (res.line.top[0] / sy, res.line.top[1] / sx),
            (res.line.bottom[0] / sy, res.line.bottom[1] / sx),
        )
    if args.overlay_out:
        try:
            render_overlay(image, line, None, args.overlay_out)
        except OSError as exc:
            raise DataError(f"cannot write overlay {args.overlay_out}: {exc}") from None
    if line is None or line.length_px == 0:
        print(f"unmeasurable: {res.blob_count} blobs found", file=sys.stderr)
        return EXIT_UNMEASURABLE
    px = line.length_px
    _emit([
        ("top", f"{line.top[0]!r} {line.top[1]!r}"),
        ("bottom", f"{line.bottom[0]!r} {line.bottom[1]!r}"),
        ("length_px", repr(px)),
        ("length_mm", repr(px * args.mm_per_pixel)),
        ("blob_count", res.blob_count),
        ("confidence", repr(res.confidence)),
    ])
    return EXIT_OK


def _t_test_note(records) -> Optional[str]:
    pairs = [p for p in (r.pair() for r in records) if p is not None]
    try:
        paired_t_test([p.predicted.length_px for p in pairs], [p.truth.length_px for p in pairs])
    except ValueError as exc:
        return "identical distributions" if "zero variance" in str(exc) else str(exc)
    return None


def _write_pooled(pooled, records, rows, out: Path) -> None:
    """report.txt, reports.csv and the stdout summary shared by crossval and report."""
    note = _t_test_note(records) if pooled is not None else "no measurable predictions"
    if pooled is not None:
        write_report_kv(pooled, out / "report.txt")
        rows = rows + [("pooled", pooled)]
    else:
        (out / "report.txt").write_text("")
    if note:
        with open(out / "report.txt", "a") as fh:
            fh.write(f"# t-test: {note}\n" if pooled is not None else f"# {note}\n")
    write_reports_csv(rows, out / "reports.csv")
    degenerate = sum(r.status != "ok" for r in records) / len(records)
    pairs = [("samples", len(records)), ("degenerate_rate", repr(degenerate))]
    if pooled is not None:
        pairs += [(k, repr(v) if isinstance(v, float) else v) for k, v in pooled.as_dict().items()]
    if note:
        pairs.append(("t_test", note))
    _emit(pairs)


def cmd_report(args) -> int:
    try:
        records = read_predictions(args.predictions)
    except PredictionsFormatError as exc:
        raise DataError(f"{args.predictions}: {exc}") from None
    except OSError as exc:
        raise DataError(f"cannot read {args.predictions}: {exc.strerror}") from None
    if not records:
        raise DataError(f"{args.predictions}: no prediction rows")
    out = _prepare_out(args.out)
    pooled, per_fold = report_from_records(records)
    rows = [(str(f), rep) for f, rep in per_fold if rep is not None]
    _write_pooled(pooled, records, rows, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calipernet", description="Point-supervised caliper measurement.")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=[128, 128])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("crossval", help="k-fold training and evaluation")
    c.add_argument("--data", required=True)
    c.add_argument("--folds", type=int, default=10)
    c.add_argument("--config", help="INI file with [model] [train] [data] [run] sections")
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    c.add_argument("--jobs", type=int, help="shorthand for --set run.jobs=N")
    c.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    c.set_defaults(func=cmd_crossval)

    m = sub.add_parser("measure", help="measure one image with a trained checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--mm-per-pixel", type=float, required=True)
    m.add_argument("--overlay-out")
    m.set_defaults(func=cmd_measure)

    r = sub.add_parser("report", help="recompute metrics from a predictions CSV")
    r.add_argument("--predictions", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"calipernet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"calipernet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
