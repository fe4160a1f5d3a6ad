"""Adam training at batch size 1, fold evaluation and the cross-validation driver."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from .data import AugmentConfig, Prepared, Sample, augment, kfold_split, normalize_intensity, resize_sample
from .loss import lcfcn_loss
from .measurement import MeasurementLine, measure
from .metrics import EvalPair, MetricsReport, build_report, relative_length_error, sigma
from .tensor import Tensor, backward, softmax_channels

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "mean_train_loss", "L_I", "L_P", "L_S", "L_F", "val_mwa_mean", "val_mae", "lr")
PREDICTION_FIELDS = (
    "id", "fold", "pred_top", "pred_bottom", "true_top", "true_bottom", "mwa_pct", "status",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr0: float = 1e-4
    lr_decay: float = 0.1
    lr_step: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0  # global-norm threshold; <= 0 disables
    seed: int = 0
    augment: bool = True
    report_every: int = 1  # epochs between progress lines

    def validate(self) -> None:
        if self.batch_size != 1:
            raise ValueError("batch_size: only 1 is supported")
        if self.epochs < 0:
            raise ValueError("epochs: must be >= 0")
        if self.lr_step < 1:
            raise ValueError("lr_step: must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0: must be positive")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state differ in length")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"adam_step: shape mismatch for {p.name or 'parameter'}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


def clip_global_norm(grads: list[Optional[np.ndarray]], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * scale
    return total


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SampleRecord:
    id: str
    fold: int
    pred_top: Optional[tuple[float, float]]
    pred_bottom: Optional[tuple[float, float]]
    true_top: tuple[float, float]
    true_bottom: tuple[float, float]
    mwa_pct: float
    status: str

    def pair(self) -> Optional[EvalPair]:
        if self.status != "ok":
            return None
        return EvalPair(
            MeasurementLine(self.pred_top, self.pred_bottom),
            MeasurementLine(self.true_top, self.true_bottom),
            self.id,
        )


@dataclass
class FoldEvaluation:
    records: list[SampleRecord]
    report: Optional[MetricsReport]

    @property
    def pairs(self) -> list[EvalPair]:
        return [p for p in (r.pair() for r in self.records) if p is not None]

    @property
    def degenerate_rate(self) -> float:
        return sum(r.status != "ok" for r in self.records) / len(self.records)


Predictor = Callable[[Prepared], MeasurementLine]


def _model_predictor(model: M.Model):
    def predict(prep: Prepared):
        probs = M.predict_probs(model, Tensor(prep.model_input))
        res = measure(probs)
        return res.line if res.status == "ok" else None

    return predict


def evaluate_prepared(
    predict, prepared: Sequence[Prepared], fold: int = -1
) -> FoldEvaluation:
    if not prepared:
        raise ValueError("evaluate: empty sample set")
    records = []
    for prep in prepared:
        truth = MeasurementLine.from_points(prep.points[0], prep.points[1])
        line = predict(prep)
        if line is None:
            records.append(SampleRecord(prep.id, fold, None, None, truth.top, truth.bottom, math.nan, "degenerate"))
            continue
        err = relative_length_error(EvalPair(line, truth, prep.id))
        records.append(SampleRecord(prep.id, fold, line.top, line.bottom, truth.top, truth.bottom, err, "ok"))
    ev = FoldEvaluation(records, None)
    pairs = ev.pairs
    if pairs:
        ev.report = build_report(pairs)
    return ev


def evaluate_fold(model: M.Model, samples: Sequence[Sample], fold: int = -1, predictor=None) -> FoldEvaluation:
    """Measure every sample; degenerate images are kept as records but left out of the metrics."""
    if not samples:
        raise ValueError("evaluate_fold: empty test set")
    size = tuple(model.config.input_size) if model is not None else samples[0].image.shape[:2]
    prepared = [resize_sample(s, size) for s in samples]
    return evaluate_prepared(predictor or _model_predictor(model), prepared, fold)


def _selection_score(ev: FoldEvaluation) -> float:
    # mean relative error with unmeasurable images counted as 100 %
    return float(np.mean([r.mwa_pct if r.status == "ok" else 100.0 for r in ev.records]))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            for row in self.rows:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def train_step(model: M.Model, prep: Prepared, image: np.ndarray, rng, state, lr, cfg: TrainConfig):
    x = Tensor(normalize_intensity(image)[:, :, None])
    logits = M.forward(model, x, training=True, rng=rng)
    res = lcfcn_loss(softmax_channels(logits), prep.annotation)
    parts = res.breakdown()
    if not all(math.isfinite(v) for v in parts.values()):
        raise TrainingError(f"non-finite loss on sample {prep.id}: {parts}")
    model.zero_grad()
    backward(res.total)
    params = model.parameters()
    grads = [p.grad for p in params]
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient on sample {prep.id}: {parts}")
    clip_global_norm(grads, cfg.grad_clip)
    adam_step(params, grads, state, lr, cfg)
    return parts


def train_fold(
    model: M.Model,
    train: Sequence[Sample],
    val: Sequence[Sample],
    cfg: TrainConfig,
    tag: str = "",
) -> tuple[M.Model, TrainLog]:
    """Train in place; afterwards the model holds the best-validation weights.

    Selection uses the mean relative length error on the validation set with
    unmeasurable images scored as 100 %. Without a validation set the final
    weights are kept.
    """
    cfg.validate()
    if not train:
        raise ValueError("train_fold: empty training set")
    trainlog = TrainLog()
    if cfg.epochs == 0:
        return model, trainlog
    size = tuple(model.config.input_size)
    prep_train = [resize_sample(s, size) for s in train]
    prep_val = [resize_sample(s, size) for s in val]
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.for_params(model.parameters())
    aug_cfg = AugmentConfig()
    best_score, best_state = math.inf, None
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = dict.fromkeys(("total", "L_I", "L_P", "L_S", "L_F"), 0.0)
        for i in rng.permutation(len(prep_train)):
            prep = prep_train[i]
            image = augment(prep.image, rng, aug_cfg) if cfg.augment else prep.image
            try:
                parts = train_step(model, prep, image, rng, state, lr, cfg)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            for k in sums:
                sums[k] += parts[k]
        n = len(prep_train)
        row = {
            "epoch": epoch,
            "mean_train_loss": sums["total"] / n,
            "L_I": sums["L_I"] / n,
            "L_P": sums["L_P"] / n,
            "L_S": sums["L_S"] / n,
            "L_F": sums["L_F"] / n,
            "val_mwa_mean": math.nan,
            "val_mae": math.nan,
            "lr": lr,
        }
        if prep_val:
            ev = evaluate_prepared(_model_predictor(model), prep_val)
            if ev.report is not None:
                row["val_mwa_mean"] = ev.report.mwa_mean
                row["val_mae"] = ev.report.mae
            score = _selection_score(ev)
            if score < best_score:
                best_score, best_state = score, model.state()
                trainlog.best_epoch = epoch
        trainlog.rows.append(row)
        if cfg.report_every and (epoch + 1) % cfg.report_every == 0:
            log.info(
                "%sepoch %d loss %.4f (I %.3f P %.3f S %.3f F %.3f) val_mwa %.2f val_mae %.2f lr %.1e [%.0fs]",
                tag, epoch, row["mean_train_loss"], row["L_I"], row["L_P"], row["L_S"], row["L_F"],
                row["val_mwa_mean"], row["val_mae"], lr, time.perf_counter() - t0,
            )
    if best_state is not None:
        model.load_state(best_state)
    return model, trainlog


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    evaluation: FoldEvaluation
    log: TrainLog
    state: dict


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    pooled: Optional[MetricsReport]
    sigma: float
    records: list[SampleRecord]

    @property
    def degenerate_rate(self) -> float:
        return sum(r.status != "ok" for r in self.records) / len(self.records)


def _run_fold(args) -> FoldResult:
    f, fold, by_id, model_cfg, train_cfg = args
    mcfg = M.ModelConfig.from_dict({**model_cfg.to_dict(), "seed": model_cfg.seed + f})
    tcfg = TrainConfig(**{**asdict(train_cfg), "seed": train_cfg.seed + f})
    model = M.build_model(mcfg)
    train = [by_id[i] for i in fold["train"]]
    val = [by_id[i] for i in fold["val"]]
    test = [by_id[i] for i in fold["test"]]
    model, trainlog = train_fold(model, train, val, tcfg, tag=f"[fold {f}] ")
    ev = evaluate_fold(model, test, fold=f)
    return FoldResult(f, ev, trainlog, model.state())


def cross_validate(
    samples: Sequence[Sample],
    k: int,
    train_cfg: TrainConfig,
    model_cfg: Optional[M.ModelConfig] = None,
    split_seed: int = 0,
    jobs: int = 1,
) -> CrossValResult:
    """Train and test every fold of a seeded k-fold plan; pool all test predictions."""
    if len(samples) < k:
        raise ValueError(f"dataset has {len(samples)} samples, fewer than k={k}")
    model_cfg = model_cfg or M.ModelConfig()
    by_id = {s.id: s for s in samples}
    plan = kfold_split([s.id for s in samples], k, np.random.default_rng(split_seed))
    tasks = [(f, fold, by_id, model_cfg, train_cfg) for f, fold in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    records = [r for res in results for r in res.evaluation.records]
    pairs = [p for r in records if (p := r.pair()) is not None]
    fold_pairs = [res.evaluation.pairs for res in results]
    measurable = [fp for fp in fold_pairs if fp]
    sig = sigma(measurable) if len(measurable) >= 2 else math.nan
    pooled = build_report(pairs, sigma_value=sig) if pairs else None
    return CrossValResult(results, pooled, sig, records)


# ---------------------------------------------------------------------------
# prediction CSV


def _pt(p) -> str:
    return "" if p is None else f"{p[0]!r} {p[1]!r}"


def _parse_pt(text: str):
    text = text.strip()
    if not text:
        return None
    r, c = text.split()
    return float(r), float(c)


def write_predictions(records: Sequence[SampleRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_FIELDS)
        for r in records:
            writer.writerow([
                r.id, r.fold, _pt(r.pred_top), _pt(r.pred_bottom), _pt(r.true_top),
                _pt(r.true_bottom), _fmt(r.mwa_pct), r.status,
            ])


class PredictionsFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_predictions(path) -> list[SampleRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_FIELDS:
            raise PredictionsFormatError(1, f"expected header {','.join(PREDICTION_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(PREDICTION_FIELDS):
                    raise ValueError(f"expected {len(PREDICTION_FIELDS)} fields, got {len(row)}")
                rid, fold, pt, pb, tt, tb, err, status = row
                if status not in ("ok", "degenerate"):
                    raise ValueError(f"unknown status {status!r}")
                rec = SampleRecord(
                    rid, int(fold), _parse_pt(pt), _parse_pt(pb), _parse_pt(tt), _parse_pt(tb),
                    float(err), status,
                )
                if rec.true_top is None or rec.true_bottom is None:
                    raise ValueError("missing ground-truth endpoints")
                if status == "ok" and (rec.pred_top is None or rec.pred_bottom is None):
                    raise ValueError("status ok but predicted endpoints missing")
            except ValueError as exc:
                raise PredictionsFormatError(lineno, str(exc)) from None
            records.append(rec)
    return records


def report_from_records(records: Sequence[SampleRecord]) -> tuple[Optional[MetricsReport], list]:
    """Pooled report (sigma across folds) and per-fold reports, as cross_validate computes them."""
    folds = sorted({r.fold for r in records})
    per_fold = []
    fold_pairs = []
    for f in folds:
        pairs = [p for r in records if r.fold == f and (p := r.pair()) is not None]
        fold_pairs.append(pairs)
        per_fold.append((f, build_report(pairs) if pairs else None))
    measurable = [fp for fp in fold_pairs if fp]
    sig = sigma(measurable) if len(measurable) >= 2 else math.nan
    pairs = [p for r in records if (p := r.pair()) is not None]
    return (build_report(pairs, sigma_value=sig) if pairs else None), per_fold
