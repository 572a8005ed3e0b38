"""Clean accuracy, PGD-40 robustness and "accuracy on correctly classified images"."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, pgd, random_start_delta
from .data import LabeledDataset
from .distortions import DistortionSpec, distort_dataset
from .errors import AlignmentError, FormatError, MergeError
from .model import predict
from .training import predict_dataset

EVAL_BATCH = 64
NA = "NA"
CSV_HEADER = ["model", "transform", "param", "n", "acc", "acc_on_correct"]

# l-inf eps 8/255, step 2/255, 40 iterations, random start
ROBUSTNESS_ATTACK = AttackConfig(norm="linf", epsilon=8 / 255, step_size=2 / 255, iterations=40, random_start=True)


@dataclass(frozen=True)
class EvalRow:
    model: str
    transform: str
    param: str
    n: int
    acc: float
    acc_on_correct: float | None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.model, self.transform, self.param)

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise ValueError(f"accuracy {self.acc} outside [0, 1]")
        if self.acc_on_correct is not None and not 0.0 <= self.acc_on_correct <= 1.0:
            raise ValueError(f"accuracy_on_correct {self.acc_on_correct} outside [0, 1]")


def _param_sort_key(param: str):
    try:
        return (0, float(param), param)
    except ValueError:
        return (1, 0.0, param)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def sorted(self) -> "EvalReport":
        return EvalReport(sorted(self.rows, key=lambda r: (r.model, r.transform, _param_sort_key(r.param))))

    def lookup(self, model: str, transform: str, param: str) -> EvalRow:
        for row in self.rows:
            if row.key == (model, transform, param):
                return row
        raise KeyError((model, transform, param))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for r in self.rows:
                aoc = NA if r.acc_on_correct is None else repr(float(r.acc_on_correct))
                writer.writerow([r.model, r.transform, r.param, r.n, repr(float(r.acc)), aoc])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CSV_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
        out = cls()
        for line, r in enumerate(rows[1:], start=2):
            if len(r) != len(CSV_HEADER):
                raise FormatError(f"{path}:{line}: expected {len(CSV_HEADER)} fields, got {len(r)}")
            aoc = None if r[5] == NA else float(r[5])
            out.add(EvalRow(r[0], r[1], r[2], int(r[3]), float(r[4]), aoc))
        return out


def accuracy_on_correct_from_predictions(labels, clean_pred, transformed_pred) -> float | None:
    """Fraction of clean-correct images still correct after the transform;
    ``None`` when no image was correct on the clean set."""
    labels = np.asarray(labels)
    clean_pred = np.asarray(clean_pred)
    transformed_pred = np.asarray(transformed_pred)
    if not (len(labels) == len(clean_pred) == len(transformed_pred)):
        raise AlignmentError(
            f"misaligned lengths: {len(labels)} labels, {len(clean_pred)} clean, {len(transformed_pred)} transformed"
        )
    correct = clean_pred == labels
    if not correct.any():
        return None
    return float(np.mean(transformed_pred[correct] == labels[correct]))


def accuracy_on_correct(net, clean_test: LabeledDataset, transformed_test: LabeledDataset,
                        clean_pred: np.ndarray | None = None) -> float | None:
    if len(clean_test) != len(transformed_test):
        raise AlignmentError(f"clean set has {len(clean_test)} images, transformed set {len(transformed_test)}")
    if not np.array_equal(clean_test.labels, transformed_test.labels):
        raise AlignmentError("clean and transformed labels differ; sets are not index-aligned")
    if clean_pred is None:
        clean_pred = predict_dataset(net, clean_test, EVAL_BATCH)
    return accuracy_on_correct_from_predictions(
        clean_test.labels, clean_pred, predict_dataset(net, transformed_test, EVAL_BATCH)
    )


def robust_correct(net, test: LabeledDataset, cfg: AttackConfig = ROBUSTNESS_ATTACK,
                   batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Per-image robust correctness: correct on the clean image and on the attacked one.

    Random starts are keyed by the global image index, so the outcome does
    not depend on ``batch_size``.
    """
    out = np.zeros(len(test), dtype=bool)
    for start in range(0, len(test), batch_size):
        idx = np.arange(start, min(start + batch_size, len(test)))
        x, y = test.batch(idx), test.labels[idx]
        clean_ok = predict(net, x) == y
        adv = _pgd_indexed(net, x, y, cfg, idx)
        out[idx] = clean_ok & (predict(net, adv) == y)
    return out


def _pgd_indexed(net, x, y, cfg: AttackConfig, global_idx: np.ndarray) -> np.ndarray:
    if not cfg.random_start:
        return pgd(net, x, y, cfg)
    # one stream per global index keeps the random start independent of batching
    delta = np.concatenate([random_start_delta((1,) + x.shape[1:], cfg, stream=int(i)) for i in global_idx])
    start = np.clip(x + delta, 0.0, 1.0)
    return pgd(net, x, y, _no_random_start(cfg), start=start)


def _no_random_start(cfg: AttackConfig) -> AttackConfig:
    return AttackConfig(cfg.norm, cfg.epsilon, cfg.step_size, cfg.iterations, False, cfg.seed)


def robustness(net, test: LabeledDataset, cfg: AttackConfig = ROBUSTNESS_ATTACK,
               batch_size: int = EVAL_BATCH) -> float:
    """Accuracy under the PGD-40 l-inf protocol (eps 8/255, step 2/255, random start)."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    return float(robust_correct(net, test, cfg, batch_size).mean())


def evaluate_transforms(net, model_id: str, test: LabeledDataset, specs: list[DistortionSpec],
                        batch_size: int = EVAL_BATCH) -> EvalReport:
    """One report row per transform: plain accuracy and accuracy on the clean-correct subset."""
    report = EvalReport()
    clean_pred = predict_dataset(net, test, batch_size)
    for spec in specs:
        transformed = distort_dataset(test, spec)
        pred = predict_dataset(net, transformed, batch_size)
        aoc = accuracy_on_correct_from_predictions(test.labels, clean_pred, pred)
        report.add(EvalRow(model_id, spec.name, spec.param_label, len(test), float(np.mean(pred == test.labels)), aoc))
    return report


def bias_summary(reports: list[EvalReport]) -> EvalReport:
    """Merge reports into one table sorted by (model, transform, param)."""
    merged: dict[tuple, EvalRow] = {}
    for report in reports:
        for row in report.rows:
            if row.key in merged:
                other = merged[row.key]
                kind = "identical" if other == row else "conflicting"
                raise MergeError(f"{kind} duplicate row for model={row.model} transform={row.transform} param={row.param}")
            merged[row.key] = row
    return EvalReport(list(merged.values())).sorted()


def is_undefined(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))
