"""Confusion-matrix metrics and leave-one-subject-out evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatch, EmptyMatrix, LengthMismatch, UnknownSubject
from .ingest import STAGE_NAMES, EpochDataset

N_STAGES = len(STAGE_NAMES)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are reference (scored) stages, columns predicted stages."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (N_STAGES, N_STAGES):
            raise ValueError(f"confusion matrix must be {N_STAGES}x{N_STAGES}, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion matrix entries must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["reference\\predicted", *STAGE_NAMES])
        for name, row in zip(STAGE_NAMES, self.counts):
            w.writerow([name, *row.tolist()])
        return buf.getvalue()


def confusion_matrix(predictions, references) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    r = np.asarray(references, dtype=np.int64)
    if p.shape != r.shape or p.ndim != 1:
        raise LengthMismatch(f"{p.shape} predictions vs {r.shape} references")
    if p.size == 0:
        raise LengthMismatch("no predictions")
    for arr in (p, r):
        if arr.min() < 0 or arr.max() >= N_STAGES:
            raise ValueError("labels must be stage indices 0..4")
    counts = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    np.add.at(counts, (r, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    accuracy: object
    precision: list
    recall: list
    f1: list
    support: list
    macro_f1: object
    zero_support: list = field(default_factory=list)

    def as_floats(self) -> "MetricsReport":
        f = float
        return MetricsReport(
            f(self.accuracy), [f(v) for v in self.precision], [f(v) for v in self.recall],
            [f(v) for v in self.f1], list(self.support), f(self.macro_f1), list(self.zero_support),
        )

    def to_dict(self) -> dict:
        r = self.as_floats()
        return {
            "accuracy": r.accuracy,
            "macro_f1": r.macro_f1,
            "per_class": {
                name: {"precision": p, "recall": rc, "f1": f1, "support": s}
                for name, p, rc, f1, s in zip(STAGE_NAMES, r.precision, r.recall, r.f1, r.support)
            },
            "zero_support": [STAGE_NAMES[i] for i in r.zero_support],
        }

    def row(self) -> list[float]:
        """Acc, F1, then per-class F1 in W, S1, S2, S3, REM order (percent)."""
        r = self.as_floats()
        return [100 * r.accuracy, 100 * r.macro_f1, *(100 * v for v in r.f1)]


def metrics(cm: ConfusionMatrix, exact: bool = False) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1 and macro F1.

    A class with no reference epochs gets F1 = 0, is listed in
    ``zero_support`` and is left out of the macro average. With ``exact``
    every value is a :class:`fractions.Fraction`.
    """
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    zero = Fraction(0)
    precision, recall, f1, support, missing = [], [], [], [], []
    for k in range(N_STAGES):
        tp = int(c[k, k])
        row, col = int(c[k].sum()), int(c[:, k].sum())
        p = Fraction(tp, col) if col else zero
        r = Fraction(tp, row) if row else zero
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else zero)
        support.append(row)
        if row == 0:
            missing.append(k)
    included = [f1[k] for k in range(N_STAGES) if k not in missing]
    macro = sum(included, zero) / len(included)
    report = MetricsReport(Fraction(int(np.trace(c)), total), precision, recall, f1, support, macro, missing)
    return report if exact else report.as_floats()


def format_table(rows: dict, title: str = "") -> str:
    """Text table with Acc, F1 and per-class F1 columns."""
    head = f"{'':<20}{'Acc':>7}{'F1':>7}" + "".join(f"{n:>7}" for n in STAGE_NAMES)
    lines = [title] if title else []
    lines.append(head)
    for name, report in rows.items():
        vals = report.row() if isinstance(report, MetricsReport) else report
        lines.append(f"{name:<20}" + "".join(f"{v:>7.1f}" for v in vals))
    return "\n".join(lines)


# ---- protocol --------------------------------------------------------------------

def loso_split(data: EpochDataset, held_out_subject: str):
    """(train, test) partition with every epoch of one subject held out."""
    if held_out_subject not in set(data.subjects.tolist()):
        raise UnknownSubject(held_out_subject)
    test_mask = data.subjects == held_out_subject
    return data.select(~test_mask), data.select(test_mask)


def subject_folds(subjects, n_folds: int) -> list[list[str]]:
    """Round-robin subject-wise folds over the sorted subject ids."""
    subjects = sorted(subjects)
    n_folds = min(n_folds, len(subjects))
    return [subjects[i::n_folds] for i in range(n_folds)]


@torch.no_grad()
def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax stage per epoch; ties go to the lowest class index."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for lo in range(0, len(x), batch_size):
        xb = torch.as_tensor(np.asarray(x[lo:lo + batch_size]), dtype=dtype)[:, None, :]
        out.append(model.logits(xb).cpu().numpy())
    logits = np.concatenate(out) if out else np.zeros((0, N_STAGES))
    return np.argmax(logits, axis=1)


def evaluate(model, data: EpochDataset):
    if data.epoch_length != model.config.input_length:
        raise ConfigMismatch(
            f"epochs have length {data.epoch_length}, model expects {model.config.input_length}"
        )
    cm = confusion_matrix(predict(model, data.x), data.y)
    return cm, metrics(cm)


# ---- output ------------------------------------------------------------------------

def write_outputs(directory, stem: str, cm: ConfusionMatrix, report: MetricsReport,
                  extra: dict | None = None, heatmap: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {**report.to_dict(), "confusion_matrix": cm.counts.tolist(), **(extra or {})}
    files = {
        f"{stem}.json": json.dumps(payload, indent=2, sort_keys=True),
        f"{stem}_confusion.csv": cm.to_csv(),
        f"{stem}.txt": format_table({stem: report}) + "\n",
    }
    for name, text in files.items():
        tmp = directory / (name + ".tmp")
        tmp.write_text(text)
        tmp.replace(directory / name)
    if heatmap:
        plot_confusion(cm, report, directory / f"{stem}_confusion.png")


def plot_confusion(cm: ConfusionMatrix, report: MetricsReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    c = cm.counts
    rows = c.sum(axis=1, keepdims=True)
    frac = np.divide(c, rows, out=np.zeros(c.shape), where=rows > 0)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    for i in range(N_STAGES):
        for j in range(N_STAGES):
            ax.text(j, i, f"{c[i, j]}\n{100 * frac[i, j]:.1f}%", ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(N_STAGES), STAGE_NAMES)
    ax.set_yticks(range(N_STAGES), STAGE_NAMES)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Reference")
    r = report.as_floats()
    ax.set_title(f"Acc {100 * r.accuracy:.1f}  MF1 {100 * r.macro_f1:.1f}")
    fig.tight_layout()
    tmp = Path(str(path) + ".tmp.png")
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    tmp.replace(path)
