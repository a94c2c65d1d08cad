"""Experiment drivers: the pre-training ablation and the cross-subject LOSO study.

Every training stage records which subjects it consumed. The records
double as the leakage audit: a held-out subject must not appear in any of
them, PCA fitting included.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import SubjectOverlap, UnknownSubject
from .eval import ConfusionMatrix, MetricsReport, evaluate, format_table, loso_split, metrics, subject_folds
from .ingest import STAGE_NAMES, EpochDataset
from .model import build_model
from .seeding import subseed
from .train import combine_backbones, finetune, pretrain_cross_subject, pretrain_self

ABLATION_ROWS = ("Baseline", "Baseline + CL", "Baseline + CL-Large")
LOSO_METHODS = ("MViTime", "MViTime+", "MViTime++")


def audit_provenance(provenance: dict, held_out) -> list[tuple[str, str]]:
    """(stage, subject) pairs where a held-out subject reached a training stage."""
    held_out = set(held_out)
    return [(stage, s) for stage, subjects in sorted(provenance.items()) for s in subjects if s in held_out]


def assert_no_leakage(provenance: dict, held_out) -> None:
    leaks = audit_provenance(provenance, held_out)
    if leaks:
        raise SubjectOverlap(f"held-out subjects reached training stages: {leaks}")


def _record(provenance: dict, stage: str, report) -> None:
    provenance[stage] = sorted(report.subjects_seen)
    if report.pca_subjects:
        provenance[stage + "/pca"] = sorted(report.pca_subjects)


def _pooled(cms: list[ConfusionMatrix]) -> tuple[ConfusionMatrix, MetricsReport]:
    cm = sum(cms[1:], cms[0])
    return cm, metrics(cm)


# ---- ablation ----------------------------------------------------------------------------

@dataclass
class AblationReport:
    rows: dict  # name -> MetricsReport
    confusion: dict  # name -> ConfusionMatrix
    pretrained_on: dict  # name -> sorted subject list, or None for no pre-training
    provenance: list = field(default_factory=list)  # one {stage: subjects} per fold
    folds: list = field(default_factory=list)

    def table(self) -> str:
        return format_table(self.rows, "Pre-training ablation (Acc, F1, per-class F1, %)")

    def to_dict(self) -> dict:
        return {
            "rows": {k: v.to_dict() for k, v in self.rows.items()},
            "confusion": {k: v.counts.tolist() for k, v in self.confusion.items()},
            "pretrained_on": self.pretrained_on,
            "provenance": self.provenance,
            "folds": self.folds,
        }


def ablation_subjects(config: RunConfig, data: EpochDataset) -> tuple[list[str], list[str]]:
    """(evaluation subjects, extra pre-training subjects) for the ablation."""
    available = set(data.subject_ids())
    extra = list(config.pretrain_subjects)
    evaluation = list(config.eval_subjects) or sorted(available - set(extra))
    for s in [*extra, *evaluation]:
        if s not in available:
            raise UnknownSubject(s)
    overlap = sorted(set(extra) & set(evaluation))
    if overlap:
        raise SubjectOverlap(f"CL-Large pre-training subjects overlap the evaluation set: {overlap}")
    if not extra:
        raise SubjectOverlap("CL-Large needs a disjoint, non-empty pretrain_subjects list")
    return evaluation, extra


def run_ablation(config: RunConfig, data: EpochDataset) -> AblationReport:
    """Baseline, Baseline + CL and Baseline + CL-Large under subject-wise folds.

    CL pre-trains on each fold's training subjects; CL-Large pre-trains once
    on the extra subjects, which never overlap the evaluation set.
    """
    evaluation, extra = ablation_subjects(config, data)
    eval_data = data.only_subjects(evaluation)
    large, large_report = pretrain_self(data.only_subjects(extra), config.model, config.pretrain, config.augment)
    cms = {name: [] for name in ABLATION_ROWS}
    provenance, folds = [], subject_folds(evaluation, config.folds)
    for k, test_subjects in enumerate(folds):
        train = eval_data.only_subjects(sorted(set(evaluation) - set(test_subjects)))
        test = eval_data.only_subjects(test_subjects)
        prov = {}
        baseline = build_model(config.model, subseed(config.seed, "init", k))
        cl, rep = pretrain_self(train, config.model, config.pretrain, config.augment)
        _record(prov, "CL/pretrain", rep)
        _record(prov, "CL-Large/pretrain", large_report)
        for name, start in zip(ABLATION_ROWS, (baseline, cl, copy.deepcopy(large))):
            model, rep = finetune(start, train, config.finetune)
            _record(prov, f"{name}/finetune", rep)
            cms[name].append(evaluate(model, test)[0])
        assert_no_leakage(prov, test_subjects)
        provenance.append(prov)
    rows, confusion = {}, {}
    for name in ABLATION_ROWS:
        confusion[name], rows[name] = _pooled(cms[name])
    pretrained_on = {"Baseline": None, "Baseline + CL": "training subjects of each fold",
                     "Baseline + CL-Large": sorted(extra)}
    return AblationReport(rows, confusion, pretrained_on, provenance, [list(f) for f in folds])


# ---- cross-subject LOSO ---------------------------------------------------------------

@dataclass
class LosoReport:
    grid: dict  # subject -> method -> MetricsReport
    confusion: dict  # subject -> method -> ConfusionMatrix
    provenance: dict  # subject -> {stage: subjects}

    def f1_grid(self) -> np.ndarray:
        """subjects x methods x stages array of per-class F1."""
        return np.array([[self.grid[s][m].as_floats().f1 for m in LOSO_METHODS] for s in self.grid])

    def table(self) -> str:
        head = f"{'Subject':<10}{'Method':<12}" + "".join(f"{n:>7}" for n in STAGE_NAMES)
        lines = ["Cross-subject protocol: per-stage F1 (%)", head]
        for s, methods in self.grid.items():
            for m in LOSO_METHODS:
                f1 = methods[m].as_floats().f1
                lines.append(f"{s:<10}{m:<12}" + "".join(f"{100 * v:>7.1f}" for v in f1))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "grid": {s: {m: r.to_dict() for m, r in ms.items()} for s, ms in self.grid.items()},
            "confusion": {s: {m: c.counts.tolist() for m, c in ms.items()} for s, ms in self.confusion.items()},
            "provenance": self.provenance,
            "methods": list(LOSO_METHODS),
        }


def train_loso_variants(config: RunConfig, train: EpochDataset):
    """Fine-tuned MViTime, MViTime+ and MViTime++ models plus provenance."""
    prov = {}
    self_model, rep = pretrain_self(train, config.model, config.pretrain, config.augment)
    _record(prov, "pretrain-self", rep)
    cross_model, rep = pretrain_cross_subject(train, config.model, config.pretrain, config.augment,
                                              config.pca_components)
    _record(prov, "pretrain-cross", rep)
    starts = {
        "MViTime": copy.deepcopy(self_model),
        "MViTime+": combine_backbones(copy.deepcopy(self_model), copy.deepcopy(cross_model),
                                      config.combine_alpha, "features", subseed(config.seed, "combine")),
        "MViTime++": combine_backbones(copy.deepcopy(self_model), copy.deepcopy(cross_model),
                                       config.combine_alpha, "full"),
    }
    models = {}
    for name in LOSO_METHODS:
        models[name], rep = finetune(starts[name], train, config.finetune)
        _record(prov, f"{name}/finetune", rep)
    return models, prov


def run_loso_cross_subject(config: RunConfig, data: EpochDataset) -> LosoReport:
    """Hold out each requested subject in turn and compare the three variants."""
    held_out = list(config.held_out) or data.subject_ids()
    grid, confusion, provenance = {}, {}, {}
    for subject in held_out:
        train, test = loso_split(data, subject)
        models, prov = train_loso_variants(config, train)
        assert_no_leakage(prov, [subject])
        grid[subject], confusion[subject] = {}, {}
        for name in LOSO_METHODS:
            confusion[subject][name], grid[subject][name] = evaluate(models[name], test)
        provenance[subject] = prov
    return LosoReport(grid, confusion, provenance)


# ---- artifacts -----------------------------------------------------------------------------

def write_json(path, payload: dict) -> None:
    """Write-then-rename so a failed run leaves no partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(path)


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_study(directory, stem: str, report, config: RunConfig) -> None:
    """JSON and text outputs of an ablation or LOSO report, stamped with digest and seed."""
    stamp = {"config_digest": config.digest(), "seed": config.seed}
    write_json(Path(directory) / f"{stem}.json", {**report.to_dict(), **stamp})
    write_text(Path(directory) / f"{stem}.txt",
               report.table() + f"\n\nconfig {stamp['config_digest']}  seed {stamp['seed']}\n")
