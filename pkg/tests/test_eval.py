import json
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import confusion_counts

from mvitime.errors import ConfigMismatch, EmptyMatrix, LengthMismatch, UnknownSubject
from mvitime.eval import (
    ConfusionMatrix,
    confusion_matrix,
    evaluate,
    format_table,
    loso_split,
    metrics,
    predict,
    subject_folds,
    write_outputs,
)
from mvitime.model import build_model, tiny_config
from mvitime.synthetic import make_dataset


def _embed(small):
    m = np.zeros((5, 5), dtype=int)
    small = np.asarray(small)
    m[: len(small), : len(small)] = small
    return ConfusionMatrix(m)


def test_confusion_matrix_basics():
    ref = [0, 1, 2, 3, 4, 4]
    assert np.array_equal(confusion_matrix(ref, ref).counts, np.diag([1, 1, 1, 1, 2]))
    cm = confusion_matrix([0] * 6, ref).counts
    assert np.all(cm[:, 1:] == 0) and cm[:, 0].sum() == 6


def test_confusion_matrix_counting_oracle():
    rng = np.random.default_rng(0)
    pred, ref = rng.integers(0, 5, 100), rng.integers(0, 5, 100)
    assert confusion_matrix(pred, ref).counts.tolist() == confusion_counts(pred, ref)


def test_confusion_matrix_errors():
    with pytest.raises(LengthMismatch):
        confusion_matrix([0, 1], [0])
    with pytest.raises(LengthMismatch):
        confusion_matrix([], [])
    with pytest.raises(ValueError):
        confusion_matrix([5], [0])


def test_metrics_perfect():
    r = metrics(ConfusionMatrix(2 * np.eye(5, dtype=int)), exact=True)
    assert r.accuracy == 1 and all(f == 1 for f in r.f1) and r.macro_f1 == 1


def test_metrics_binary_collapsed():
    r = metrics(_embed([[2, 1], [1, 2]]), exact=True)
    assert r.accuracy == Fraction(4, 6)
    assert r.f1[:2] == [Fraction(2, 3), Fraction(2, 3)]
    assert r.zero_support == [2, 3, 4]
    assert r.macro_f1 == Fraction(2, 3)


def test_metrics_zero_support_flag_and_macro():
    cm = np.diag([3, 0, 2, 4, 1])
    cm[0, 1] = 2  # S1 predicted but never scored
    r = metrics(ConfusionMatrix(cm), exact=True)
    assert r.zero_support == [1]
    assert r.f1[1] == 0 and r.support[1] == 0
    others = [r.f1[k] for k in (0, 2, 3, 4)]
    assert r.macro_f1 == sum(others) / 4


def test_metrics_empty():
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix(np.zeros((5, 5), dtype=int)))


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.eye(5))


matrices = st.lists(st.integers(0, 30), min_size=25, max_size=25).map(lambda v: np.array(v).reshape(5, 5)).filter(
    lambda m: m.sum() > 0)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_metric_properties(m):
    r = metrics(ConfusionMatrix(m), exact=True)
    assert r.accuracy == Fraction(int(np.trace(m)), int(m.sum()))
    for p, rc, f in zip(r.precision, r.recall, r.f1):
        assert min(p, rc) <= f <= max(p, rc)
        assert 0 <= f <= 1
    supported = [f for k, f in enumerate(r.f1) if k not in r.zero_support]
    assert r.macro_f1 == sum(supported, Fraction(0)) / len(supported)


@settings(max_examples=100, deadline=None)
@given(matrices, st.permutations(range(5)))
def test_relabelling_invariance(m, perm):
    perm = np.asarray(perm)
    relabelled = np.empty_like(m)
    relabelled[np.ix_(perm, perm)] = m
    a, b = metrics(ConfusionMatrix(m), exact=True), metrics(ConfusionMatrix(relabelled), exact=True)
    assert a.accuracy == b.accuracy and a.macro_f1 == b.macro_f1
    assert [a.f1[k] for k in range(5)] == [b.f1[perm[k]] for k in range(5)]


def test_report_layout():
    r = metrics(ConfusionMatrix(np.diag([1, 2, 3, 4, 5])))
    assert len(r.row()) == 7
    table = format_table({"MViTime": r})
    assert table.splitlines()[0].split() == ["Acc", "F1", "W", "S1", "S2", "S3", "REM"]
    assert list(r.to_dict()["per_class"]) == ["W", "S1", "S2", "S3", "REM"]


class _AlwaysWake(torch.nn.Module):
    def __init__(self, length):
        super().__init__()
        self.config = tiny_config(length)
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def logits(self, x):
        out = torch.zeros(len(x), 5)
        out[:, 0] = 1
        return out


def test_always_wake_on_balanced_data():
    data = make_dataset(2, 4, 16, seed=0)
    cm, r = evaluate(_AlwaysWake(16), data)
    assert r.accuracy == pytest.approx(0.2)
    assert cm.counts[:, 0].sum() == len(data)


def test_tie_breaks_to_lowest_index():
    class Tied(_AlwaysWake):
        def logits(self, x):
            return torch.ones(len(x), 5)

    assert np.all(predict(Tied(8), np.zeros((3, 8))) == 0)


def test_evaluate_order_invariance_and_loop_oracle():
    data = make_dataset(2, 2, 32, seed=3)
    model = build_model(tiny_config(32), 0)
    cm, r = evaluate(model, data)
    perm = np.random.default_rng(0).permutation(len(data))
    cm2, r2 = evaluate(model, data.select(perm))
    assert np.array_equal(cm.counts, cm2.counts) and r.to_dict() == r2.to_dict()
    loop = np.zeros((5, 5), dtype=int)
    with torch.no_grad():
        for x, y in zip(data.x, data.y):
            loop[y, int(torch.argmax(model.logits(torch.tensor(x)[None, None])))] += 1
    assert np.array_equal(cm.counts, loop)


def test_evaluate_config_mismatch():
    with pytest.raises(ConfigMismatch):
        evaluate(_AlwaysWake(32), make_dataset(1, 1, 16))


def test_loso_split():
    data = make_dataset(3, 2, 16, seed=0)
    train, test = loso_split(data, "SC401")
    assert set(train.subjects) == {"SC400", "SC402"} and set(test.subjects) == {"SC401"}
    assert len(train) + len(test) == len(data)
    with pytest.raises(UnknownSubject):
        loso_split(data, "SC499")


def test_subject_folds():
    folds = subject_folds([f"S{i:02d}" for i in range(20)], 20)
    assert len(folds) == 20 and all(len(f) == 1 for f in folds)
    folds = subject_folds(["a", "b", "c", "d", "e"], 2)
    assert sorted(sum(folds, [])) == ["a", "b", "c", "d", "e"]


def test_write_outputs(tmp_path):
    pytest.importorskip("matplotlib")
    cm = ConfusionMatrix(np.diag([1, 2, 3, 4, 5]) + 1)
    write_outputs(tmp_path, "ev", cm, metrics(cm), {"seed": 3, "config_digest": "abc"}, heatmap=True)
    payload = json.loads((tmp_path / "ev.json").read_text())
    assert payload["seed"] == 3 and payload["confusion_matrix"] == cm.counts.tolist()
    assert (tmp_path / "ev_confusion.csv").read_text().splitlines()[0] == "reference\\predicted,W,S1,S2,S3,REM"
    assert (tmp_path / "ev_confusion.png").stat().st_size > 0
    assert not list(tmp_path.glob("*.tmp*"))
