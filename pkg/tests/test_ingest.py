import json
import warnings

import numpy as np
import pytest
from builders import sleep_recording

from mvitime import edf
from mvitime.errors import ChannelNotFound, CoverageGap
from mvitime.ingest import (
    REFERENCE_COUNTS,
    AllWakeWarning,
    Epoch,
    EpochDataset,
    HypnogramEntry,
    SegmentReport,
    SleepStage,
    dataset_summary,
    load_directory,
    map_stage,
    segment_epochs,
    select_channel,
    sleep_edf_ids,
    subset_subjects,
    reference_count_diff,
    trim_wake,
)


@pytest.mark.parametrize("label, stage", [
    ("Sleep stage W", SleepStage.W), ("Sleep stage 1", SleepStage.S1), ("Sleep stage 2", SleepStage.S2),
    ("Sleep stage 3", SleepStage.S3), ("Sleep stage 4", SleepStage.S3), ("Sleep stage R", SleepStage.REM),
    ("W", SleepStage.W), ("4", SleepStage.S3),
])
def test_map_stage(label, stage):
    assert map_stage(label) is stage


@pytest.mark.parametrize("label", ["Movement time", "Sleep stage ?", "?", "Lights off", ""])
def test_unmappable_labels(label):
    assert map_stage(label) is None


def test_exactly_five_stages():
    assert len(SleepStage) == 5


def _signal(seconds, fs=100):
    return edf.SignalRecord("SC400", "SC4001", "EEG Fpz-Cz", fs, np.arange(seconds * fs, dtype=float))


def test_segment_example():
    hyp = [HypnogramEntry(0, 60, "Sleep stage W"), HypnogramEntry(60, 30, "Sleep stage 2")]
    epochs = segment_epochs(_signal(90), hyp)
    assert [e.stage for e in epochs] == [SleepStage.W, SleepStage.W, SleepStage.S2]
    assert all(len(e.samples) == 3000 for e in epochs)
    assert [e.start_s for e in epochs] == [0, 30, 60]
    # contiguous and non-overlapping
    assert epochs[1].samples[0] == epochs[0].samples[-1] + 1


def test_unknown_span_emits_nothing_and_is_counted():
    report = SegmentReport()
    hyp = [HypnogramEntry(0, 30, "Sleep stage ?"), HypnogramEntry(30, 30, "Sleep stage 1")]
    epochs = segment_epochs(_signal(60), hyp, report=report)
    assert [e.stage for e in epochs] == [SleepStage.S1]
    assert report.excluded["Sleep stage ?"] == 1


def test_coverage_gap():
    hyp = [HypnogramEntry(0, 90, "Sleep stage W")]
    with pytest.raises(CoverageGap):
        segment_epochs(_signal(60), hyp)
    report = SegmentReport()
    assert len(segment_epochs(_signal(60), hyp, on_gap="truncate", report=report)) == 2
    assert report.truncated_epochs == 1


def test_unmappable_tail_past_signal_is_not_a_gap():
    hyp = [HypnogramEntry(0, 30, "Sleep stage W"), HypnogramEntry(30, 600, "Sleep stage ?")]
    assert len(segment_epochs(_signal(30), hyp)) == 1


def _night(before, sleep, after):
    stages = [SleepStage.W] * before + [SleepStage.S2] * sleep + [SleepStage.W] * after
    return [Epoch("s", 30.0 * i, np.zeros(3), st) for i, st in enumerate(stages)]


def test_trim_wake_margin_30_min():
    assert len(trim_wake(_night(100, 10, 100), 30)) == 130


def test_trim_wake_zero_margin():
    kept = trim_wake(_night(100, 10, 100), 0)
    assert len(kept) == 10
    assert all(e.stage == SleepStage.S2 for e in kept)


def test_trim_wake_without_wake_is_noop():
    night = _night(0, 7, 0)
    assert trim_wake(night, 30) == night


def test_trim_wake_all_wake_warns():
    night = _night(5, 0, 0)
    with pytest.warns(AllWakeWarning):
        assert trim_wake(night, 30) == night


def test_dataset_summary():
    assert all(c == 0 for c, _ in dataset_summary([]).values())
    s = dataset_summary([0, 0, 4, 4])
    assert s[SleepStage.W] == (2, 0.5)
    assert s[SleepStage.REM] == (2, 0.5)
    stages = np.random.default_rng(0).integers(0, 5, 1000)
    s = dataset_summary(stages)
    assert sum(c for c, _ in s.values()) == 1000
    assert abs(sum(f for _, f in s.values()) - 1) < 1e-9


def test_reference_count_totals():
    assert sum(REFERENCE_COUNTS["EDF-20"]) == 42308
    assert sum(REFERENCE_COUNTS["EDF-78"]) == 195479
    assert abs(REFERENCE_COUNTS["EDF-78"][0] / 195479 - 0.337) < 5e-4


def test_sleep_edf_ids_and_subsets():
    assert sleep_edf_ids("SC4012E0-PSG.edf") == ("SC401", "SC4012")
    ids = ["SC400", "SC419", "SC420", "SC482"]
    assert subset_subjects("EDF-20", ids) == ["SC400", "SC419"]
    assert subset_subjects("EDF-78", ids) == ids
    assert subset_subjects("SC420, SC482", ids) == ["SC420", "SC482"]


def test_select_channel():
    recs = [edf.SignalRecord("s", "r", "EEG Fpz-Cz", 100, np.zeros(1)),
            edf.SignalRecord("s", "r", "EEG Pz-Oz", 100, np.zeros(1))]
    assert select_channel(recs, "EEG Pz-Oz").channel_label == "EEG Pz-Oz"
    assert select_channel(recs, "fpz-cz").channel_label == "EEG Fpz-Cz"
    with pytest.raises(ChannelNotFound):
        select_channel(recs, "EOG")


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    epochs = [Epoch(f"S{i % 2}", 30.0 * i, rng.standard_normal(10), SleepStage(i % 5), f"R{i % 2}")
              for i in range(12)]
    data = EpochDataset.from_epochs(epochs, 100 / 3)
    data.save(tmp_path / "d.npz", {"seed": 3})
    back = EpochDataset.load(tmp_path / "d.npz")
    assert np.array_equal(back.x, data.x) and np.array_equal(back.y, data.y)
    assert back.subject_ids() == ["S0", "S1"]
    with np.load(tmp_path / "d.npz") as z:
        assert json.loads(str(z["metadata"])) == {"seed": 3}
    assert len(data.only_subjects(["S1"])) == 6


def test_load_directory(tmp_path):
    stages = ["W"] * 70 + ["1", "2", "3", "4", "R", "2"] + ["W"] * 70
    for sid in ("SC4001", "SC4011"):
        psg, hyp = sleep_recording(stages, fs=10, seed=int(sid[-2]),
                                   extra_labels=[edf.Annotation(30.0 * len(stages), 30.0, "Sleep stage ?")])
        (tmp_path / f"{sid}E0-PSG.edf").write_bytes(psg)
        (tmp_path / f"{sid}EC-Hypnogram.edf").write_bytes(hyp)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        data, summaries = load_directory(tmp_path, trim_min=30, subset="EDF-20")
    assert data.subject_ids() == ["SC400", "SC401"]
    assert data.epoch_length == 300
    # 60 wake epochs kept on each side of the 6-epoch sleep period
    assert len(data) == 2 * (60 + 6 + 60)
    assert summaries[0].counts == {"W": 120, "S1": 1, "S2": 2, "S3": 2, "REM": 1}
    assert summaries[0].excluded == {"Sleep stage ?": 1}
    diff = reference_count_diff(data, "EDF-20")
    assert diff["observed_total"] == len(data)
