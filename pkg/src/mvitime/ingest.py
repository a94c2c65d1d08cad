"""Sleep-EDF ingestion: stage mapping, 30-s segmentation, wake trimming."""

from __future__ import annotations

import enum
import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import edf
from .errors import ChannelNotFound, CoverageGap, SampleRateMismatch

EPOCH_SECONDS = 30
DEFAULT_CHANNEL = "EEG Fpz-Cz"

# Published per-class epoch counts for the two standard Sleep-EDF subsets.
REFERENCE_COUNTS = {
    "EDF-20": (8285, 2804, 17799, 5703, 7717),
    "EDF-78": (65951, 21522, 69132, 13039, 25835),
}


class SleepStage(enum.IntEnum):
    W = 0
    S1 = 1
    S2 = 2
    S3 = 3
    REM = 4

    @property
    def short(self) -> str:
        return self.name


STAGE_ORDER = tuple(SleepStage)
STAGE_NAMES = tuple(s.name for s in SleepStage)

_RK_CODES = {
    "W": SleepStage.W,
    "1": SleepStage.S1,
    "2": SleepStage.S2,
    "3": SleepStage.S3,
    "4": SleepStage.S3,
    "R": SleepStage.REM,
}


def map_stage(raw_label: str) -> SleepStage | None:
    """Map an R&K hypnogram label onto the five-class scheme.

    Stage 4 merges into S3; movement time and unscored ("?") return None.
    """
    label = raw_label.strip()
    if label.lower().startswith("sleep stage "):
        label = label[len("sleep stage "):].strip()
    return _RK_CODES.get(label.upper())


@dataclass(frozen=True)
class HypnogramEntry:
    onset_s: float
    duration_s: float
    raw_label: str


@dataclass(frozen=True)
class Epoch:
    subject_id: str
    start_s: float
    samples: np.ndarray = field(repr=False)
    stage: SleepStage
    recording_id: str = ""


def hypnogram_from_annotations(annotations: Iterable[edf.Annotation]) -> list[HypnogramEntry]:
    entries = [
        HypnogramEntry(a.onset_s, a.duration_s, a.label)
        for a in annotations
        if a.duration_s > 0
    ]
    return sorted(entries, key=lambda e: e.onset_s)


@dataclass
class SegmentReport:
    """What segment_epochs left out, by raw label."""

    excluded: Counter = field(default_factory=Counter)
    truncated_epochs: int = 0


def segment_epochs(
    signal: edf.SignalRecord,
    hypnogram: Sequence[HypnogramEntry],
    on_gap: str = "raise",
    report: SegmentReport | None = None,
) -> list[Epoch]:
    """Cut a signal into labelled 30-s epochs following the hypnogram.

    Windows whose label has no stage mapping are skipped (and counted in
    ``report``). A mappable window running past the end of the signal raises
    :class:`CoverageGap`, or is dropped when ``on_gap="truncate"``.
    """
    epoch_len = signal.sample_rate_hz * EPOCH_SECONDS
    if abs(epoch_len - round(epoch_len)) > 1e-9:
        raise ValueError(
            f"sample rate {signal.sample_rate_hz} Hz gives a non-integer 30-s epoch"
        )
    epoch_len = int(round(epoch_len))
    n_total = len(signal.samples)
    report = report if report is not None else SegmentReport()

    epochs = []
    for entry in hypnogram:
        n_windows = int(entry.duration_s // EPOCH_SECONDS)
        stage = map_stage(entry.raw_label)
        if stage is None:
            report.excluded[entry.raw_label] += n_windows
            continue
        for k in range(n_windows):
            start_s = entry.onset_s + k * EPOCH_SECONDS
            first = int(round(start_s * signal.sample_rate_hz))
            if first + epoch_len > n_total:
                if on_gap == "truncate":
                    report.truncated_epochs += 1
                    continue
                raise CoverageGap(
                    f"{signal.recording_id or 'signal'}: window at {start_s:.0f} s "
                    f"ends past the signal ({n_total / signal.sample_rate_hz:.0f} s)"
                )
            samples = np.array(signal.samples[first:first + epoch_len])
            samples.setflags(write=False)
            epochs.append(Epoch(
                subject_id=signal.subject_id,
                start_s=float(start_s),
                samples=samples,
                stage=stage,
                recording_id=signal.recording_id,
            ))
    return epochs


class AllWakeWarning(UserWarning):
    pass


def trim_wake(epochs: Sequence[Epoch], margin_min: int) -> list[Epoch]:
    """Keep the sleep period plus ``margin_min`` minutes of epochs either side.

    Operates on one recording in temporal order. Input without any sleep
    epoch is returned unchanged, with an :class:`AllWakeWarning`.
    """
    sleep_idx = [i for i, e in enumerate(epochs) if e.stage != SleepStage.W]
    if not sleep_idx:
        if epochs:
            warnings.warn("no sleep epochs; nothing trimmed", AllWakeWarning, stacklevel=2)
        return list(epochs)
    margin = margin_min * 60 // EPOCH_SECONDS
    lo = max(sleep_idx[0] - margin, 0)
    hi = min(sleep_idx[-1] + margin, len(epochs) - 1)
    return list(epochs[lo:hi + 1])


def dataset_summary(stages: Iterable) -> dict[SleepStage, tuple[int, float]]:
    """Per-stage (count, fraction). Accepts epochs or bare stage values."""
    counts = Counter()
    for item in stages:
        stage = item.stage if isinstance(item, Epoch) else SleepStage(int(item))
        counts[stage] += 1
    total = sum(counts.values())
    return {
        s: (counts[s], counts[s] / total if total else 0.0)
        for s in SleepStage
    }


# ---- array-backed dataset ----------------------------------------------------------

@dataclass
class EpochDataset:
    """Stacked epochs: the form every training and evaluation stage consumes.

    ``subjects`` and ``recordings`` are the provenance tags carried from
    ingestion through to every downstream consumer.
    """

    x: np.ndarray
    y: np.ndarray
    subjects: np.ndarray
    recordings: np.ndarray
    start_s: np.ndarray
    sample_rate_hz: float = 100.0

    def __post_init__(self):
        n = len(self.x)
        for name in ("y", "subjects", "recordings", "start_s"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, x has {n}")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def epoch_length(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_epochs(cls, epochs: Sequence[Epoch], sample_rate_hz: float) -> "EpochDataset":
        if not epochs:
            raise ValueError("no epochs")
        return cls(
            x=np.stack([e.samples for e in epochs]).astype(np.float32),
            y=np.array([int(e.stage) for e in epochs], dtype=np.int64),
            subjects=np.array([e.subject_id for e in epochs]),
            recordings=np.array([e.recording_id for e in epochs]),
            start_s=np.array([e.start_s for e in epochs], dtype=np.float64),
            sample_rate_hz=sample_rate_hz,
        )

    def to_epochs(self) -> list[Epoch]:
        return [
            Epoch(str(s), float(t), x, SleepStage(int(y)), str(r))
            for x, y, s, r, t in zip(self.x, self.y, self.subjects, self.recordings, self.start_s)
        ]

    def select(self, mask) -> "EpochDataset":
        mask = np.asarray(mask)
        return EpochDataset(
            self.x[mask], self.y[mask], self.subjects[mask],
            self.recordings[mask], self.start_s[mask], self.sample_rate_hz,
        )

    def subject_ids(self) -> list[str]:
        return sorted(set(self.subjects.tolist()))

    def only_subjects(self, subjects: Iterable[str]) -> "EpochDataset":
        return self.select(np.isin(self.subjects, list(subjects)))

    def save(self, path, metadata: dict | None = None) -> None:
        """Write an ``.npz`` atomically; ``metadata`` is stored as a JSON string."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(
                fh, x=self.x, y=self.y, subjects=self.subjects,
                recordings=self.recordings, start_s=self.start_s,
                sample_rate_hz=np.float64(self.sample_rate_hz),
                metadata=np.array(json.dumps(metadata or {}, sort_keys=True)),
            )
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "EpochDataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                z["x"], z["y"], z["subjects"], z["recordings"], z["start_s"],
                float(z["sample_rate_hz"]),
            )


# ---- Sleep-EDF directory loading -------------------------------------------------

# SC4ssNE0-PSG.edf / SC4ssNXX-Hypnogram.edf; ss = subject, N = night.
_SC_NAME = re.compile(r"^(SC4(\d\d))(\d)")


def sleep_edf_ids(filename: str) -> tuple[str, str]:
    """(subject_id, recording_id) for a Sleep Cassette file name."""
    m = _SC_NAME.match(Path(filename).name)
    if m is None:
        stem = Path(filename).name.split("-")[0]
        return stem[:5], stem[:6]
    return m.group(1), m.group(1) + m.group(3)


def subset_subjects(subset: str, available: Iterable[str]) -> list[str]:
    """Subject ids for ``EDF-20`` (first 20 SC subjects), ``EDF-78`` (all)."""
    available = sorted(set(available))
    if subset == "EDF-20":
        return [s for s in available if s.startswith("SC4") and int(s[3:5]) < 20]
    if subset == "EDF-78":
        return [s for s in available if s.startswith("SC4")]
    wanted = [s.strip() for s in subset.split(",") if s.strip()]
    return [s for s in available if s in wanted]


def find_recordings(data_dir) -> list[tuple[Path, Path]]:
    """Pair ``*-PSG.edf`` files with their ``*-Hypnogram.edf`` files."""
    data_dir = Path(data_dir)
    hyps = {p.name[:6]: p for p in data_dir.glob("*-Hypnogram.edf")}
    pairs = []
    for psg in sorted(data_dir.glob("*-PSG.edf")):
        hyp = hyps.get(psg.name[:6])
        if hyp is not None:
            pairs.append((psg, hyp))
    return pairs


def select_channel(records: Sequence[edf.SignalRecord], channel: str) -> edf.SignalRecord:
    for rec in records:
        if rec.channel_label == channel:
            return rec
    for rec in records:
        if channel.lower() in rec.channel_label.lower():
            return rec
    raise ChannelNotFound(
        f"channel {channel!r} not in {[r.channel_label for r in records]}"
    )


@dataclass
class RecordingSummary:
    subject_id: str
    recording_id: str
    n_epochs: int
    counts: dict
    excluded: dict
    truncated_epochs: int
    trimmed_wake: int


def load_recording(psg_path, hyp_path, channel=DEFAULT_CHANNEL, trim_min=30):
    subject_id, recording_id = sleep_edf_ids(Path(psg_path).name)
    _, records = edf.read_edf_file(psg_path, subject_id, recording_id)
    signal = select_channel(records, channel)
    hypnogram = hypnogram_from_annotations(edf.read_annotations_file(hyp_path))
    report = SegmentReport()
    epochs = segment_epochs(signal, hypnogram, on_gap="truncate", report=report)
    before = len(epochs)
    if trim_min is not None:
        epochs = trim_wake(epochs, trim_min)
    summary = RecordingSummary(
        subject_id=subject_id,
        recording_id=recording_id,
        n_epochs=len(epochs),
        counts={s.name: c for s, (c, _) in dataset_summary(epochs).items()},
        excluded=dict(report.excluded),
        truncated_epochs=report.truncated_epochs,
        trimmed_wake=before - len(epochs),
    )
    return epochs, signal.sample_rate_hz, summary


def load_directory(data_dir, channel=DEFAULT_CHANNEL, trim_min=30, subset="EDF-78"):
    """Ingest every paired recording of the chosen subset.

    Recordings must share one sample rate; mismatches are rejected rather
    than resampled.
    """
    pairs = find_recordings(data_dir)
    wanted = set(subset_subjects(subset, [sleep_edf_ids(p.name)[0] for p, _ in pairs]))
    all_epochs, summaries, rate = [], [], None
    for psg, hyp in pairs:
        if sleep_edf_ids(psg.name)[0] not in wanted:
            continue
        epochs, fs, summary = load_recording(psg, hyp, channel, trim_min)
        if rate is None:
            rate = fs
        elif fs != rate:
            raise SampleRateMismatch(f"{psg.name}: {fs} Hz, expected {rate} Hz")
        all_epochs.extend(epochs)
        summaries.append(summary)
    if not all_epochs:
        raise ChannelNotFound(f"no usable recordings under {data_dir} for subset {subset}")
    return EpochDataset.from_epochs(all_epochs, rate), summaries


def reference_count_diff(dataset: EpochDataset, subset: str) -> dict | None:
    ref = REFERENCE_COUNTS.get(subset)
    if ref is None:
        return None
    got = [c for c, _ in dataset_summary(dataset.y).values()]
    return {
        "stages": list(STAGE_NAMES),
        "reference": list(ref),
        "observed": got,
        "difference": [g - r for g, r in zip(got, ref)],
        "reference_total": sum(ref),
        "observed_total": sum(got),
    }


def build_manifest(dataset: EpochDataset, summaries, subset: str, channel: str, trim_min) -> dict:
    summary = dataset_summary(dataset.y)
    per_subject = {}
    for rs in summaries:
        entry = per_subject.setdefault(rs.subject_id, {"recordings": [], "n_epochs": 0})
        entry["recordings"].append({
            "recording_id": rs.recording_id,
            "n_epochs": rs.n_epochs,
            "counts": rs.counts,
            "excluded": rs.excluded,
            "truncated_epochs": rs.truncated_epochs,
            "trimmed_wake": rs.trimmed_wake,
        })
        entry["n_epochs"] += rs.n_epochs
    exclusions = Counter()
    for rs in summaries:
        exclusions.update(rs.excluded)
    return {
        "subset": subset,
        "channel": channel,
        "trim_min": trim_min,
        "sample_rate_hz": dataset.sample_rate_hz,
        "epoch_length": dataset.epoch_length,
        "total_epochs": len(dataset),
        "class_distribution": {
            s.name: {"count": c, "fraction": f} for s, (c, f) in summary.items()
        },
        "exclusions": dict(exclusions),
        "subjects": per_subject,
        "reference_count_diff": reference_count_diff(dataset, subset),
    }
