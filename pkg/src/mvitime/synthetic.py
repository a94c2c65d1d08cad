"""Synthetic sleep-like recordings for tests and smoke runs.

Each stage gets a characteristic rhythm (in cycles per epoch) and each
subject a small frequency/amplitude offset, so both stage and subject
structure are learnable.
"""

from __future__ import annotations

import numpy as np

from .ingest import EpochDataset, SleepStage

# cycles per epoch, amplitude
_STAGE_RHYTHM = {
    SleepStage.W: (40.0, 0.6),
    SleepStage.S1: (22.0, 0.8),
    SleepStage.S2: (14.0, 1.0),
    SleepStage.S3: (4.0, 2.0),
    SleepStage.REM: (28.0, 0.9),
}


def stage_signal(stage: SleepStage, length: int, rng: np.random.Generator,
                 subject_shift: float = 0.0, noise: float = 0.3, random_phase: bool = True) -> np.ndarray:
    cycles, amp = _STAGE_RHYTHM[SleepStage(stage)]
    t = np.arange(length) / length
    phase = rng.uniform(0, 2 * np.pi) if random_phase else 0.0
    x = amp * np.sin(2 * np.pi * cycles * (1 + subject_shift) * t + phase)
    return x + noise * rng.standard_normal(length)


def make_dataset(n_subjects: int = 3, epochs_per_stage: int = 4, length: int = 256,
                 seed: int = 0, noise: float = 0.3, random_phase: bool = True,
                 sample_rate_hz: float | None = None) -> EpochDataset:
    """Subjects ``SC400``, ``SC401``, ... each with every stage represented."""
    rng = np.random.default_rng(seed)
    xs, ys, subs, recs, starts = [], [], [], [], []
    for s in range(n_subjects):
        sid = f"SC4{s:02d}"
        shift = 0.08 * (s - (n_subjects - 1) / 2) / max(n_subjects, 1)
        stages = [st for st in SleepStage for _ in range(epochs_per_stage)]
        for k, st in enumerate(stages):
            xs.append(stage_signal(st, length, rng, shift, noise, random_phase))
            ys.append(int(st))
            subs.append(sid)
            recs.append(sid + "1")
            starts.append(30.0 * k)
    return EpochDataset(
        x=np.asarray(xs, dtype=np.float32),
        y=np.asarray(ys, dtype=np.int64),
        subjects=np.asarray(subs),
        recordings=np.asarray(recs),
        start_s=np.asarray(starts),
        sample_rate_hz=sample_rate_hz if sample_rate_hz is not None else length / 30.0,
    )


def instance_signals(n: int = 64, length: int = 256, seed: int = 0) -> EpochDataset:
    """Unlabelled epochs that differ in offset, amplitude and wave shape.

    Those attributes survive both cropping and permutation, which makes the
    set a clean target for instance discrimination.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    xs = []
    for _ in range(n):
        offset, amp = rng.uniform(-3, 3), rng.uniform(0.3, 3)
        freq, gamma, asym = rng.uniform(40, 100), rng.uniform(0.2, 3.0), rng.uniform(0.3, 1.0)
        u = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        w = np.sign(u) * np.abs(u) ** gamma
        w = np.where(w > 0, w, asym * w)
        xs.append(offset + amp * w + 0.05 * rng.standard_normal(length))
    return EpochDataset(
        x=np.asarray(xs, dtype=np.float32),
        y=np.zeros(n, dtype=np.int64),
        subjects=np.array([f"I{i:03d}" for i in range(n)]),
        recordings=np.array([f"I{i:03d}" for i in range(n)]),
        start_s=np.zeros(n),
        sample_rate_hz=length / 30.0,
    )
