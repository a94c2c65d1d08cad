"""Minimal EDF / EDF+ reader and writer.

Only the subset needed for Sleep-EDF recordings is supported: contiguous
records, 16-bit little-endian samples and "EDF Annotations" signals holding
time-stamped annotation lists (TALs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScale, MalformedHeader, TruncatedData

ANNOTATION_LABEL = "EDF Annotations"

# (name, width) of the fixed part, then the per-signal fields.
_FIXED_FIELDS = (
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_data_records", 8),
    ("record_duration_s", 8),
    ("n_signals", 4),
)
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


@dataclass(frozen=True)
class SignalMeta:
    label: str
    samples_per_record: int
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    transducer: str = ""
    physical_dimension: str = "uV"
    prefilter: str = ""
    reserved: str = ""

    @property
    def is_annotation(self) -> bool:
        return self.label == ANNOTATION_LABEL

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        """Map 16-bit digital values onto the physical range.

        Evaluated as a two-point interpolation so that ``digital_min`` and
        ``digital_max`` land on ``physical_min`` and ``physical_max`` exactly.
        """
        w = (np.asarray(digital, dtype=np.float64) - self.digital_min) / (
            self.digital_max - self.digital_min
        )
        return self.physical_min * (1.0 - w) + self.physical_max * w

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        span = self.physical_max - self.physical_min
        d = (np.asarray(physical, dtype=np.float64) - self.physical_min) / span
        d = d * (self.digital_max - self.digital_min) + self.digital_min
        return np.clip(np.rint(d), self.digital_min, self.digital_max).astype("<i2")


@dataclass(frozen=True)
class EdfHeader:
    version: str
    n_data_records: int
    record_duration_s: float
    signals: tuple[SignalMeta, ...]
    patient: str = ""
    recording: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    reserved: str = ""

    @property
    def header_bytes(self) -> int:
        return 256 + 256 * len(self.signals)

    @property
    def record_samples(self) -> int:
        return sum(s.samples_per_record for s in self.signals)

    def sample_rate(self, index: int) -> float:
        return self.signals[index].samples_per_record / self.record_duration_s

    @property
    def is_edf_plus(self) -> bool:
        return self.reserved.startswith("EDF+")


@dataclass(frozen=True)
class SignalRecord:
    subject_id: str
    recording_id: str
    channel_label: str
    sample_rate_hz: float
    samples: np.ndarray = field(repr=False)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class Annotation:
    onset_s: float
    duration_s: float
    label: str


# ---- header ------------------------------------------------------------------

def _ascii(raw: bytes, name: str) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError:
        # Some recorders write latin-1 into free-text fields.
        return raw.decode("latin-1")


def _number(text: str, name: str, kind=float):
    try:
        value = kind(text.strip())
    except ValueError:
        raise MalformedHeader(f"field {name!r} is not numeric: {text!r}") from None
    if kind is float and not math.isfinite(value):
        raise MalformedHeader(f"field {name!r} is not finite: {text!r}")
    return value


def parse_header(data: bytes) -> EdfHeader:
    if len(data) < 256:
        raise MalformedHeader(f"need at least 256 header bytes, got {len(data)}")
    fixed = {}
    pos = 0
    for name, width in _FIXED_FIELDS:
        fixed[name] = _ascii(data[pos:pos + width], name)
        pos += width

    n_signals = _number(fixed["n_signals"], "n_signals", int)
    if n_signals < 1:
        raise MalformedHeader(f"signal count must be positive, got {n_signals}")
    header_bytes = _number(fixed["header_bytes"], "header_bytes", int)
    if header_bytes != 256 + 256 * n_signals:
        raise MalformedHeader(
            f"header length {header_bytes} != 256 + 256 x {n_signals} signals"
        )
    if len(data) < header_bytes:
        raise MalformedHeader(f"header promises {header_bytes} bytes, file has {len(data)}")

    per_signal: dict[str, list[str]] = {}
    for name, width in _SIGNAL_FIELDS:
        values = []
        for _ in range(n_signals):
            values.append(_ascii(data[pos:pos + width], name))
            pos += width
        per_signal[name] = values

    n_records = _number(fixed["n_data_records"], "n_data_records", int)
    if n_records < 0:
        raise MalformedHeader(
            f"n_data_records={n_records}; unknown record counts are not supported"
        )
    duration = _number(fixed["record_duration_s"], "record_duration_s")
    if duration < 0:
        raise MalformedHeader(f"negative record duration {duration}")

    signals = []
    for i in range(n_signals):
        meta = SignalMeta(
            label=per_signal["label"][i].strip(),
            transducer=per_signal["transducer"][i].rstrip(),
            physical_dimension=per_signal["physical_dimension"][i].rstrip(),
            physical_min=_number(per_signal["physical_min"][i], "physical_min"),
            physical_max=_number(per_signal["physical_max"][i], "physical_max"),
            digital_min=_number(per_signal["digital_min"][i], "digital_min", int),
            digital_max=_number(per_signal["digital_max"][i], "digital_max", int),
            prefilter=per_signal["prefilter"][i].rstrip(),
            samples_per_record=_number(
                per_signal["samples_per_record"][i], "samples_per_record", int
            ),
            reserved=per_signal["reserved"][i].rstrip(),
        )
        if meta.samples_per_record <= 0:
            raise MalformedHeader(f"signal {meta.label!r}: samples_per_record must be > 0")
        if meta.digital_min == meta.digital_max:
            raise DegenerateScale(f"signal {meta.label!r}: digital_min == digital_max")
        if meta.digital_min > meta.digital_max:
            raise MalformedHeader(f"signal {meta.label!r}: digital_min > digital_max")
        if meta.physical_min == meta.physical_max:
            raise DegenerateScale(f"signal {meta.label!r}: physical_min == physical_max")
        if not meta.is_annotation and duration <= 0:
            raise MalformedHeader("record duration must be > 0 for ordinary signals")
        signals.append(meta)

    return EdfHeader(
        version=fixed["version"].strip(),
        n_data_records=n_records,
        record_duration_s=duration,
        signals=tuple(signals),
        patient=fixed["patient"].rstrip(),
        recording=fixed["recording"].rstrip(),
        start_date=fixed["start_date"],
        start_time=fixed["start_time"],
        reserved=fixed["reserved"].rstrip(),
    )


# ---- data ----------------------------------------------------------------------

def _record_matrix(header: EdfHeader, data: bytes) -> np.ndarray:
    need = header.header_bytes + 2 * header.record_samples * header.n_data_records
    if len(data) < need:
        raise TruncatedData(f"header promises {need} bytes, file has {len(data)}")
    raw = np.frombuffer(
        data, dtype="<i2", count=header.record_samples * header.n_data_records,
        offset=header.header_bytes,
    )
    return raw.reshape(header.n_data_records, header.record_samples)


def _signal_slices(header: EdfHeader):
    start = 0
    for meta in header.signals:
        yield meta, slice(start, start + meta.samples_per_record)
        start += meta.samples_per_record


def parse_edf(data: bytes, subject_id: str = "", recording_id: str = ""):
    """Parse an EDF/EDF+ byte string.

    Returns the header and one :class:`SignalRecord` per ordinary signal
    (annotation signals are skipped; see :func:`parse_annotations`).
    """
    header = parse_header(data)
    matrix = _record_matrix(header, data)
    records = []
    for meta, cols in _signal_slices(header):
        if meta.is_annotation:
            continue
        digital = matrix[:, cols].reshape(-1)
        records.append(SignalRecord(
            subject_id=subject_id,
            recording_id=recording_id,
            channel_label=meta.label,
            sample_rate_hz=meta.samples_per_record / header.record_duration_s,
            samples=meta.to_physical(digital),
        ))
    return header, records


def _parse_tals(raw: bytes) -> list[Annotation]:
    out = []
    for tal in raw.split(b"\x14\x00"):
        tal = tal.strip(b"\x00")
        if not tal:
            continue
        parts = tal.split(b"\x14")
        stamp = parts[0].decode("latin-1")
        onset, _, duration = stamp.partition("\x15")
        try:
            onset_s = float(onset)
            duration_s = float(duration) if duration else 0.0
        except ValueError:
            raise MalformedHeader(f"unreadable annotation time stamp {stamp!r}") from None
        # First TAL of every record only keeps time; it carries no text.
        for text in parts[1:]:
            if text:
                out.append(Annotation(onset_s, duration_s, text.decode("utf-8")))
    return out


def parse_annotations(data: bytes) -> list[Annotation]:
    """Read every annotation from the EDF+ annotation signals, sorted by onset."""
    header = parse_header(data)
    matrix = _record_matrix(header, data)
    found = []
    for meta, cols in _signal_slices(header):
        if meta.is_annotation:
            for row in matrix[:, cols]:
                found.extend(_parse_tals(row.tobytes()))
    return sorted(found, key=lambda a: a.onset_s)


# ---- writer --------------------------------------------------------------------

def _fmt(value, width: int) -> str:
    if isinstance(value, (int, np.integer)):
        text = str(int(value))
    else:
        value = float(value)
        text = repr(value)
        if text.endswith(".0"):
            text = text[:-2]
        if len(text) > width:
            for digits in range(width, 0, -1):
                text = f"{value:.{digits}g}"
                if len(text) <= width:
                    break
    if len(text) > width:
        raise MalformedHeader(f"value {value!r} does not fit in {width} characters")
    return text


def _field(text: str, width: int) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise MalformedHeader(f"{text!r} does not fit in {width} bytes")
    return raw.ljust(width, b" ")


def format_header(header: EdfHeader) -> bytes:
    sig = header.signals
    parts = [
        _field(header.version, 8),
        _field(header.patient, 80),
        _field(header.recording, 80),
        _field(header.start_date, 8),
        _field(header.start_time, 8),
        _field(str(header.header_bytes), 8),
        _field(header.reserved, 44),
        _field(str(header.n_data_records), 8),
        _field(_fmt(header.record_duration_s, 8), 8),
        _field(str(len(sig)), 4),
    ]
    parts += [_field(s.label, 16) for s in sig]
    parts += [_field(s.transducer, 80) for s in sig]
    parts += [_field(s.physical_dimension, 8) for s in sig]
    parts += [_field(_fmt(s.physical_min, 8), 8) for s in sig]
    parts += [_field(_fmt(s.physical_max, 8), 8) for s in sig]
    parts += [_field(str(s.digital_min), 8) for s in sig]
    parts += [_field(str(s.digital_max), 8) for s in sig]
    parts += [_field(s.prefilter, 80) for s in sig]
    parts += [_field(str(s.samples_per_record), 8) for s in sig]
    parts += [_field(s.reserved, 32) for s in sig]
    out = b"".join(parts)
    assert len(out) == header.header_bytes
    return out


def _fmt_time(t: float) -> str:
    text = repr(float(t))
    if text.endswith(".0"):
        text = text[:-2]
    return text if text.startswith("-") else "+" + text


def _pack_tals(annotations, header: EdfHeader, n_bytes: int) -> list[bytes]:
    """Greedily pack annotations into per-record annotation blocks."""
    pending = list(annotations)
    blocks = []
    for r in range(header.n_data_records):
        block = (_fmt_time(r * header.record_duration_s) + "\x14\x14\x00").encode()
        while pending:
            a = pending[0]
            stamp = _fmt_time(a.onset_s)
            if a.duration_s:
                stamp += "\x15" + _fmt(a.duration_s, 32)
            tal = (stamp + "\x14" + a.label + "\x14\x00").encode("utf-8")
            if len(block) + len(tal) > n_bytes:
                break
            block += tal
            pending.pop(0)
        blocks.append(block.ljust(n_bytes, b"\x00"))
    if pending:
        raise MalformedHeader(
            f"{len(pending)} annotations do not fit in the annotation signal"
        )
    return blocks


def write_edf(header: EdfHeader, records, annotations=()) -> bytes:
    """Serialise a header plus physical-unit signals (and optional annotations).

    ``records`` are matched positionally to the header's ordinary signals.
    Physical samples are quantised back to the nearest digital value.
    """
    ordinary = [m for m in header.signals if not m.is_annotation]
    if len(records) != len(ordinary):
        raise MalformedHeader(f"{len(ordinary)} signals in header, {len(records)} given")
    matrix = np.zeros((header.n_data_records, header.record_samples), dtype="<i2")
    it = iter(records)
    for meta, cols in _signal_slices(header):
        if meta.is_annotation:
            blocks = _pack_tals(annotations, header, 2 * meta.samples_per_record)
            for r, block in enumerate(blocks):
                matrix[r, cols] = np.frombuffer(block, dtype="<i2")
            annotations = ()
            continue
        rec = next(it)
        samples = rec.samples if isinstance(rec, SignalRecord) else rec
        samples = np.asarray(samples)
        expected = meta.samples_per_record * header.n_data_records
        if samples.shape != (expected,):
            raise MalformedHeader(
                f"signal {meta.label!r}: expected {expected} samples, got {samples.shape}"
            )
        matrix[:, cols] = meta.to_digital(samples).reshape(header.n_data_records, -1)
    return format_header(header) + matrix.tobytes()


def read_edf_file(path, subject_id: str = "", recording_id: str = ""):
    with open(path, "rb") as fh:
        return parse_edf(fh.read(), subject_id=subject_id, recording_id=recording_id)


def read_annotations_file(path) -> list[Annotation]:
    with open(path, "rb") as fh:
        return parse_annotations(fh.read())
