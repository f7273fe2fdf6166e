"""Event streams, intensity frames, E<x>-S<y> windowing and event aggregation.

Timestamps are integer microseconds from sequence start. Window arithmetic is
done entirely in integers, with the frame period rounded to whole
microseconds (33333 us at 30 fps).
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

EVT1_MAGIC = b"EVT1"
EVT1_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
LIGHTING = ("normal", "overexposure", "low-light", "hdr")
NUM_CLASSES = 7


class EventParseError(ValueError):
    pass


class EventValidationError(ValueError):
    pass


class ProtocolError(ValueError):
    """A window does not fit in the sequence it is cut from."""


@dataclass(frozen=True)
class EventRecord:
    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Time-ordered events stored column-wise; read-only after construction."""

    def __init__(self, t, x, y, p, sensor_width: int, sensor_height: int, duration: int | None = None):
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise EventValidationError("event columns have different lengths")
        if len(t):
            if t.min() < 0:
                raise EventValidationError("negative timestamp")
            bad = (x < 0) | (x >= sensor_width) | (y < 0) | (y >= sensor_height)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise EventValidationError(
                    f"event {i} at ({x[i]}, {y[i]}) outside {sensor_width}x{sensor_height} sensor"
                )
            if not np.isin(p, (-1, 1)).all():
                raise EventValidationError("polarity must be -1 or +1")
            if np.any(np.diff(t) < 0):
                order = np.argsort(t, kind="stable")
                t, x, y, p = t[order], x[order], y[order], p[order]
        if duration is None:
            duration = int(t[-1]) if len(t) else 0
        if len(t) and t[-1] > duration:
            raise EventValidationError(f"timestamp {t[-1]} beyond stream duration {duration}")
        for arr in (t, x, y, p):
            arr.flags.writeable = False
        self.t, self.x, self.y, self.p = t, x, y, p
        self.sensor_width = int(sensor_width)
        self.sensor_height = int(sensor_height)
        self.duration = int(duration)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[EventRecord]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield EventRecord(*row)

    @property
    def records(self) -> list[EventRecord]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.sensor_width, self.sensor_height, self.duration)
            == (other.sensor_width, other.sensor_height, other.duration)
            and all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))
        )

    def columns(self) -> tuple[np.ndarray, ...]:
        return self.t, self.x, self.y, self.p

    def between(self, t0: int, t1: int) -> "EventStream":
        """Events with t0 <= t < t1."""
        i0, i1 = np.searchsorted(self.t, [t0, t1], side="left")
        return EventStream(
            self.t[i0:i1], self.x[i0:i1], self.y[i0:i1], self.p[i0:i1],
            self.sensor_width, self.sensor_height, self.duration,
        )

    @classmethod
    def empty(cls, sensor_width: int, sensor_height: int, duration: int = 0) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, sensor_width, sensor_height, duration)


# parsing -------------------------------------------------------------------------


def _canonical_polarity(p: np.ndarray) -> np.ndarray:
    return np.where(p == 0, -1, p)


def parse_event_stream(source: bytes | str, format: str, sensor_width: int, sensor_height: int,
                       duration: int | None = None) -> EventStream:
    """Parse a CSV (``t_us,x,y,p``) or EVT1 binary blob.

    Polarity 0 reads as -1. Out-of-order input is stably sorted by time.
    """
    if format == "csv":
        cols = _parse_csv(source.decode("ascii") if isinstance(source, bytes) else source)
    elif format in ("evt1", "evt1-binary"):
        cols = _parse_evt1(source.encode("latin-1") if isinstance(source, str) else source)
    else:
        raise ValueError(f"unknown event format {format!r}")
    t, x, y, p = cols
    return EventStream(t, x, y, _canonical_polarity(p), sensor_width, sensor_height, duration)


def _parse_csv(text: str):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventParseError(f"line {lineno}: expected 4 fields 't_us,x,y,p', got {line!r}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventParseError(f"line {lineno}: non-integer field in {line!r}") from None
        if p not in (-1, 0, 1):
            raise EventParseError(f"line {lineno}: polarity {p} not in {{-1, 0, 1}}")
        if t < 0:
            raise EventParseError(f"line {lineno}: negative timestamp {t}")
        rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def _parse_evt1(blob: bytes):
    if blob[:4] != EVT1_MAGIC:
        raise EventParseError("offset 0: missing EVT1 magic bytes")
    body = len(blob) - 4
    if body % EVT1_DTYPE.itemsize:
        offset = 4 + (body // EVT1_DTYPE.itemsize) * EVT1_DTYPE.itemsize
        raise EventParseError(f"offset {offset}: truncated record ({body % EVT1_DTYPE.itemsize} trailing bytes)")
    rec = np.frombuffer(blob, dtype=EVT1_DTYPE, offset=4)
    p = rec["p"].astype(np.int64)
    bad = ~np.isin(p, (-1, 0, 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EventParseError(f"offset {4 + i * EVT1_DTYPE.itemsize}: polarity {p[i]} not in {{-1, 0, 1}}")
    return rec["t"].astype(np.int64), rec["x"].astype(np.int64), rec["y"].astype(np.int64), p


def serialize_event_stream(stream: EventStream, format: str) -> bytes:
    if format == "csv":
        buf = io.StringIO()
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            buf.write(f"{t},{x},{y},{p}\n")
        return buf.getvalue().encode("ascii")
    if format in ("evt1", "evt1-binary"):
        rec = np.zeros(len(stream), dtype=EVT1_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        return EVT1_MAGIC + rec.tobytes()
    raise ValueError(f"unknown event format {format!r}")


# frames and windows --------------------------------------------------------------


@dataclass(frozen=True)
class IntensityFrame:
    pixels: np.ndarray
    timestamp: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"intensity frame must be 2-D, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("intensity values must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class WindowSpec:
    x: int
    y: int = 0
    frame_period: float = 1 / 30

    def __post_init__(self):
        if self.x < 1:
            raise ValueError(f"window needs at least one event frame, got x={self.x}")
        if self.y < 0:
            raise ValueError(f"skip count must be >= 0, got y={self.y}")
        if not self.frame_period > 0:
            raise ValueError("frame_period must be positive")

    def __str__(self) -> str:
        return f"E{self.x}-S{self.y}"

    @property
    def span_frames(self) -> int:
        return self.x + (self.x - 1) * self.y

    @property
    def frame_period_us(self) -> int:
        return round(self.frame_period * 1_000_000)

    @property
    def testing_length_us(self) -> int:
        return self.span_frames * self.frame_period_us


def testing_length(spec: WindowSpec) -> float:
    """Window span in seconds, (x + (x - 1) * y) * frame_period.

    The period is snapped to a small rational first so that E4-S3 gives the
    correctly rounded 13/30 rather than 13 * fl(1/30).
    """
    period = Fraction(spec.frame_period).limit_denominator(1_000_000)
    return float(spec.span_frames * period)


def window_bounds(start: int, spec: WindowSpec) -> list[tuple[int, int]]:
    """Half-open [t0, t1) microsecond bounds of each event frame of the window."""
    fp = spec.frame_period_us
    return [(start + k * (1 + spec.y) * fp, start + (k * (1 + spec.y) + 1) * fp) for k in range(spec.x)]


@dataclass(frozen=True)
class EventFrame:
    channels: np.ndarray
    window: tuple[int, int] = (0, 0)


@dataclass
class SequenceRecord:
    frames: list[IntensityFrame]
    events: EventStream
    label: int
    lighting: str = "normal"
    subject_id: str = ""
    fps: float = 30.0
    name: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sequence needs at least one intensity frame")
        if not 0 <= self.label < NUM_CLASSES:
            raise ValueError(f"label {self.label} outside [0, {NUM_CLASSES})")
        if self.lighting not in LIGHTING:
            raise ValueError(f"unknown lighting tag {self.lighting!r}")

    @property
    def duration(self) -> int:
        return self.frames[-1].timestamp

    @property
    def frame_timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.int64)

    @property
    def height(self) -> int:
        return self.events.sensor_height

    @property
    def width(self) -> int:
        return self.events.sensor_width


def nearest_frame(frames: Sequence[IntensityFrame], t: int) -> IntensityFrame:
    ts = np.array([f.timestamp for f in frames], dtype=np.int64)
    return frames[int(np.argmin(np.abs(ts - t)))]


def slice_windows(seq: SequenceRecord, start: int, spec: WindowSpec):
    """Cut ``spec.x`` event sub-streams starting at ``start`` (us).

    Returns ``(windows, i1, in_)``: the sub-streams, the intensity frame nearest
    the start of the first window and the one nearest the end of the last.
    Events falling in skip gaps belong to no window.
    """
    start = int(start)
    if start < 0 or start + spec.testing_length_us > seq.duration:
        raise ProtocolError(
            f"{spec} window of {spec.testing_length_us} us at start {start} does not fit "
            f"in sequence of {seq.duration} us"
        )
    bounds = window_bounds(start, spec)
    windows = [seq.events.between(t0, t1) for t0, t1 in bounds]
    i1 = nearest_frame(seq.frames, bounds[0][0])
    in_ = nearest_frame(seq.frames, bounds[-1][1])
    return windows, i1, in_


def count_events(events: EventStream, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Raw per-pixel (positive, negative) counts, shape (2, H, W)."""
    height = events.sensor_height if height is None else height
    width = events.sensor_width if width is None else width
    flat = events.y * width + events.x
    pos = np.bincount(flat[events.p > 0], minlength=height * width)
    neg = np.bincount(flat[events.p < 0], minlength=height * width)
    return np.stack([pos, neg]).reshape(2, height, width)


def aggregate_window(events: EventStream, height: int | None = None, width: int | None = None,
                     window: tuple[int, int] = (0, 0)) -> EventFrame:
    """Two-channel polarity counts divided by the largest count in either channel."""
    counts = count_events(events, height, width).astype(np.float64)
    peak = counts.max()
    if peak > 0:
        counts /= peak
    return EventFrame(counts, window)


# on-disk sequences -----------------------------------------------------------------


def _read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _write_pgm(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def load_sequence(directory: str | os.PathLike) -> SequenceRecord:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"sequence {directory}: missing meta.json") from None
    fps = float(meta.get("fps", 30))
    period_us = round(1_000_000 / fps)
    frame_paths = sorted((directory / "frames").glob("*.pgm"))
    if not frame_paths:
        raise FileNotFoundError(f"sequence {directory}: no frames/*.pgm")
    frames = [IntensityFrame(_read_pgm(p), i * period_us) for i, p in enumerate(frame_paths)]
    duration = frames[-1].timestamp
    w, h = int(meta["sensor_width"]), int(meta["sensor_height"])
    if (directory / "events.evt1").exists():
        events = parse_event_stream((directory / "events.evt1").read_bytes(), "evt1", w, h, duration)
    elif (directory / "events.csv").exists():
        events = parse_event_stream((directory / "events.csv").read_text(), "csv", w, h, duration)
    else:
        raise FileNotFoundError(f"sequence {directory}: no events.csv or events.evt1")
    return SequenceRecord(
        frames=frames, events=events, label=int(meta["label"]), lighting=meta.get("lighting", "normal"),
        subject_id=str(meta.get("subject_id", "")), fps=fps, name=directory.name,
    )


def save_sequence(seq: SequenceRecord, directory: str | os.PathLike, event_format: str = "evt1") -> None:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        _write_pgm(directory / "frames" / f"{i:06d}.pgm", frame.pixels)
    suffix = "csv" if event_format == "csv" else "evt1"
    (directory / f"events.{suffix}").write_bytes(serialize_event_stream(seq.events, event_format))
    meta = {
        "label": seq.label, "lighting": seq.lighting, "fps": seq.fps,
        "sensor_width": seq.width, "sensor_height": seq.height, "subject_id": seq.subject_id,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# manifest --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str
    label: int | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    entries = [
        ManifestEntry(path=(root / item["path"]).resolve(), split=item["split"], label=item.get("label"))
        for item in doc["sequences"]
    ]
    return Manifest(entries)


def write_manifest(path: str | os.PathLike, items: Sequence[dict]) -> None:
    """``items`` hold ``path`` (relative to the manifest), ``split`` and optionally ``label``."""
    doc = {"version": 1, "sequences": list(items)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
