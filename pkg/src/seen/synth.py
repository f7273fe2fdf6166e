"""Synthetic eye-region sequences and an idealised event simulator.

Each class owns a motion template: a static appearance (brow height, lid
aperture, gaze) plus periodic movement of one or two facial parameters. The
renderer draws a grey-level eye region, and the simulator emits an event each
time a pixel's log intensity crosses another multiple of the contrast threshold
C between consecutive frames, with timestamps linearly interpolated inside
the frame interval.
"""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .events import LIGHTING, NUM_CLASSES, EventStream, IntensityFrame, SequenceRecord, save_sequence, write_manifest

log = logging.getLogger(__name__)

CROSSING_TOL = 1e-9


@dataclass(frozen=True)
class Oscillation:
    mean: float = 0.0
    amp: float = 0.0
    freq: float = 0.0  # Hz
    phase: float = 0.0

    def __call__(self, t: float) -> float:
        return self.mean + self.amp * math.sin(2 * math.pi * self.freq * t + self.phase)


@dataclass(frozen=True)
class MotionTemplate:
    """Parametric eye region; every field is in pixels unless noted."""

    label: int = NUM_CLASSES - 1
    center: tuple[float, float] = (32.0, 36.0)  # eye centre (x, y) at 64x64
    half_width: float = 18.0
    half_height: float = 9.0
    aperture: Oscillation = Oscillation(1.0)  # fraction of half_height left open
    brow_offset: Oscillation = Oscillation(0.0)  # positive moves the brow down
    brow_tilt: Oscillation = Oscillation(0.0)  # slope; positive lifts the inner (left) end
    gaze_x: Oscillation = Oscillation(0.0)
    gaze_y: Oscillation = Oscillation(0.0)
    blinks: tuple[float, ...] = ()  # blink centres in seconds
    blink_width: float = 0.08  # seconds for a full close/open

    def state(self, t: float) -> dict:
        ap = self.aperture(t)
        for tb in self.blinks:
            d = abs(t - tb) / self.blink_width
            if d < 1:
                ap *= d
        return {
            "aperture": max(ap, 0.0),
            "brow": self.brow_offset(t),
            "tilt": self.brow_tilt(t),
            "gx": self.gaze_x(t),
            "gy": self.gaze_y(t),
        }


def class_template(label: int, rng: np.random.Generator | None = None) -> MotionTemplate:
    """The template for ``label``; with ``rng`` the geometry and timing are jittered."""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label {label} outside [0, {NUM_CLASSES})")
    if rng is None:
        jit = lambda lo, hi: (lo + hi) / 2  # noqa: E731
        phase = 0.0
    else:
        jit = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
        phase = float(rng.uniform(0, 2 * math.pi))
    f = jit(2.0, 3.0)
    a = jit(0.85, 1.15)
    osc = lambda mean, amp: Oscillation(mean, amp * a, f, phase)  # noqa: E731
    base = MotionTemplate(label=label, center=(32.0 + jit(-1, 1), 36.0 + jit(-1, 1)),
                          half_width=jit(17.5, 18.5), half_height=jit(8.6, 9.4))
    # each class pairs a distinct static look with its own dominant motion
    blink_period = jit(0.2, 0.26)
    blink_start = jit(0.0, blink_period)
    kinds = {
        0: dict(aperture=osc(0.5, 0.2), brow_offset=osc(1.0, 0.0)),  # happiness: squinting lids
        1: dict(brow_tilt=osc(0.15, 0.15), aperture=osc(0.8, 0.0)),  # sadness: inner brow rocking
        2: dict(brow_offset=osc(4.0, 2.5), aperture=osc(0.85, 0.0)),  # anger: low brow moving
        3: dict(blinks=tuple(blink_start + k * blink_period for k in range(int(10 / blink_period))),
                blink_width=0.1, aperture=osc(0.7, 0.0), brow_offset=osc(2.0, 0.0)),  # disgust: blink bursts
        4: dict(aperture=osc(1.25, 0.1), brow_offset=osc(-4.0, -2.0)),  # surprise: wide eye, lifted brow
        5: dict(gaze_x=osc(0.0, 6.0), aperture=osc(1.1, 0.0), brow_offset=osc(-1.5, 0.0)),  # fear: darting gaze
        6: dict(gaze_x=Oscillation(0.0, 0.8 * a, f / 4, phase)),  # neutral: almost still
    }
    return replace(base, **kinds[label])


@dataclass(frozen=True)
class SimulatorConfig:
    contrast: float = 0.15
    log_eps: float = 1e-3
    fps: float = 30.0
    width: int = 64
    height: int = 64
    duration: float = 1.2  # seconds

    def __post_init__(self):
        if not self.contrast > 0:
            raise ValueError("contrast threshold must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("resolution must be at least 8x8")
        if self.duration < 1.0:
            raise ValueError("sequences must last at least 1 s")

    @property
    def frame_period_us(self) -> int:
        return int(round(1e6 / self.fps))

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps)) + 1


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    # one-pixel antialiased edge
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def render_frame(template: MotionTemplate, t: float, width: int = 64, height: int = 64) -> np.ndarray:
    """Grey-level eye region in [0, 1] under normal lighting."""
    s = template.state(t)
    scale = width / 64.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    cx, cy = template.center[0] * scale, template.center[1] * scale * height / width
    hw, hh = template.half_width * scale, template.half_height * scale
    img = 0.62 - 0.08 * (yy / height)  # skin with a mild vertical shade

    # eye opening: an ellipse whose vertical axis follows the lid aperture
    open_h = max(hh * s["aperture"], 1e-3)
    r = np.sqrt(((xx - cx) / hw) ** 2 + ((yy - cy) / open_h) ** 2)
    inside = _coverage((r - 1.0) * min(hw, open_h))
    iris_r, pupil_r = 6.5 * scale, 2.8 * scale
    ix, iy = cx + s["gx"] * scale, cy + s["gy"] * scale
    d = np.hypot(xx - ix, yy - iy)
    eye = 0.92 * np.ones_like(img)
    eye = eye * (1 - _coverage(d - iris_r)) + 0.32 * _coverage(d - iris_r)
    eye = eye * (1 - _coverage(d - pupil_r)) + 0.05 * _coverage(d - pupil_r)
    img = img * (1 - inside) + eye * inside

    # brow: a dark band above the eye, arched, shifted and tilted
    x0, x1 = cx - 1.1 * hw, cx + 1.1 * hw
    u = (xx - cx) / (1.1 * hw)
    brow_y = cy - hh - 6.0 * scale + s["brow"] * scale + 2.5 * scale * u**2 + s["tilt"] * (xx - cx)
    band = _coverage(np.abs(yy - brow_y) - 1.8 * scale)
    band *= _coverage(np.maximum(x0 - xx, xx - x1))
    img = img * (1 - band) + 0.18 * band
    return np.clip(img, 0.0, 1.0)


def apply_lighting(img: np.ndarray, lighting: str, clip: bool = True) -> np.ndarray:
    """Scene radiance under ``lighting``; ``clip`` models the frame camera's saturation."""
    if lighting == "normal":
        out = img
    elif lighting == "overexposure":
        out = 1.35 * img + 0.05
    elif lighting == "low-light":
        out = 0.45 * img
    elif lighting == "hdr":
        gain = np.linspace(0.5, 1.5, img.shape[1])[None, :]
        out = img * gain
    else:
        raise ValueError(f"unknown lighting tag {lighting!r}")
    return np.clip(out, 0.0, 1.0) if clip else out


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so a PGM round trip is exact."""
    return np.round(img * 255.0) / 255.0


def render_radiance(template: MotionTemplate, cfg: SimulatorConfig, lighting: str = "normal"):
    """Unclipped (timestamp_us, radiance) pairs at the frame instants."""
    period = cfg.frame_period_us
    return [(k * period, apply_lighting(render_frame(template, k * period / 1e6, cfg.width, cfg.height), lighting,
                                        clip=False))
            for k in range(cfg.n_frames)]


def render_sequence(template: MotionTemplate, cfg: SimulatorConfig, lighting: str = "normal") -> list[IntensityFrame]:
    """Intensity frames as the frame camera records them: saturated and 8-bit."""
    return [IntensityFrame(quantize(np.clip(img, 0.0, 1.0)), t) for t, img in render_radiance(template, cfg, lighting)]


def simulate_events(frames, contrast: float = 0.15, log_eps: float = 1e-3) -> EventStream:
    """Emit threshold-crossing events between consecutive frames.

    ``frames`` holds IntensityFrames or (timestamp_us, image) pairs; the pairs
    let the sensor see radiance beyond the frame camera's [0, 1] range.
    The reference log intensity starts at the first frame. A change of n whole
    multiples of ``contrast`` since the reference yields n events of that sign,
    timestamped where the linear interpolation between the two frames reaches
    each crossing level. Timestamps lie inside their frame interval.
    """
    frames = [(f.timestamp, f.pixels) if isinstance(f, IntensityFrame) else (int(f[0]), np.asarray(f[1]))
              for f in frames]
    h, w = frames[0][1].shape
    ref = np.log(frames[0][1] + log_eps)
    cols = {"t": [], "x": [], "y": [], "p": []}
    for (t0, img0), (t1, img1) in zip(frames[:-1], frames[1:]):
        l0 = np.log(img0 + log_eps)
        l1 = np.log(img1 + log_eps)
        d = (l1 - ref).ravel()
        n = np.floor(np.abs(d) / contrast + CROSSING_TOL).astype(np.int64)
        pix = np.flatnonzero(n)
        if pix.size:
            counts = n[pix]
            idx = np.repeat(pix, counts)
            step = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            sign = np.sign(d[idx])
            level = ref.ravel()[idx] + sign * step * contrast
            a, b = l0.ravel()[idx], l1.ravel()[idx]
            span = b - a
            safe = np.where(span == 0, 1.0, span)
            frac = np.clip(np.where(span == 0, 1.0, (level - a) / safe), 0.0, 1.0)
            t = np.floor(t0 + frac * (t1 - t0)).astype(np.int64)
            cols["t"].append(np.clip(t, t0, t1))
            cols["x"].append(idx % w)
            cols["y"].append(idx // w)
            cols["p"].append(sign.astype(np.int64))
            ref = ref.ravel().copy()
            ref[pix] += np.sign(d[pix]) * n[pix] * contrast
            ref = ref.reshape(h, w)
    if not cols["t"]:
        return EventStream.empty(w, h, frames[-1][0])
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.argsort(cat["t"], kind="stable")
    return EventStream(cat["t"][order], cat["x"][order], cat["y"][order], cat["p"][order],
                       sensor_width=w, sensor_height=h, duration=frames[-1][0])


def make_sequence(label: int, lighting: str, cfg: SimulatorConfig, rng: np.random.Generator,
                  name: str = "", subject_id: str = "") -> SequenceRecord:
    template = class_template(label, rng)
    radiance = render_radiance(template, cfg, lighting)
    frames = [IntensityFrame(quantize(np.clip(img, 0.0, 1.0)), t) for t, img in radiance]
    # the event sensor's dynamic range far exceeds the frame camera's, so it sees unclipped radiance
    events = simulate_events(radiance, cfg.contrast, cfg.log_eps)
    return SequenceRecord(frames, events, label, lighting, subject_id, cfg.fps, name)


@dataclass
class DatasetSpec:
    per_class: int = 10
    train_fraction: float = 0.7
    seed: int = 0
    sim: SimulatorConfig = field(default_factory=SimulatorConfig)

    def __post_init__(self):
        if self.per_class < 2:
            raise ValueError("per_class must be >= 2")
        if not 0 <= self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in [0, 1]")


def generate_sequences(spec: DatasetSpec) -> list[tuple[SequenceRecord, str]]:
    """In-memory dataset as (sequence, split) pairs, stratified by class."""
    out = []
    n_train = int(round(spec.per_class * spec.train_fraction))
    for label in range(NUM_CLASSES):
        split_rng = np.random.default_rng([spec.seed, label, 1 << 20])
        is_train = np.zeros(spec.per_class, dtype=bool)
        is_train[split_rng.permutation(spec.per_class)[:n_train]] = True
        for i in range(spec.per_class):
            g = label * spec.per_class + i
            rng = np.random.default_rng([spec.seed, label, i])
            name = f"seq_{label}_{i:03d}"
            seq = make_sequence(label, LIGHTING[g % len(LIGHTING)], spec.sim, rng, name=name,
                                subject_id=f"synth-{label}-{i}")
            out.append((seq, "train" if is_train[i] else "test"))
    return out


def generate_dataset(out_dir, spec: DatasetSpec, force: bool = False, event_format: str = "evt1") -> Path:
    """Write sequences and ``manifest.json`` under ``out_dir``; returns the manifest path.

    Refuses a non-empty directory unless ``force`` is set, in which case only
    entries this generator would write are replaced.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if force:
        for stale in out.glob("seq_*"):
            shutil.rmtree(stale) if stale.is_dir() else stale.unlink()
    items = []
    for seq, split in generate_sequences(spec):
        save_sequence(seq, out / seq.name, event_format=event_format)
        items.append({"path": seq.name, "split": split, "label": seq.label, "lighting": seq.lighting})
    manifest = out / "manifest.json"
    write_manifest(manifest, items)
    log.info("wrote %d sequences to %s", len(items), out)
    return manifest
