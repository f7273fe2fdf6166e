import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seen.events import (
    EVT1_MAGIC,
    EventParseError,
    EventStream,
    EventValidationError,
    IntensityFrame,
    ProtocolError,
    SequenceRecord,
    WindowSpec,
    aggregate_window,
    count_events,
    load_manifest,
    load_sequence,
    parse_event_stream,
    save_sequence,
    serialize_event_stream,
    slice_windows,
    testing_length,
    window_bounds,
    write_manifest,
)

from .oracles import brute_counts, window_membership


def make_seq(t, x, y, p, n_frames=40, size=8, label=0):
    frames = [IntensityFrame(np.full((size, size), 0.5), i * 33333) for i in range(n_frames)]
    ev = EventStream(t, x, y, p, size, size, duration=frames[-1].timestamp)
    return SequenceRecord(frames, ev, label)


# parsing -------------------------------------------------------------------------


def test_csv_line_maps_fields():
    s = parse_event_stream("1000,5,7,1\n", "csv", 16, 16)
    assert s.records[0].t == 1000 and s.records[0].x == 5 and s.records[0].y == 7 and s.records[0].p == 1


def test_csv_zero_polarity_reads_negative():
    s = parse_event_stream("1000,5,7,0\n", "csv", 16, 16)
    assert s.records[0].p == -1


def test_empty_file_is_valid():
    assert len(parse_event_stream("", "csv", 4, 4)) == 0
    assert len(parse_event_stream(EVT1_MAGIC, "evt1", 4, 4)) == 0


def test_unsorted_input_is_stably_sorted():
    s = parse_event_stream("30,0,0,1\n10,1,0,1\n10,2,0,-1\n", "csv", 4, 4)
    assert s.t.tolist() == [10, 10, 30]
    assert s.x.tolist() == [1, 2, 0]


def test_malformed_csv_reports_line():
    with pytest.raises(EventParseError, match="line 2"):
        parse_event_stream("1,0,0,1\nabc,0,0,1\n", "csv", 4, 4)


def test_out_of_bounds_is_validation_error():
    with pytest.raises(EventValidationError):
        parse_event_stream("1,9,0,1\n", "csv", 4, 4)


def test_truncated_binary_reports_offset():
    blob = serialize_event_stream(EventStream([1, 2], [0, 1], [0, 1], [1, -1], 4, 4), "evt1")
    with pytest.raises(EventParseError, match="offset"):
        parse_event_stream(blob[:-3], "evt1", 4, 4)


def test_bad_magic():
    with pytest.raises(EventParseError):
        parse_event_stream(b"XXXX", "evt1", 4, 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**9), st.integers(0, 31), st.integers(0, 23), st.sampled_from([-1, 1])),
                max_size=60), st.sampled_from(["csv", "evt1"]))
def test_serialize_round_trip(rows, fmt):
    t, x, y, p = (list(c) for c in zip(*rows)) if rows else ([], [], [], [])
    s = EventStream(t, x, y, p, 32, 24, duration=10**9)
    back = parse_event_stream(serialize_event_stream(s, fmt), fmt, 32, 24, duration=10**9)
    assert back == s


def test_stream_columns_read_only():
    s = EventStream([1], [0], [0], [1], 2, 2)
    with pytest.raises(ValueError):
        s.t[0] = 5


# window arithmetic ---------------------------------------------------------------


def test_testing_length_paper_values():
    assert testing_length(WindowSpec(4, 0)) == 4 / 30
    assert testing_length(WindowSpec(4, 3)) == 13 / 30
    assert testing_length(WindowSpec(1, 5)) == 1 / 30


@given(st.integers(1, 12), st.integers(0, 10))
def test_testing_length_formula(x, y):
    assert testing_length(WindowSpec(x, y)) == float(Fraction(x + (x - 1) * y, 30))


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec(0, 1)
    with pytest.raises(ValueError):
        WindowSpec(2, -1)
    assert str(WindowSpec(4, 3)) == "E4-S3"


def test_e4s1_window_bounds():
    fp = 33333
    assert window_bounds(0, WindowSpec(4, 1)) == [(0, fp), (2 * fp, 3 * fp), (4 * fp, 5 * fp), (6 * fp, 7 * fp)]


def test_e4s0_partition():
    rng = np.random.default_rng(3)
    start = 1000
    t = np.sort(rng.integers(start, start + 4 * 33333, 500))
    seq = make_seq(t, np.zeros_like(t), np.zeros_like(t), np.ones_like(t))
    windows, _, _ = slice_windows(seq, start, WindowSpec(4, 0))
    assert sum(len(w) for w in windows) == 500
    merged = np.concatenate([w.t for w in windows])
    assert np.array_equal(merged, t)


def test_e4s1_gap_events_dropped():
    rng = np.random.default_rng(0)
    span = 7 * 33333
    t = np.sort(rng.integers(0, span, 100))
    seq = make_seq(t, rng.integers(0, 8, 100), rng.integers(0, 8, 100), rng.choice([-1, 1], 100))
    windows, _, _ = slice_windows(seq, 0, WindowSpec(4, 1))
    member = window_membership(t, 0, 4, 1, 33333)
    for k, w in enumerate(windows):
        assert w.t.tolist() == t[member == k].tolist()
    assert sum(len(w) for w in windows) == int((member >= 0).sum())


def test_slice_requires_fit():
    seq = make_seq([], [], [], [], n_frames=4)  # duration 99999 us
    with pytest.raises(ProtocolError):
        slice_windows(seq, 0, WindowSpec(4, 0))
    slice_windows(seq, 0, WindowSpec(3, 0))


def test_intensity_frames_nearest():
    frames = [IntensityFrame(np.full((8, 8), i / 40), i * 33333) for i in range(40)]
    seq = SequenceRecord(frames, EventStream.empty(8, 8, frames[-1].timestamp), 0)
    _, i1, in_ = slice_windows(seq, 50000, WindowSpec(4, 3))
    assert i1.timestamp == 2 * 33333  # 50000 is nearer 66666 than 33333
    end = 50000 + WindowSpec(4, 3).testing_length_us
    assert in_.timestamp == frames[int(np.argmin([abs(f.timestamp - end) for f in frames]))].timestamp


# aggregation ---------------------------------------------------------------------


def test_aggregate_example():
    ev = EventStream([0, 1, 2], [2, 2, 2], [3, 3, 3], [1, 1, -1], 5, 5)
    raw = count_events(ev)
    assert raw[0, 3, 2] == 2 and raw[1, 3, 2] == 1
    f = aggregate_window(ev).channels
    assert f[0, 3, 2] == 1.0 and f[1, 3, 2] == 0.5
    assert f.sum() == 1.5


def test_aggregate_empty_is_zero():
    f = aggregate_window(EventStream.empty(6, 4)).channels
    assert f.shape == (2, 4, 6) and not f.any()


def test_aggregate_single_event():
    f = aggregate_window(EventStream([0], [0], [0], [1], 3, 3)).channels
    assert f[0, 0, 0] == 1.0 and f.sum() == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3), st.sampled_from([-1, 1])), max_size=80),
       st.randoms())
def test_aggregate_conservation_and_order_invariance(rows, rnd):
    xs, ys, ps = (list(c) for c in zip(*rows)) if rows else ([], [], [])
    t = [0] * len(xs)
    raw = count_events(EventStream(t, xs, ys, ps, 6, 4))
    pos, neg = brute_counts(xs, ys, ps, 4, 6)
    assert np.array_equal(raw[0], pos) and np.array_equal(raw[1], neg)
    assert raw.sum() == len(xs)
    perm = list(range(len(xs)))
    rnd.shuffle(perm)
    shuffled = EventStream(t, [xs[i] for i in perm], [ys[i] for i in perm], [ps[i] for i in perm], 6, 4)
    a, b = aggregate_window(EventStream(t, xs, ys, ps, 6, 4)).channels, aggregate_window(shuffled).channels
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


# disk formats --------------------------------------------------------------------


def test_sequence_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    frames = [IntensityFrame(np.round(rng.random((8, 10)) * 255) / 255, i * 33333) for i in range(5)]
    t = np.sort(rng.integers(0, frames[-1].timestamp, 40))
    ev = EventStream(t, rng.integers(0, 10, 40), rng.integers(0, 8, 40), rng.choice([-1, 1], 40), 10, 8,
                     duration=frames[-1].timestamp)
    seq = SequenceRecord(frames, ev, 3, "hdr", "subj", 30.0, "s")
    for fmt in ("evt1", "csv"):
        d = tmp_path / fmt
        save_sequence(seq, d, event_format=fmt)
        back = load_sequence(d)
        assert back.events == ev
        assert back.label == 3 and back.lighting == "hdr" and back.subject_id == "subj"
        for a, b in zip(back.frames, frames):
            assert np.array_equal(a.pixels, b.pixels) and a.timestamp == b.timestamp
        meta = json.loads((d / "meta.json").read_text())
        assert set(meta) == {"label", "lighting", "fps", "sensor_width", "sensor_height", "subject_id"}


def test_missing_sequence_names_directory(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_sequence(tmp_path / "nowhere")


def test_manifest_paths_relative(tmp_path):
    write_manifest(tmp_path / "m.json", [{"path": "a", "split": "train", "label": 1},
                                         {"path": "b", "split": "test", "label": 2}])
    m = load_manifest(tmp_path / "m.json")
    assert len(m) == 2
    assert m.split("test")[0].path == (tmp_path / "b").resolve()
