import numpy as np
import pytest

from seer.explain import Explanation, export_explanation, metadata_line, score_segments, segment_forward_propagation
from seer.midi import MidiEvent, MidiSong, TempoChange, parse_smf
from seer.models import SeerModel
from seer.timeseries import Segment, events_to_timeseries, extract_segments


def song_at(seconds, rng=None, song_id="song"):
    """One event per timestamp; division 1000 at 1 s per quarter gives 1 ms ticks."""
    rng = rng or np.random.default_rng(0)
    events = [MidiEvent(int(round(s * 1000)), int(rng.integers(16)), int(rng.integers(20, 110)),
                        int(rng.integers(1, 128))) for s in seconds]
    return MidiSong(1000, events, [TempoChange(0, 1_000_000)], song_id)


class TestSegmentForwardPropagation:
    def test_short_song_whole_segment(self):
        song = song_at([0.0, 1.5, 4.0, 6.2])
        exp = segment_forward_propagation(SeerModel.create(2, d=4, seed=1), 1, events_to_timeseries(song))
        assert (exp.segment.start_step, exp.segment.end_step) == (0, 3)
        assert len(exp.all_segment_scores) == 1

    def test_single_nonempty_window_wins(self):
        # all events in (10, 11] s: L = 11, window (1,10) is empty and dropped, (2,11) holds everything
        raw = events_to_timeseries(song_at([10.2, 10.4, 10.6]))
        segs = extract_segments(raw)
        assert [s.window for s in segs] == [(2, 11)]
        exp = segment_forward_propagation(SeerModel.create(1, d=3, seed=0), 0, raw)
        assert exp.segment.window == (2, 11)
        assert exp.segment.steps == slice(0, 3)

    def test_winner_is_max(self):
        rng = np.random.default_rng(3)
        seconds = np.sort(rng.uniform(0, 40, 60))
        raw = events_to_timeseries(song_at(seconds, rng))
        model = SeerModel.create(3, d=5, cell_type="lstm", seed=2)
        exp = segment_forward_propagation(model, 2, raw)
        scores = [sc for _, sc in exp.all_segment_scores]
        assert exp.predicted_rating == max(scores)
        first_max = scores.index(max(scores))
        assert exp.segment == exp.all_segment_scores[first_max][0]

    def test_natural_length_scoring(self):
        rng = np.random.default_rng(4)
        raw = events_to_timeseries(song_at(np.sort(rng.uniform(0, 25, 30)), rng))
        model = SeerModel.create(2, d=4, seed=3)
        segs = extract_segments(raw)
        batched = score_segments(model, 1, raw, segs)
        for seg, sc in zip(segs, batched):
            assert sc == pytest.approx(model.predict(1, raw.rows[seg.steps]), abs=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        raw = events_to_timeseries(song_at(np.sort(rng.uniform(0, 30, 50)), rng))
        model = SeerModel.create(2, d=4, seed=4)
        before = segment_forward_propagation(model, 0, raw).segment
        model.user_factors[0] *= 7.0
        assert segment_forward_propagation(model, 0, raw).segment == before

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        raw = events_to_timeseries(song_at(np.sort(rng.uniform(0, 30, 50)), rng))
        model = SeerModel.create(2, d=4, seed=4)
        a = segment_forward_propagation(model, 1, raw)
        b = segment_forward_propagation(model, 1, raw)
        assert a == b

    def test_no_events(self):
        raw = events_to_timeseries(MidiSong(96, []))
        with pytest.raises(ValueError, match="no events to explain"):
            segment_forward_propagation(SeerModel.create(1, d=2), 0, raw)

    def test_unknown_user(self):
        raw = events_to_timeseries(song_at([0.0]))
        with pytest.raises(IndexError):
            segment_forward_propagation(SeerModel.create(1, d=2), 3, raw)


class TestExport:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        song = song_at(np.sort(rng.uniform(0, 35, 40)), rng, "abc")
        raw = events_to_timeseries(song)
        exp = segment_forward_propagation(SeerModel.create(1, d=4, seed=8), 0, raw)
        export_explanation(exp, song, tmp_path / "e.mid", tmp_path / "e.csv", user_id="alice")
        back = parse_smf((tmp_path / "e.mid").read_bytes())
        want = song.events[exp.segment.start_step:exp.segment.end_step + 1]
        assert [(e.channel, e.note, e.velocity) for e in back.events] == \
            [(e.channel, e.note, e.velocity) for e in want]
        line = (tmp_path / "e.csv").read_text().strip()
        user, sid, start, end, rating = line.split(",")
        assert (user, sid) == ("alice", "abc")
        assert int(end) - int(start) <= 10_000_000
        assert int(start) == raw.micros[exp.segment.start_step]
        assert rating == f"{exp.predicted_rating:.6f}"

    def test_metadata_format(self):
        exp = Explanation(3, "glorious", Segment("glorious", 10, 20, 130074061, 139999986), 5.3608121)
        assert metadata_line(exp) == "3,glorious,130074061,139999986,5.360812"

    def test_unwritable_path(self, tmp_path):
        song = song_at([0.0, 1.0])
        exp = segment_forward_propagation(SeerModel.create(1, d=2), 0, events_to_timeseries(song))
        with pytest.raises(OSError, match="cannot write"):
            export_explanation(exp, song, tmp_path / "missing" / "e.mid", tmp_path / "e.csv")
