"""Segment forward propagation: explain a recommendation by its best-rated 10 s segment."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .midi import MidiSong, write_segment_midi
from .models import SeerModel
from .timeseries import RawSeries, Segment, extract_segments


@dataclass
class Explanation:
    user: int
    song: str | None
    segment: Segment
    predicted_rating: float
    all_segment_scores: list[tuple[Segment, float]] = field(default_factory=list)


def segment_batch(series: RawSeries, segments: list[Segment]) -> tuple[np.ndarray, np.ndarray]:
    """Stack segment rows into a zero-padded (K, max_len, 32) batch plus true lengths."""
    lengths = np.array([s.end_step - s.start_step + 1 for s in segments], dtype=np.int64)
    batch = np.zeros((len(segments), int(lengths.max()), series.rows.shape[1]), dtype=series.rows.dtype)
    for k, seg in enumerate(segments):
        batch[k, :lengths[k]] = series.rows[seg.steps]
    return batch, lengths


def score_segments(model: SeerModel, u: int, series: RawSeries, segments: list[Segment]) -> np.ndarray:
    # each segment is unrolled over its own rows only; the mask ignores the padding
    batch, lengths = segment_batch(series, segments)
    model._check_user(u)
    return model.hidden(batch, lengths) @ model.user_factors[u]


def segment_forward_propagation(model: SeerModel, u: int, series: RawSeries,
                                window_s: int = 10, stride_s: int = 1) -> Explanation:
    if len(series) == 0:
        raise ValueError("no events to explain")
    segments = extract_segments(series, window_s, stride_s)
    scores = score_segments(model, u, series, segments)
    best = int(np.argmax(scores))  # first maximum = earliest window
    return Explanation(u, series.song_id, segments[best], float(scores[best]),
                       [(seg, float(sc)) for seg, sc in zip(segments, scores)])


def metadata_line(explanation: Explanation, user_id: str | None = None) -> str:
    seg = explanation.segment
    user = explanation.user if user_id is None else user_id
    return f"{user},{explanation.song},{seg.start_us},{seg.end_us},{explanation.predicted_rating:.6f}"


def export_explanation(explanation: Explanation, song: MidiSong, out_midi_path, out_meta_path,
                       user_id: str | None = None) -> None:
    """Write the winning segment as playable MIDI and its one-line CSV record."""
    seg = explanation.segment
    data = write_segment_midi(song, (seg.start_step, seg.end_step))
    for path, payload in ((out_midi_path, data), (out_meta_path, (metadata_line(explanation, user_id) + "\n").encode())):
        try:
            Path(path).write_bytes(payload)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
