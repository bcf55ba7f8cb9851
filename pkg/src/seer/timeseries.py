"""MIDI event stream -> multidimensional time series, plus the song lookup matrix.

Each note-on event becomes one row of 32 features: columns 0-15 hold
note/127 for the event's channel, columns 16-31 hold velocity/127.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .midi import DEFAULT_TEMPO, MidiSong

N_CHANNELS = 16
N_FEATURES = 2 * N_CHANNELS
US_PER_SECOND = 1_000_000

LOOKUP_MAGIC = b"SEERLKP1"


@dataclass
class RawSeries:
    rows: np.ndarray      # (N, 32) float32 in [0, 1]
    ticks: np.ndarray     # (N,) int64
    micros: np.ndarray    # (N,) int64
    song_id: str | None = None

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def duration_us(self) -> int:
        return int(self.micros[-1]) if len(self) else 0


@dataclass
class SongTimeSeries:
    data: np.ndarray      # (T, 32) float32, zero rows past valid_steps
    valid_steps: int
    song_id: str | None = None


@dataclass
class SongLookup:
    matrix: np.ndarray    # (n_songs, T * 32) float32
    index: dict[str, int]
    valid_steps: np.ndarray   # (n_songs,) int64
    timesteps: int

    def series(self, row: int) -> np.ndarray:
        return self.matrix[row].reshape(self.timesteps, N_FEATURES)

    def batch(self, rows) -> np.ndarray:
        """Gather rows and reshape to (B, T, 32)."""
        return self.matrix[np.asarray(rows)].reshape(-1, self.timesteps, N_FEATURES)

    @property
    def song_ids(self) -> list[str]:
        ids = [""] * len(self.index)
        for sid, row in self.index.items():
            ids[row] = sid
        return ids


@dataclass(frozen=True)
class Segment:
    song_id: str | None
    start_step: int
    end_step: int
    start_us: int
    end_us: int
    window: tuple[int, int] | None = None   # (first second, last second), 1-based

    @property
    def steps(self) -> slice:
        return slice(self.start_step, self.end_step + 1)


# ---------------------------------------------------------------------------
# ticks -> microseconds
# ---------------------------------------------------------------------------

def _tempo_spans(song: MidiSong) -> tuple[list[int], list[int]]:
    """Tempo span starts and tempos; the last change at a given tick wins."""
    starts, tempos = [0], [DEFAULT_TEMPO]
    for change in song.tempo_map:
        if change.tick == starts[-1]:
            tempos[-1] = change.tempo
        else:
            starts.append(change.tick)
            tempos.append(change.tempo)
    return starts, tempos


def _round_div(num: int, den: int) -> int:
    # round half up, non-negative operands
    return (2 * num + den) // (2 * den)


def tick_to_micros(song: MidiSong, tick: int) -> int:
    """Absolute time of ``tick`` in microseconds, integrated over the tempo map."""
    starts, tempos = _tempo_spans(song)
    num = 0
    for i, start in enumerate(starts):
        if start >= tick:
            break
        stop = starts[i + 1] if i + 1 < len(starts) else tick
        num += (min(stop, tick) - start) * tempos[i]
    return _round_div(num, song.division)


def ticks_to_micros(song: MidiSong, ticks) -> np.ndarray:
    """Vectorised :func:`tick_to_micros` for a sequence of ticks."""
    ticks = np.asarray(ticks, dtype=np.int64)
    starts, tempos = _tempo_spans(song)
    starts_a = np.asarray(starts, dtype=np.int64)
    tempos_a = np.asarray(tempos, dtype=np.int64)
    # exact accumulated numerator (ticks * us/qn) at each span start
    spans = np.diff(starts_a) * tempos_a[:-1]
    acc = np.concatenate([[0], np.cumsum(spans)]).astype(np.int64)
    k = np.searchsorted(starts_a, ticks, side="right") - 1
    num = acc[k] + (ticks - starts_a[k]) * tempos_a[k]
    div = song.division
    return (2 * num + div) // (2 * div)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def events_to_timeseries(song: MidiSong) -> RawSeries:
    n = len(song.events)
    rows = np.zeros((n, N_FEATURES), dtype=np.float32)
    if n:
        ch = np.fromiter((e.channel for e in song.events), dtype=np.int64, count=n)
        note = np.fromiter((e.note for e in song.events), dtype=np.float32, count=n)
        vel = np.fromiter((e.velocity for e in song.events), dtype=np.float32, count=n)
        idx = np.arange(n)
        rows[idx, ch] = note / np.float32(127)
        rows[idx, N_CHANNELS + ch] = vel / np.float32(127)
    ticks = np.fromiter((e.tick for e in song.events), dtype=np.int64, count=n)
    return RawSeries(rows, ticks, ticks_to_micros(song, ticks), song.source_id)


def compute_target_T(corpus) -> int:
    """Lower median of the corpus' row counts."""
    lengths = sorted(len(s) for s in corpus)
    if not lengths:
        raise ValueError("empty corpus")
    return lengths[(len(lengths) - 1) // 2]


def normalize_length(series: RawSeries, T: int) -> SongTimeSeries:
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(series)
    data = np.zeros((T, N_FEATURES), dtype=np.float32)
    keep = min(n, T)
    data[:keep] = series.rows[:keep]
    return SongTimeSeries(data, keep, series.song_id)


def build_lookup(corpus: list[SongTimeSeries]) -> SongLookup:
    if not corpus:
        raise ValueError("empty corpus")
    T = corpus[0].data.shape[0]
    index: dict[str, int] = {}
    for row, s in enumerate(corpus):
        if s.data.shape != (T, N_FEATURES):
            raise ValueError(f"song {s.song_id!r} has shape {s.data.shape}, expected {(T, N_FEATURES)}")
        if s.song_id in index:
            raise ValueError(f"duplicate song_id {s.song_id!r}")
        index[s.song_id] = row
    matrix = np.stack([s.data.reshape(-1) for s in corpus]).astype(np.float32, copy=False)
    valid = np.array([s.valid_steps for s in corpus], dtype=np.int64)
    return SongLookup(matrix, index, valid, T)


def extract_segments(series: RawSeries, window_s: int = 10, stride_s: int = 1) -> list[Segment]:
    """Sliding absolute-time windows over a song, mapped to event-row ranges.

    Window ``(i, i + window_s - 1)`` covers ``[(i-1)s, (i+window_s-1)s]``
    inclusive. Windows without events are dropped. Songs no longer than
    ``window_s`` seconds give a single whole-song segment.
    """
    n = len(series)
    if n == 0:
        raise ValueError("empty series")
    micros = series.micros
    L = math.ceil(int(micros[-1]) / US_PER_SECOND)
    if L <= window_s:
        return [Segment(series.song_id, 0, n - 1, int(micros[0]), int(micros[-1]), (1, max(L, 1)))]
    segments = []
    for i in range(1, L - window_s + 2, stride_s):
        lo = (i - 1) * US_PER_SECOND
        hi = (i + window_s - 1) * US_PER_SECOND
        a = int(np.searchsorted(micros, lo, side="left"))
        b = int(np.searchsorted(micros, hi, side="right")) - 1
        if b < a:
            continue
        segments.append(Segment(series.song_id, a, b, int(micros[a]), int(micros[b]), (i, i + window_s - 1)))
    if not segments:
        segments.append(Segment(series.song_id, 0, n - 1, int(micros[0]), int(micros[-1])))
    return segments


# ---------------------------------------------------------------------------
# prepared-corpus files
# ---------------------------------------------------------------------------

def save_lookup(lookup: SongLookup, directory, durations_us=None) -> None:
    """Write ``lookup.bin`` and ``songs.idx``."""
    directory = Path(directory)
    n = lookup.matrix.shape[0]
    with open(directory / "lookup.bin", "wb") as fh:
        fh.write(LOOKUP_MAGIC)
        fh.write(struct.pack("<III", lookup.timesteps, N_FEATURES, n))
        fh.write(np.ascontiguousarray(lookup.matrix, dtype="<f4").tobytes())
    if durations_us is None:
        durations_us = [0] * n
    with open(directory / "songs.idx", "w", encoding="utf-8", newline="\n") as fh:
        for sid, row in sorted(lookup.index.items(), key=lambda kv: kv[1]):
            fh.write(f"{sid},{row},{int(lookup.valid_steps[row])},{int(durations_us[row])}\n")


def load_lookup(directory) -> tuple[SongLookup, dict[str, int]]:
    """Read ``lookup.bin`` + ``songs.idx``; returns the lookup and per-song durations."""
    directory = Path(directory)
    raw = (directory / "lookup.bin").read_bytes()
    if raw[:8] != LOOKUP_MAGIC:
        raise ValueError(f"{directory / 'lookup.bin'}: bad magic")
    T, F, n = struct.unpack("<III", raw[8:20])
    if F != N_FEATURES:
        raise ValueError(f"lookup.bin has {F} features, expected {N_FEATURES}")
    expected = 20 + 4 * T * F * n
    if len(raw) != expected:
        raise ValueError(f"lookup.bin is {len(raw)} bytes, expected {expected}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=20).reshape(n, T * F).astype(np.float32)
    index: dict[str, int] = {}
    valid = np.zeros(n, dtype=np.int64)
    durations: dict[str, int] = {}
    for line in (directory / "songs.idx").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sid, row, steps, dur = line.rsplit(",", 3)
        index[sid] = int(row)
        valid[int(row)] = int(steps)
        durations[sid] = int(dur)
    if len(index) != n:
        raise ValueError(f"songs.idx lists {len(index)} songs, lookup.bin has {n}")
    return SongLookup(matrix, index, valid, T), durations
