"""Prepare a corpus directory from MIDI files plus triplets, and load it back."""
from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DEFAULT_THRESHOLDS, Dataset, build_dataset, filter_users, load_triplets, read_split, write_split
from .midi import MidiParseError, MidiSong, read_midi_file
from .timeseries import (RawSeries, SongLookup, build_lookup, compute_target_T, events_to_timeseries,
                         load_lookup, normalize_length, save_lookup)

log = logging.getLogger(__name__)

MIDI_SUFFIXES = (".mid", ".midi", ".csv")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SEER_THREADS", "1")))
    except ValueError:
        return 1


def find_midi_files(midi_dir) -> dict[str, Path]:
    """Map file stem -> path; on stem clashes SMF beats MIDICSV."""
    found: dict[str, Path] = {}
    for path in sorted(Path(midi_dir).iterdir()):
        suffix = path.suffix.lower()
        if suffix not in MIDI_SUFFIXES or not path.is_file():
            continue
        prior = found.get(path.stem)
        if prior is None or (prior.suffix.lower() == ".csv" and suffix != ".csv"):
            found[path.stem] = path
    return found


def _load_series(path: Path):
    try:
        return events_to_timeseries(read_midi_file(path)), None
    except MidiParseError as exc:
        return None, str(exc)


@dataclass
class PrepareReport:
    n_triplet_songs: int
    n_midi_files: int
    n_songs: int
    n_users: int
    n_ratings: int
    timesteps: int
    skipped: dict[str, str] = field(default_factory=dict)


def prepare(midi_dir, triplets, out, min_unique: int = 20, timesteps="median",
            thresholds=DEFAULT_THRESHOLDS, seed: int = 0, test_fraction: float = 0.2) -> PrepareReport:
    """Intersect songs with MIDI, filter users, and write lookup.bin, songs.idx, split.csv."""
    out = Path(out)
    interactions = load_triplets(triplets)
    midi_files = find_midi_files(midi_dir)
    triplet_songs = {it.song_id for it in interactions}
    candidates = sorted(triplet_songs & midi_files.keys())
    if not candidates:
        raise ValueError(f"no overlapping songs: {len(triplet_songs)} in triplets, {len(midi_files)} MIDI files")

    paths = [midi_files[s] for s in candidates]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(_load_series, paths, chunksize=16))
    else:
        loaded = [_load_series(p) for p in paths]

    series: dict[str, RawSeries] = {}
    skipped: dict[str, str] = {}
    for sid, (raw, err) in zip(candidates, loaded):
        if raw is None:
            skipped[sid] = err
        elif len(raw) == 0:
            skipped[sid] = "no note-on events"
        else:
            series[sid] = raw
    for sid, why in skipped.items():
        log.warning("skipping %s: %s", sid, why)

    kept = filter_users([it for it in interactions if it.song_id in series], min_unique)
    song_ids = sorted({it.song_id for it in kept})
    if not song_ids:
        raise ValueError(f"no songs left after filtering: {len(candidates)} overlapping songs, "
                         f"{len(series)} parseable, 0 with users meeting min_unique={min_unique}")
    corpus = [series[s] for s in song_ids]
    T = compute_target_T(corpus) if timesteps in (None, "median") else int(timesteps)
    lookup = build_lookup([normalize_length(s, T) for s in corpus])
    dataset = build_dataset(kept, lookup.index, min_unique=min_unique, thresholds=thresholds,
                            test_fraction=test_fraction, seed=seed)

    out.mkdir(parents=True, exist_ok=True)
    save_lookup(lookup, out, [s.duration_us for s in corpus])
    write_split(dataset, out / "split.csv")
    midi_out = out / "midi"
    midi_out.mkdir(exist_ok=True)
    for sid in song_ids:
        src = midi_files[sid]
        shutil.copyfile(src, midi_out / f"{sid}{src.suffix.lower()}")
    config = {"timesteps": T, "min_unique": min_unique, "thresholds": list(thresholds), "seed": seed,
              "test_fraction": test_fraction}
    (out / "prepare.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return PrepareReport(len(triplet_songs), len(midi_files), len(song_ids), dataset.n_users,
                         len(dataset.train) + len(dataset.test), T, skipped)


class Corpus:
    """A prepared directory: lookup, split, and lazily parsed source songs."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not (self.directory / "lookup.bin").exists():
            raise FileNotFoundError(f"{self.directory}: not a prepared corpus (lookup.bin missing)")
        self.lookup: SongLookup
        self.lookup, self.durations = load_lookup(self.directory)
        self.dataset: Dataset = read_split(self.directory / "split.csv", self.lookup.index)
        cfg = self.directory / "prepare.json"
        self.config = json.loads(cfg.read_text(encoding="utf-8")) if cfg.exists() else {}
        self.song_ids = self.lookup.song_ids
        self._songs: dict[int, MidiSong] = {}
        self._series: dict[int, RawSeries] = {}
        self._files = find_midi_files(self.directory / "midi") if (self.directory / "midi").is_dir() else {}

    def song_index(self, song_id: str) -> int:
        try:
            return self.lookup.index[song_id]
        except KeyError:
            raise KeyError(f"unknown song id {song_id!r}") from None

    def user_index(self, user_id: str) -> int:
        try:
            return self.dataset.user_index[user_id]
        except KeyError:
            raise KeyError(f"unknown user id {user_id!r}") from None

    def midi_song(self, s: int) -> MidiSong:
        if s not in self._songs:
            sid = self.song_ids[s]
            if sid not in self._files:
                raise FileNotFoundError(f"no MIDI file for song {sid!r} under {self.directory / 'midi'}")
            self._songs[s] = read_midi_file(self._files[sid])
        return self._songs[s]

    def raw_series(self, s: int) -> RawSeries:
        if s not in self._series:
            self._series[s] = events_to_timeseries(self.midi_song(s))
        return self._series[s]
