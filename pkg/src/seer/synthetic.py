"""Planted-preference corpus: archetype-styled MIDI songs plus play-count triplets.

Each archetype owns two MIDI channels, a pitch register and a velocity
range, and a handful of motifs. Songs are stitched from one archetype's
motifs. Users belong to one archetype, play most of its songs many times
and a few other songs once or twice.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .midi import MidiEvent, MidiSong, TempoChange, write_song_midi
from .rng import substream

TEMPOS = (400_000, 500_000, 600_000)


@dataclass
class SyntheticSpec:
    n_users: int = 30
    n_songs: int = 40
    n_archetypes: int = 2
    min_events: int = 40
    max_events: int = 90
    seed: int = 7
    division: int = 480
    min_unique: int = 20
    matched_share: float = 0.8     # fraction of own-archetype songs each user plays
    mismatched_share: float = 0.35

    def validate(self):
        if self.n_archetypes < 1 or self.n_archetypes > 8:
            raise ValueError("n_archetypes must be in 1..8")
        if self.n_songs < self.n_archetypes or self.n_users < 1:
            raise ValueError("need at least one song per archetype and one user")
        if not 1 <= self.min_events <= self.max_events:
            raise ValueError("need 1 <= min_events <= max_events")


@dataclass
class Archetype:
    channels: tuple[int, int]
    motifs: list[list[tuple[int, int, int, int]]]   # (channel, note, velocity, delta ticks)


def _archetypes(spec: SyntheticSpec, rng) -> list[Archetype]:
    out = []
    span = 60 // max(spec.n_archetypes, 1)
    for a in range(spec.n_archetypes):
        channels = (2 * a, 2 * a + 1)
        low = 30 + a * span
        vel_low = 40 + (a * 80) // max(spec.n_archetypes, 1)
        motifs = []
        for _ in range(3):
            motif = []
            for _ in range(8):
                ch = channels[int(rng.integers(2))]
                note = int(rng.integers(low, low + span + 10))
                vel = int(rng.integers(vel_low, min(vel_low + 30, 128)))
                delta = int(rng.choice([0, spec.division // 4, spec.division // 2, spec.division // 2]))
                motif.append((ch, note, vel, delta))
            motifs.append(motif)
        out.append(Archetype(channels, motifs))
    return out


def _song(spec: SyntheticSpec, arch: Archetype, rng, song_id: str) -> MidiSong:
    n = int(rng.integers(spec.min_events, spec.max_events + 1))
    events = []
    tick = 0
    while len(events) < n:
        motif = arch.motifs[int(rng.integers(len(arch.motifs)))]
        for ch, note, vel, delta in motif:
            if len(events) == n:
                break
            if events:
                tick += delta
            note = min(127, max(0, note + int(rng.integers(-2, 3))))
            events.append(MidiEvent(tick, ch, note, vel))
    tempo = int(TEMPOS[int(rng.integers(len(TEMPOS)))])
    tempo_map = [TempoChange(0, tempo)]
    if rng.random() < 0.3 and tick > 0:
        tempo_map.append(TempoChange(tick // 2, int(TEMPOS[int(rng.integers(len(TEMPOS)))])))
    return MidiSong(spec.division, events, tempo_map, song_id)


def generate(spec: SyntheticSpec):
    """Build songs, archetype assignments and triplets in memory."""
    spec.validate()
    rng = substream(spec.seed, "synthetic")
    archetypes = _archetypes(spec, rng)
    song_arch = rng.permutation(np.arange(spec.n_songs) % spec.n_archetypes)
    user_arch = rng.permutation(np.arange(spec.n_users) % spec.n_archetypes)
    songs = {}
    for i in range(spec.n_songs):
        sid = f"song{i:03d}"
        songs[sid] = _song(spec, archetypes[int(song_arch[i])], rng, sid)
    song_ids = list(songs)

    triplets = []
    for u in range(spec.n_users):
        uid = f"user{u:03d}"
        own = [s for s, a in zip(song_ids, song_arch) if a == user_arch[u]]
        other = [s for s, a in zip(song_ids, song_arch) if a != user_arch[u]]
        n_own = min(len(own), max(1, round(spec.matched_share * len(own))))
        n_other = min(len(other), max(round(spec.mismatched_share * len(other)), spec.min_unique - n_own))
        for s in rng.choice(own, size=n_own, replace=False):
            triplets.append((uid, str(s), int(rng.integers(5, 40))))
        for s in rng.choice(other, size=n_other, replace=False) if n_other else []:
            triplets.append((uid, str(s), int(rng.integers(1, 3))))
    manifest = {
        "spec": asdict(spec),
        "song_archetype": {s: int(a) for s, a in zip(song_ids, song_arch)},
        "user_archetype": {f"user{u:03d}": int(a) for u, a in enumerate(user_arch)},
    }
    return songs, triplets, manifest


def write_corpus(spec: SyntheticSpec, out) -> dict:
    """Write ``midi/*.mid``, ``triplets.tsv`` and ``planted.json`` under ``out``."""
    out = Path(out)
    (out / "midi").mkdir(parents=True, exist_ok=True)
    songs, triplets, manifest = generate(spec)
    for sid, song in songs.items():
        (out / "midi" / f"{sid}.mid").write_bytes(write_song_midi(song))
    with open(out / "triplets.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for uid, sid, count in triplets:
            fh.write(f"{uid}\t{sid}\t{count}\n")
    (out / "planted.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
