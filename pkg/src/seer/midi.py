"""Standard MIDI File and MIDICSV ingestion.

Only note-on messages are kept as events; every other message is decoded
for framing and then dropped. Tempo meta events are collected into a tempo
map. Multiple tracks are merged into one tick-sorted stream.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

DEFAULT_TEMPO = 500_000  # us per quarter note (120 bpm)

# data bytes that follow each channel voice status nibble
_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


class MidiParseError(ValueError):
    """Raised for malformed MIDI input. ``offset`` is a byte offset or row number."""

    def __init__(self, message: str, offset: int | None = None, unit: str = "byte offset"):
        self.offset = offset
        self.reason = message
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class MidiEvent:
    tick: int
    channel: int
    note: int
    velocity: int


@dataclass(frozen=True)
class TempoChange:
    tick: int
    tempo: int


@dataclass
class MidiSong:
    division: int
    events: list[MidiEvent] = field(default_factory=list)
    tempo_map: list[TempoChange] = field(default_factory=list)
    source_id: str | None = None

    def __post_init__(self):
        if self.division <= 0:
            raise ValueError(f"division must be positive, got {self.division}")


# ---------------------------------------------------------------------------
# variable-length quantities
# ---------------------------------------------------------------------------

VLQ_MAX = (1 << 28) - 1


def encode_vlq(value: int) -> bytes:
    """Encode a non-negative integer (< 2**28) as a MIDI variable-length quantity."""
    if value < 0 or value > VLQ_MAX:
        raise ValueError(f"VLQ value out of range: {value}")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def decode_vlq(data: bytes, pos: int = 0, end: int | None = None) -> tuple[int, int]:
    """Decode a VLQ starting at ``pos``; returns ``(value, next_pos)``."""
    if end is None:
        end = len(data)
    value = 0
    start = pos
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", start)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", start)


# ---------------------------------------------------------------------------
# SMF reader
# ---------------------------------------------------------------------------

def _read_track(data: bytes, pos: int, end: int, track: int, drop_zero_velocity: bool,
                notes: list, tempos: list) -> None:
    tick = 0
    running = None
    while pos < end:
        delta, pos = decode_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event truncated after delta time", pos)
        status_pos = pos
        byte = data[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        elif running is None:
            raise MidiParseError("data byte without running status", status_pos)
        else:
            status = running

        if status == 0xFF:
            running = None
            if pos >= end:
                raise MidiParseError("truncated meta event", status_pos)
            meta_type = data[pos]
            length, pos = decode_vlq(data, pos + 1, end)
            if pos + length > end:
                raise MidiParseError("meta event runs past end of track", status_pos)
            payload = data[pos:pos + length]
            pos += length
            if meta_type == 0x51:
                if length != 3:
                    raise MidiParseError("tempo meta event must carry 3 bytes", status_pos)
                tempo = int.from_bytes(payload, "big")
                if tempo == 0:
                    raise MidiParseError("tempo of zero", status_pos)
                tempos.append((tick, track, TempoChange(tick, tempo)))
            elif meta_type == 0x2F:
                return
        elif status in (0xF0, 0xF7):
            running = None
            length, pos = decode_vlq(data, pos, end)
            if pos + length > end:
                raise MidiParseError("sysex event runs past end of track", status_pos)
            pos += length
        elif status >= 0xF0:
            raise MidiParseError(f"unexpected status byte 0x{status:02X} in track", status_pos)
        else:
            running = status
            n = _CHANNEL_DATA_LEN[status >> 4]
            if pos + n > end:
                raise MidiParseError("channel message truncated", status_pos)
            payload = data[pos:pos + n]
            if any(b & 0x80 for b in payload):
                raise MidiParseError("data byte with high bit set", pos)
            pos += n
            if status >> 4 == 0x9:
                if drop_zero_velocity and payload[1] == 0:
                    continue
                notes.append((tick, track, MidiEvent(tick, status & 0x0F, payload[0], payload[1])))


def parse_smf(data: bytes, source_id: str | None = None, drop_zero_velocity: bool = False) -> MidiSong:
    """Parse Standard MIDI File bytes (format 0 or 1) into a :class:`MidiSong`.

    Raises :class:`MidiParseError` naming the byte offset for any malformed input.
    """
    data = bytes(data)
    if len(data) < 14:
        raise MidiParseError("file too short for an SMF header", len(data))
    if data[:4] != b"MThd":
        raise MidiParseError("missing MThd header chunk", 0)
    length, fmt, ntracks, division = struct.unpack(">IHHH", data[4:14])
    if length < 6:
        raise MidiParseError(f"header chunk length {length} < 6", 4)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("division of zero pulses per quarter note", 12)

    pos = 8 + length
    if pos > len(data):
        raise MidiParseError("header chunk truncated", 4)
    notes: list = []
    tempos: list = []
    track = 0
    while track < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError(f"expected {ntracks} tracks, found {track}", pos)
        chunk_type = data[pos:pos + 4]
        (chunk_len,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        end = body + chunk_len
        if end > len(data):
            raise MidiParseError("chunk truncated", pos)
        if chunk_type == b"MTrk":
            _read_track(data, body, end, track, drop_zero_velocity, notes, tempos)
            track += 1
        # alien chunks are skipped
        pos = end

    # sort is stable: equal ticks keep track order, then in-track order
    notes.sort(key=lambda item: (item[0], item[1]))
    tempos.sort(key=lambda item: (item[0], item[1]))
    return MidiSong(
        division=division,
        events=[e for _, _, e in notes],
        tempo_map=[t for _, _, t in tempos],
        source_id=source_id,
    )


def read_midi_file(path, drop_zero_velocity: bool = False) -> MidiSong:
    """Read ``.mid``/``.midi`` (SMF) or ``.csv`` (MIDICSV) from disk; source_id is the stem."""
    from pathlib import Path

    path = Path(path)
    if path.suffix.lower() == ".csv":
        return parse_midicsv(path.read_text(encoding="utf-8"), source_id=path.stem,
                             drop_zero_velocity=drop_zero_velocity)
    return parse_smf(path.read_bytes(), source_id=path.stem, drop_zero_velocity=drop_zero_velocity)


# ---------------------------------------------------------------------------
# MIDICSV reader
# ---------------------------------------------------------------------------

def _int_field(row: list[str], i: int, rownum: int) -> int:
    try:
        return int(row[i])
    except (IndexError, ValueError):
        raise MidiParseError(f"non-numeric or missing field {i + 1}", rownum, unit="row") from None


def parse_midicsv(text: str, source_id: str | None = None, drop_zero_velocity: bool = False) -> MidiSong:
    """Parse the MIDICSV text layout. Only ``Note_on_c`` rows become events."""
    division = None
    notes: list = []
    tempos: list = []
    reader = csv.reader(io.StringIO(text), skipinitialspace=True)
    for rownum, row in enumerate(reader, start=1):
        if len(row) < 3:
            continue
        kind = row[2].strip()
        if kind == "Header":
            division = _int_field(row, 5, rownum)
            if division <= 0:
                raise MidiParseError("division must be a positive pulse count", rownum, unit="row")
        elif kind == "Note_on_c":
            track = _int_field(row, 0, rownum)
            tick = _int_field(row, 1, rownum)
            channel = _int_field(row, 3, rownum)
            note = _int_field(row, 4, rownum)
            velocity = _int_field(row, 5, rownum)
            if tick < 0 or not 0 <= channel <= 15 or not 0 <= note <= 127 or not 0 <= velocity <= 127:
                raise MidiParseError("note-on field out of range", rownum, unit="row")
            if drop_zero_velocity and velocity == 0:
                continue
            notes.append((tick, track, MidiEvent(tick, channel, note, velocity)))
        elif kind == "Tempo":
            track = _int_field(row, 0, rownum)
            tick = _int_field(row, 1, rownum)
            tempo = _int_field(row, 3, rownum)
            if tempo <= 0 or tick < 0:
                raise MidiParseError("tempo must be positive", rownum, unit="row")
            tempos.append((tick, track, TempoChange(tick, tempo)))
    if division is None:
        raise MidiParseError("missing Header row with division")
    notes.sort(key=lambda item: (item[0], item[1]))
    tempos.sort(key=lambda item: (item[0], item[1]))
    return MidiSong(division, [e for *_, e in notes], [t for *_, t in tempos], source_id)


# ---------------------------------------------------------------------------
# writer
# ---------------------------------------------------------------------------

def tempo_at(song: MidiSong, tick: int) -> int:
    """Tempo in effect at ``tick`` (the last change at or before it)."""
    tempo = DEFAULT_TEMPO
    for change in song.tempo_map:
        if change.tick > tick:
            break
        tempo = change.tempo
    return tempo


def _smf_bytes(division: int, timed: list[tuple[int, int, bytes]]) -> bytes:
    # timed: (tick, priority, raw message); priority orders events sharing a tick
    timed.sort(key=lambda item: (item[0], item[1]))
    body = bytearray()
    last = 0
    for tick, _, msg in timed:
        body += encode_vlq(tick - last)
        body += msg
        last = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, division)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_segment_midi(song: MidiSong, step_range: tuple[int, int]) -> bytes:
    """Render events ``step_range[0]..step_range[1]`` (inclusive) as a format-0 SMF.

    Ticks are rebased so the first selected event sits at tick 0; each note-on
    with non-zero velocity is closed by a note-off one quarter note later.
    """
    start, stop = step_range
    if stop < start:
        raise ValueError("empty segment")
    if not song.events:
        raise ValueError("song has no events")
    if start < 0 or stop >= len(song.events):
        raise ValueError(f"step range {step_range} outside 0..{len(song.events) - 1}")
    selected = song.events[start:stop + 1]
    base = selected[0].tick
    last = selected[-1].tick

    timed: list[tuple[int, int, bytes]] = [(0, 0, _tempo_msg(tempo_at(song, base)))]
    for change in song.tempo_map:
        if base < change.tick <= last:
            timed.append((change.tick - base, 0, _tempo_msg(change.tempo)))
    for seq, ev in enumerate(selected):
        t = ev.tick - base
        timed.append((t, 2 + seq, bytes([0x90 | ev.channel, ev.note, ev.velocity])))
        if ev.velocity > 0:
            # note-offs sort ahead of note-ons at the same tick
            timed.append((t + song.division, 1, bytes([0x80 | ev.channel, ev.note, 0x40])))
    return _smf_bytes(song.division, timed)


def _tempo_msg(tempo: int) -> bytes:
    return b"\xff\x51\x03" + tempo.to_bytes(3, "big")


def write_song_midi(song: MidiSong) -> bytes:
    """Serialize a whole song (tempo map plus note-ons with note-offs)."""
    if song.events:
        return write_segment_midi(song, (0, len(song.events) - 1))
    timed = [(c.tick, 0, _tempo_msg(c.tempo)) for c in song.tempo_map]
    return _smf_bytes(song.division, timed)
