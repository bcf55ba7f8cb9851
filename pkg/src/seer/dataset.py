"""Play-count triplets -> filtered 1..5 ratings -> indexed train/test split."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

from .rng import substream

DEFAULT_THRESHOLDS = (1, 2, 4, 8)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    song_id: str
    play_count: int


@dataclass(frozen=True)
class RatingTriple:
    user: int
    song: int
    rating: int


@dataclass
class Dataset:
    user_index: dict[str, int]
    song_index: dict[str, int]
    train: list[RatingTriple]
    test: list[RatingTriple]
    rated_by_user: dict[int, set[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.rated_by_user:
            self.rated_by_user = _rated(self.train)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_songs(self) -> int:
        return len(self.song_index)

    @property
    def user_ids(self) -> list[str]:
        return _inverse(self.user_index)

    @property
    def song_ids(self) -> list[str]:
        return _inverse(self.song_index)

    def test_by_user(self, min_rating: int | None = None) -> dict[int, set[int]]:
        out: dict[int, set[int]] = defaultdict(set)
        for t in self.test:
            if min_rating is None or t.rating >= min_rating:
                out[t.user].add(t.song)
        return dict(out)


def _inverse(index: dict[str, int]) -> list[str]:
    ids = [""] * len(index)
    for key, i in index.items():
        ids[i] = key
    return ids


def _rated(triples) -> dict[int, set[int]]:
    out: dict[int, set[int]] = defaultdict(set)
    for t in triples:
        out[t.user].add(t.song)
    return dict(out)


def load_triplets(path) -> list[Interaction]:
    """Read tab-separated ``user  song  count`` lines; duplicate pairs are summed."""
    counts: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                count = int(parts[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: play count {parts[2]!r} is not an integer") from None
            if count < 1:
                raise ValueError(f"{path}:{lineno}: play count must be >= 1")
            key = (parts[0], parts[1])
            counts[key] = counts.get(key, 0) + count
    return [Interaction(u, s, c) for (u, s), c in counts.items()]


def filter_users(interactions, min_unique: int = 20) -> list[Interaction]:
    """Drop every user with fewer than ``min_unique`` distinct songs."""
    songs: dict[str, set[str]] = defaultdict(set)
    for it in interactions:
        songs[it.user_id].add(it.song_id)
    keep = {u for u, s in songs.items() if len(s) >= min_unique}
    return [it for it in interactions if it.user_id in keep]


def rating_for(play_count: int, thresholds=DEFAULT_THRESHOLDS) -> int:
    return 1 + sum(play_count > t for t in thresholds)


def playcounts_to_ratings(interactions, thresholds=DEFAULT_THRESHOLDS,
                          user_index: dict[str, int] | None = None,
                          song_index: dict[str, int] | None = None) -> list[RatingTriple]:
    """Map play counts onto 1..5 stars: one star plus one per threshold exceeded.

    Indices default to a canonical sort of the ids present.
    """
    thresholds = tuple(thresholds)
    if len(thresholds) != 4 or any(b <= a for a, b in zip(thresholds, thresholds[1:])) or thresholds[0] < 1:
        raise ValueError(f"thresholds must be 4 strictly ascending positive integers, got {thresholds}")
    interactions = list(interactions)
    if user_index is None:
        user_index = index_ids(it.user_id for it in interactions)
    if song_index is None:
        song_index = index_ids(it.song_id for it in interactions)
    return [RatingTriple(user_index[it.user_id], song_index[it.song_id], rating_for(it.play_count, thresholds))
            for it in interactions]


def index_ids(ids) -> dict[str, int]:
    return {key: i for i, key in enumerate(sorted(set(ids)))}


def split(ratings, user_index: dict[str, int], song_index: dict[str, int],
          test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Per-user stratified split: ``ceil(test_fraction * n_u)`` ratings to test.

    A user with a single rating keeps it in train.
    """
    by_user: dict[int, list[RatingTriple]] = defaultdict(list)
    for r in ratings:
        by_user[r.user].append(r)
    rng = substream(seed, "split")
    train: list[RatingTriple] = []
    test: list[RatingTriple] = []
    for u in sorted(by_user):
        items = sorted(by_user[u], key=lambda r: r.song)
        n = len(items)
        n_test = 0 if n < 2 else min(math.ceil(test_fraction * n - 1e-9), n - 1)
        order = rng.permutation(n)
        chosen = set(order[:n_test].tolist())
        for i, r in enumerate(items):
            (test if i in chosen else train).append(r)
    return Dataset(user_index, song_index, train, test)


def write_split(dataset: Dataset, path) -> None:
    users = dataset.user_ids
    songs = dataset.song_ids
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user,song,rating,fold\n")
        for fold, triples in (("train", dataset.train), ("test", dataset.test)):
            for t in triples:
                fh.write(f"{users[t.user]},{songs[t.song]},{t.rating},{fold}\n")


def read_split(path, song_index: dict[str, int]) -> Dataset:
    """Rebuild a :class:`Dataset` from ``split.csv``; users are indexed by sorted id."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "user,song,rating,fold":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            user, song, rating, fold = line.rstrip("\n").rsplit(",", 3)
            if fold not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: unknown fold {fold!r}")
            rows.append((user, song, int(rating), fold))
    user_index = index_ids(r[0] for r in rows)
    train, test = [], []
    for user, song, rating, fold in rows:
        triple = RatingTriple(user_index[user], song_index[song], rating)
        (train if fold == "train" else test).append(triple)
    return Dataset(user_index, song_index, train, test)


def build_dataset(interactions, song_index: dict[str, int], min_unique: int = 20,
                  thresholds=DEFAULT_THRESHOLDS, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Filter, map to ratings and split. Songs outside ``song_index`` are ignored."""
    kept = [it for it in interactions if it.song_id in song_index]
    kept = filter_users(kept, min_unique)
    user_index = index_ids(it.user_id for it in kept)
    ratings = playcounts_to_ratings(kept, thresholds, user_index, song_index)
    return split(ratings, user_index, song_index, test_fraction, seed)
