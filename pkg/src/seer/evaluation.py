"""Ranking metrics, DTW-based explanation validation, and tag percentage matching."""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations

import numba
import numpy as np

from .dataset import Dataset
from .explain import segment_forward_propagation
from .models import SeerModel, SeerScorer, recommend
from .rng import substream
from .timeseries import RawSeries, extract_segments

log = logging.getLogger(__name__)

LIKED_ABOVE = 3


# ---------------------------------------------------------------------------
# MAP@K
# ---------------------------------------------------------------------------

def average_precision_at_k(ranking, relevant, K: int) -> float:
    """AP@K normalised by ``min(K, |relevant|)``; 0 when nothing is relevant."""
    if K < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for i, item in enumerate(list(ranking)[:K], start=1):
        if item in relevant:
            hits += 1
            total += hits / i
    return total / min(K, len(relevant))


@dataclass
class EvalReport:
    model: str
    K: int
    map: float
    per_user: list[tuple[int, float]] = field(default_factory=list)
    seed: int | None = None

    def to_csv(self, path, user_ids=None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("model,k,user,ap\n")
            for u, ap in self.per_user:
                uid = user_ids[u] if user_ids is not None else u
                fh.write(f"{self.model},{self.K},{uid},{ap:.12f}\n")


def map_at_k(scorer, dataset: Dataset, K: int = 10, relevance_min_rating: int | None = None,
             name: str = "model", seed: int | None = None) -> EvalReport:
    """Mean AP@K over users holding at least one relevant test item.

    Candidates per user are all songs except that user's train songs.
    """
    relevant = dataset.test_by_user(relevance_min_rating)
    per_user = []
    for u in sorted(relevant):
        ranked = recommend(scorer, u, K, n_songs=dataset.n_songs, rated=dataset.rated_by_user.get(u, set()))
        per_user.append((u, average_precision_at_k(ranked.songs, relevant[u], K)))
    mean = float(np.mean([ap for _, ap in per_user])) if per_user else 0.0
    return EvalReport(name, K, mean, per_user, seed)


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _dtw_kernel(a, b):
    n, m, f = a.shape[0], b.shape[0], a.shape[1]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        for j in range(1, m + 1):
            s = 0.0
            for k in range(f):
                diff = a[i - 1, k] - b[j - 1, k]
                s += diff * diff
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = np.sqrt(s) + best
        prev, cur = cur, prev
    return prev[m]


def dtw(a, b) -> float:
    """Unconstrained DTW with Euclidean local cost between rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty series")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature counts differ: {a.shape[1]} vs {b.shape[1]}")
    return float(_dtw_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b)))


def avg_pairwise_dtw(series_list) -> float:
    """Mean DTW over unordered distinct pairs (the zero diagonal is excluded)."""
    series_list = list(series_list)
    if len(series_list) < 2:
        raise ValueError("need at least 2 series")
    dists = [dtw(a, b) for a, b in combinations(series_list, 2)]
    return float(np.mean(dists))


@dataclass
class DtwValidationRow:
    user: int
    dtw_e: float
    dtw_r: float


def _sample_users(users, n_users: int, seed: int) -> list[int]:
    users = sorted(users)
    if n_users >= len(users):
        return users
    picked = substream(seed, "sampling").choice(len(users), size=n_users, replace=False)
    return sorted(users[i] for i in picked)


def validate_explanations(model: SeerModel, lookup, dataset: Dataset, raw_series, n_users: int = 100,
                          seed: int = 0, top_n: int = 5, window_s: int = 10, stride_s: int = 1,
                          scorer: SeerScorer | None = None) -> list[DtwValidationRow]:
    """Per sampled user: mean pairwise DTW among explanations vs. among random segments.

    ``raw_series`` maps a song index to its :class:`RawSeries` (dict or callable).
    """
    get = raw_series if callable(raw_series) else raw_series.__getitem__
    scorer = scorer or SeerScorer(model, lookup)
    rows = []
    for u in _sample_users(range(dataset.n_users), n_users, seed):
        ranked = recommend(scorer, u, top_n, n_songs=dataset.n_songs, rated=dataset.rated_by_user.get(u, set()))
        if len(ranked.items) < top_n:
            log.info("user %d skipped: only %d scorable candidates", u, len(ranked.items))
            continue
        rng = substream(seed, "random-segments", u)
        explained, random_segs = [], []
        for s in ranked.songs:
            series: RawSeries = get(s)
            exp = segment_forward_propagation(model, u, series, window_s, stride_s)
            explained.append(series.rows[exp.segment.steps])
            candidates = extract_segments(series, window_s, stride_s)
            pick = candidates[int(rng.integers(len(candidates)))]
            random_segs.append(series.rows[pick.steps])
        rows.append(DtwValidationRow(u, avg_pairwise_dtw(explained), avg_pairwise_dtw(random_segs)))
    return rows


def write_dtw_rows(rows, path, user_ids=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user,dtw_e,dtw_r\n")
        for r in rows:
            uid = user_ids[r.user] if user_ids is not None else r.user
            fh.write(f"{uid},{r.dtw_e:.6f},{r.dtw_r:.6f}\n")


# ---------------------------------------------------------------------------
# tag percentage matching
# ---------------------------------------------------------------------------

def percentage_matching(tag_sets, top_tags) -> float:
    """Percent of songs whose tag set shares at least one tag with ``top_tags``."""
    tag_sets = list(tag_sets)
    if not tag_sets:
        raise ValueError("empty song list")
    top_tags = set(top_tags)
    hits = sum(1 for tags in tag_sets if set(tags) & top_tags)
    return 100.0 * hits / len(tag_sets)


def avg_percentage_matching(per_user_lists: dict, profiles: dict, k: int) -> float:
    """Arithmetic mean of per-user percentage matching with each user's top-``k`` tags."""
    values = [percentage_matching(songs, profiles[u].top(k)) for u, songs in sorted(per_user_lists.items())]
    return float(np.mean(values)) if values else 0.0


@dataclass
class TagProfile:
    user: int
    ranked_tags: list[str]

    def top(self, k: int) -> set[str]:
        return set(self.ranked_tags[:k])


def build_tag_profile(user: int, liked_songs, song_tags: dict) -> TagProfile:
    """Tags ranked by frequency over the user's liked songs; ties alphabetical."""
    counts = Counter(tag for s in liked_songs for tag in song_tags.get(s, ()))
    return TagProfile(user, [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))])


def liked_songs(dataset: Dataset) -> dict[int, list[int]]:
    out: dict[int, list[int]] = defaultdict(list)
    for t in (*dataset.train, *dataset.test):
        if t.rating > LIKED_ABOVE:
            out[t.user].append(t.song)
    return {u: sorted(s) for u, s in out.items()}


def load_song_tags(path, song_index: dict[str, int] | None = None) -> dict:
    """Read ``song_id,tag`` lines; keys become song indices when ``song_index`` is given."""
    tags: dict = defaultdict(set)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            sid, sep, tag = line.partition(",")
            if not sep or not tag:
                raise ValueError(f"{path}:{lineno}: expected song_id,tag")
            if song_index is not None:
                if sid not in song_index:
                    continue
                sid = song_index[sid]
            tags[sid].add(tag.strip())
    return dict(tags)


@dataclass
class TagMatchRow:
    user: int
    k: int
    pct_rec: float
    pct_exp: float


def tag_matching(scorer, dataset: Dataset, song_tags: dict, explanation_tags: dict | None = None,
                 n_users: int = 100, seed: int = 0, top_n: int = 5, ks=(1, 2, 3),
                 min_liked: int = 10) -> list[TagMatchRow]:
    """Per-user matching of top-``top_n`` recommendations and their explanations with top-k tags.

    ``explanation_tags`` maps ``(user, song)`` to the tag set of that user's
    explanation segment; without it an explanation inherits its song's tags.
    """
    liked = liked_songs(dataset)
    eligible = [u for u, songs in liked.items() if len(songs) >= min_liked]
    rows = []
    for u in _sample_users(eligible, n_users, seed):
        profile = build_tag_profile(u, liked[u], song_tags)
        ranked = recommend(scorer, u, top_n, n_songs=dataset.n_songs, rated=dataset.rated_by_user.get(u, set()))
        if not ranked.items:
            continue
        rec_tags = [song_tags.get(s, set()) for s in ranked.songs]
        if explanation_tags is None:
            exp_tags = rec_tags
        else:
            exp_tags = [explanation_tags.get((u, s), song_tags.get(s, set())) for s in ranked.songs]
        for k in ks:
            top = profile.top(k)
            rows.append(TagMatchRow(u, k, percentage_matching(rec_tags, top), percentage_matching(exp_tags, top)))
    return rows


def write_tag_rows(rows, path, user_ids=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user,k,pct_rec,pct_exp\n")
        for r in rows:
            uid = user_ids[r.user] if user_ids is not None else r.user
            fh.write(f"{uid},{r.k},{r.pct_rec:.6f},{r.pct_exp:.6f}\n")
