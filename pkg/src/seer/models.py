"""SeER rating model, MF and ItemPop baselines, ranking, and checkpoints.

SeER predicts ``U_u . h_T(song)`` where ``h_T`` is the final hidden state of
a recurrent cell run over the song's time series. MF swaps the recurrent
song tower for a learned item embedding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .rng import substream
from .timeseries import N_FEATURES, SongLookup

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "SEERCKPT v1"


def _uniform(rng, shape, dtype):
    return rng.uniform(-nn.INIT_SCALE, nn.INIT_SCALE, size=shape).astype(dtype)


@dataclass
class SeerModel:
    user_factors: np.ndarray
    layers: list[nn.CellParams]
    timesteps: int | None = None
    seed: int = 0

    @classmethod
    def create(cls, n_users: int, d: int = 150, cell_type: str = "gru", n_layers: int = 1,
               seed: int = 0, timesteps: int | None = None, dtype=np.float32) -> "SeerModel":
        rng = substream(seed, "init")
        users = _uniform(rng, (n_users, d), dtype)
        layers = [nn.init_cell(cell_type, N_FEATURES if i == 0 else d, d, rng, dtype) for i in range(n_layers)]
        return cls(users, layers, timesteps, seed)

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    @property
    def cell_type(self) -> str:
        return self.layers[0].cell_type

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {"user_factors": self.user_factors}
        for i, p in enumerate(self.layers):
            for name, t in p.tensors().items():
                out[f"layer{i}.{name}"] = t
        return out

    def hidden(self, series, lengths=None) -> np.ndarray:
        return nn.sequence_forward(self.layers, series, lengths)

    def predict(self, u: int, series, valid_steps: int | None = None) -> float:
        """Rating of user ``u`` for one song (or segment) series; not clamped."""
        self._check_user(u)
        data = getattr(series, "data", series)
        if valid_steps is None:
            valid_steps = getattr(series, "valid_steps", np.asarray(data).shape[0])
        h = nn.sequence_forward(self.layers, data, valid_steps)
        return float(np.dot(self.user_factors[u], h))

    def song_states(self, lookup: SongLookup, rows=None, chunk: int = 256) -> np.ndarray:
        """Final hidden states for lookup rows (all rows by default), batched."""
        rows = np.arange(lookup.matrix.shape[0]) if rows is None else np.asarray(rows)
        out = np.zeros((len(rows), self.d), dtype=self.user_factors.dtype)
        for a in range(0, len(rows), chunk):
            r = rows[a:a + chunk]
            out[a:a + chunk] = self.hidden(lookup.batch(r), lookup.valid_steps[r])
        return out

    def _check_user(self, u):
        if not 0 <= u < self.n_users:
            raise IndexError(f"unknown user index {u}")


@dataclass
class MfModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    seed: int = 0

    @classmethod
    def create(cls, n_users: int, n_songs: int, d: int = 150, seed: int = 0, dtype=np.float32) -> "MfModel":
        rng = substream(seed, "init")
        return cls(_uniform(rng, (n_users, d), dtype), _uniform(rng, (n_songs, d), dtype), seed)

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"user_factors": self.user_factors, "item_factors": self.item_factors}

    def predict(self, u: int, s: int) -> float:
        if not 0 <= u < self.user_factors.shape[0]:
            raise IndexError(f"unknown user index {u}")
        return float(np.dot(self.user_factors[u], self.item_factors[s]))

    def score(self, u: int, songs) -> np.ndarray:
        return self.item_factors[np.asarray(songs, dtype=np.int64)] @ self.user_factors[u]


class SeerScorer:
    """SeER bound to a song lookup, with song hidden states computed once."""

    def __init__(self, model: SeerModel, lookup: SongLookup):
        if model.timesteps is not None and model.timesteps != lookup.timesteps:
            raise ValueError(f"model trained with T={model.timesteps}, lookup has T={lookup.timesteps}")
        self.model = model
        self.lookup = lookup
        self.states = model.song_states(lookup)

    def score(self, u: int, songs) -> np.ndarray:
        self.model._check_user(u)
        return self.states[np.asarray(songs, dtype=np.int64)] @ self.model.user_factors[u]


@dataclass
class ItemPop:
    counts: np.ndarray

    @classmethod
    def fit(cls, train, n_songs: int) -> "ItemPop":
        counts = np.zeros(n_songs, dtype=np.int64)
        for t in train:
            counts[t.song] += 1
        return cls(counts)

    def ranking(self) -> list[int]:
        """Songs by train interaction count, descending; ties by ascending index."""
        return [int(s) for s in np.argsort(-self.counts, kind="stable") if self.counts[s] > 0]

    def score(self, u: int, songs) -> np.ndarray:
        return self.counts[np.asarray(songs, dtype=np.int64)].astype(np.float64)


def itempop_rank(train, n_songs: int | None = None) -> list[int]:
    train = list(train)
    if n_songs is None:
        n_songs = 1 + max((t.song for t in train), default=-1)
    return ItemPop.fit(train, n_songs).ranking()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batches(train, batch_size: int, seed: int, epoch: int):
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = substream(seed, "shuffle", epoch).permutation(len(train))
    users = np.fromiter((t.user for t in train), dtype=np.int64, count=len(train))[order]
    songs = np.fromiter((t.song for t in train), dtype=np.int64, count=len(train))[order]
    ratings = np.fromiter((t.rating for t in train), dtype=np.float64, count=len(train))[order]
    for a in range(0, len(train), batch_size):
        yield users[a:a + batch_size], songs[a:a + batch_size], ratings[a:a + batch_size]


def seer_loss_and_grads(model: SeerModel, lookup: SongLookup, users, songs, ratings):
    """Batch MSE and its exact gradients w.r.t. every parameter in ``model.params()``."""
    users = np.asarray(users, dtype=np.int64)
    songs = np.asarray(songs, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("empty batch")
    dtype = model.user_factors.dtype
    ratings = np.asarray(ratings, dtype=dtype)
    # each distinct song is gathered and unrolled once per batch
    uniq, inverse = np.unique(songs, return_inverse=True)
    h_uniq, tape = nn.sequence_forward(model.layers, lookup.batch(uniq), lookup.valid_steps[uniq], record=True)
    h = h_uniq[inverse]
    uu = model.user_factors[users]
    pred = np.sum(uu * h, axis=1)
    resid = pred - ratings
    B = len(users)
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    dpred = (2.0 / B) * resid
    dh = np.zeros_like(h_uniq)
    np.add.at(dh, inverse, dpred[:, None] * uu)
    layer_grads = nn.backward(tape, dh)
    grads = {"user_factors": nn.embedding_grad(model.n_users, users, dpred[:, None] * h)}
    for i, g in enumerate(layer_grads):
        for name, t in g.items():
            grads[f"layer{i}.{name}"] = t
    return loss, grads, pred


def seer_train_epoch(model: SeerModel, lookup: SongLookup, train, adam: nn.AdamState, batch_size: int = 500,
                     seed: int = 0, epoch: int = 0, clip: float | None = 5.0) -> float:
    """One pass over shuffled ``train``; returns the epoch's mean squared error."""
    if not train:
        raise ValueError("empty training set")
    if model.timesteps is None:
        model.timesteps = lookup.timesteps
    params = model.params()
    sse = 0.0
    for users, songs, ratings in _batches(train, batch_size, seed, epoch):
        loss, grads, _ = seer_loss_and_grads(model, lookup, users, songs, ratings)
        sse += loss * len(users)
        nn.clip_global_norm(grads, clip)
        nn.adam_update(params, grads, adam)
    return sse / len(train)


def mf_loss_and_grads(model: MfModel, users, songs, ratings):
    users = np.asarray(users, dtype=np.int64)
    songs = np.asarray(songs, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("empty batch")
    uu = model.user_factors[users]
    vv = model.item_factors[songs]
    resid = np.sum(uu * vv, axis=1) - np.asarray(ratings, dtype=uu.dtype)
    B = len(users)
    dpred = (2.0 / B) * resid
    grads = {
        "user_factors": nn.embedding_grad(model.user_factors.shape[0], users, dpred[:, None] * vv),
        "item_factors": nn.embedding_grad(model.item_factors.shape[0], songs, dpred[:, None] * uu),
    }
    return float(np.mean(resid.astype(np.float64) ** 2)), grads


def mf_train_epoch(model: MfModel, train, adam: nn.AdamState, batch_size: int = 500, seed: int = 0,
                   epoch: int = 0, clip: float | None = 5.0) -> float:
    if not train:
        raise ValueError("empty training set")
    params = model.params()
    sse = 0.0
    for users, songs, ratings in _batches(train, batch_size, seed, epoch):
        loss, grads = mf_loss_and_grads(model, users, songs, ratings)
        sse += loss * len(users)
        nn.clip_global_norm(grads, clip)
        nn.adam_update(params, grads, adam)
    return sse / len(train)


def fit(model, train, epochs: int = 20, batch_size: int = 500, lr: float = 0.001, seed: int = 0,
        clip: float | None = 5.0, lookup: SongLookup | None = None, adam: nn.AdamState | None = None) -> list[float]:
    """Train SeER (needs ``lookup``) or MF for ``epochs``; returns per-epoch MSE."""
    adam = adam or nn.AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        if isinstance(model, SeerModel):
            if lookup is None:
                raise ValueError("SeER training needs a song lookup")
            mse = seer_train_epoch(model, lookup, train, adam, batch_size, seed, epoch, clip)
        else:
            mse = mf_train_epoch(model, train, adam, batch_size, seed, epoch, clip)
        log.info("epoch %d mse %.6f", epoch + 1, mse)
        history.append(mse)
    return history


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

@dataclass
class RankedList:
    user: int
    items: list[tuple[int, float]] = field(default_factory=list)

    @property
    def songs(self) -> list[int]:
        return [s for s, _ in self.items]


def recommend(scorer, u: int, K: int = 10, candidates=None, n_songs: int | None = None,
              rated=None) -> RankedList:
    """Top-``K`` candidates by score, descending; ties by ascending song index.

    ``candidates`` defaults to all ``n_songs`` songs minus ``rated``. Songs
    with no training interactions are scored like any other.
    """
    if candidates is None:
        if n_songs is None:
            raise ValueError("need candidates or n_songs")
        rated = rated or ()
        candidates = [s for s in range(n_songs) if s not in rated]
    cand = np.array(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if cand.size == 0:
        return RankedList(u, [])
    scores = np.asarray(scorer.score(u, cand))
    order = np.argsort(-scores, kind="stable")[:K]
    return RankedList(u, [(int(cand[i]), float(scores[i])) for i in order])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, **meta) -> None:
    """Text header plus raw little-endian float32 tensor blocks."""
    if isinstance(model, SeerModel):
        header = {"model": "seer", "cell_type": model.cell_type, "d": model.d, "layers": len(model.layers),
                  "users": model.n_users, "songs": meta.pop("songs", ""), "T": model.timesteps or "",
                  "seed": model.seed}
    else:
        header = {"model": "mf", "cell_type": "", "d": model.d, "layers": 0,
                  "users": model.user_factors.shape[0], "songs": model.item_factors.shape[0],
                  "T": "", "seed": model.seed}
    header.update(meta)
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        for key, value in header.items():
            fh.write(f"{key}={value}\n".encode())
        fh.write(b"\n")
        for name, t in model.params().items():
            dims = ",".join(str(x) for x in t.shape)
            fh.write(f"{name} {t.ndim} {dims}\n".encode())
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, metadata)``."""
    raw = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ValueError(f"{path}: truncated checkpoint")
        text = raw[pos:end].decode()
        pos = end + 1
        return text

    if line() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    meta: dict[str, str] = {}
    while (text := line()) != "":
        key, _, value = text.partition("=")
        meta[key] = value
    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        name, rank, dims = line().split(" ")
        shape = tuple(int(x) for x in dims.split(","))
        if len(shape) != int(rank):
            raise ValueError(f"{path}: block {name} rank {rank} does not match dims {dims}")
        n = int(np.prod(shape)) * 4
        if pos + n > len(raw):
            raise ValueError(f"{path}: block {name} truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += n
    seed = int(meta.get("seed") or 0)
    if meta.get("model") == "mf":
        return MfModel(tensors["user_factors"], tensors["item_factors"], seed), meta
    layers = []
    for i in range(int(meta["layers"])):
        layers.append(nn.CellParams(meta["cell_type"], tensors[f"layer{i}.w_input"],
                                    tensors[f"layer{i}.w_hidden"], tensors[f"layer{i}.bias"]))
    T = int(meta["T"]) if meta.get("T") else None
    return SeerModel(tensors["user_factors"], layers, T, seed), meta
