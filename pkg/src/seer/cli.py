"""``seer`` command line: prepare, train, recommend, explain, evaluate, validate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import models
from .dataset import DEFAULT_THRESHOLDS
from .evaluation import (load_song_tags, map_at_k, tag_matching, validate_explanations, write_dtw_rows,
                         write_tag_rows)
from .explain import export_explanation, metadata_line, segment_forward_propagation
from .midi import MidiParseError
from .pipeline import Corpus, prepare
from .synthetic import SyntheticSpec, write_corpus

log = logging.getLogger("seer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _thresholds(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"thresholds must be comma-separated integers: {text!r}") from None
    if len(values) != 4 or any(b <= a for a, b in zip(values, values[1:])) or values[0] < 1:
        raise argparse.ArgumentTypeError("thresholds must be 4 strictly ascending positive integers")
    return values


def _timesteps(text: str):
    if text == "median":
        return text
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("timesteps must be >= 1 or 'median'")
    return value


def _load_model(path, corpus: Corpus):
    model, meta = models.load_checkpoint(path)
    n_users = model.user_factors.shape[0]
    if n_users != corpus.dataset.n_users:
        raise ValueError(f"checkpoint has {n_users} users, corpus has {corpus.dataset.n_users}")
    if isinstance(model, models.MfModel):
        if model.item_factors.shape[0] != corpus.dataset.n_songs:
            raise ValueError(f"checkpoint has {model.item_factors.shape[0]} songs, corpus has {corpus.dataset.n_songs}")
        return model, model
    return model, models.SeerScorer(model, corpus.lookup)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args):
    spec = SyntheticSpec(n_users=args.users, n_songs=args.songs, n_archetypes=args.archetypes,
                         min_events=args.min_events, max_events=args.max_events, seed=args.seed)
    write_corpus(spec, args.out)
    print(f"wrote {spec.n_songs} songs and {spec.n_users} users to {args.out}")


def cmd_prepare(args):
    report = prepare(args.midi_dir, args.triplets, args.out, min_unique=args.min_unique,
                     timesteps=args.timesteps, thresholds=args.thresholds, seed=args.seed,
                     test_fraction=args.test_fraction)
    print(f"prepared {report.n_songs} songs, {report.n_users} users, {report.n_ratings} ratings, "
          f"T={report.timesteps} ({len(report.skipped)} MIDI files skipped)")


def cmd_train(args):
    corpus = Corpus(args.data)
    ds = corpus.dataset
    if args.model == "seer":
        model = models.SeerModel.create(ds.n_users, args.latent, args.cell, args.layers, args.seed,
                                        corpus.lookup.timesteps)
    else:
        model = models.MfModel.create(ds.n_users, ds.n_songs, args.latent, args.seed)
    if args.init_from:
        init, _ = models.load_checkpoint(args.init_from)
        if type(init) is not type(model):
            raise ValueError(f"{args.init_from} holds a different model type")
        for name, t in model.params().items():
            src = init.params().get(name)
            if src is None or src.shape != t.shape:
                got = None if src is None else src.shape
                raise ValueError(f"dimension mismatch with {args.init_from}: {name} {got} vs {t.shape}")
            t[...] = src
    clip = None if args.no_clip else args.clip
    history = models.fit(model, ds.train, args.epochs, args.batch, args.lr, args.seed, clip,
                         lookup=corpus.lookup)
    out = Path(args.out)
    models.save_checkpoint(model, out, songs=ds.n_songs)
    log_path = Path(args.log) if args.log else out.with_name("train_log.csv")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mse\n")
        for i, mse in enumerate(history, start=1):
            fh.write(f"{i},{mse:.9f}\n")
    print(f"trained {args.model} for {args.epochs} epochs; final mse {history[-1]:.6f}; wrote {out}")


def cmd_recommend(args):
    corpus = Corpus(args.data)
    _, scorer = _load_model(args.model, corpus)
    u = corpus.user_index(args.user)
    ds = corpus.dataset
    rated = set() if args.include_rated else ds.rated_by_user.get(u, set())
    ranked = models.recommend(scorer, u, args.k, n_songs=ds.n_songs, rated=rated)
    print("rank,song,score")
    for i, (s, score) in enumerate(ranked.items, start=1):
        print(f"{i},{corpus.song_ids[s]},{score:.6f}")


def cmd_explain(args):
    corpus = Corpus(args.data)
    model, _ = _load_model(args.model, corpus)
    if not isinstance(model, models.SeerModel):
        raise ValueError("explanations need a SeER checkpoint")
    u = corpus.user_index(args.user)
    s = corpus.song_index(args.song)
    exp = segment_forward_propagation(model, u, corpus.raw_series(s), args.window, args.stride)
    out_midi = args.out_midi or f"explanation_{args.user}_{args.song}.mid"
    out_meta = args.out_meta or f"explanation_{args.user}_{args.song}.csv"
    export_explanation(exp, corpus.midi_song(s), out_midi, out_meta, user_id=args.user)
    print(metadata_line(exp, args.user))


def cmd_evaluate(args):
    corpus = Corpus(args.data)
    ds = corpus.dataset
    if args.baseline:
        scorer = models.ItemPop.fit(ds.train, ds.n_songs)
        name = "itempop"
    else:
        if not args.model:
            raise ValueError("pass --model CHECKPOINT or --baseline itempop")
        model, scorer = _load_model(args.model, corpus)
        name = "seer" if isinstance(model, models.SeerModel) else "mf"
    report = map_at_k(scorer, ds, args.k, args.relevance_min_rating, name=name, seed=args.seed)
    report.to_csv(args.out, ds.user_ids)
    print(f"{name} MAP@{args.k} = {report.map:.6f} over {len(report.per_user)} users; wrote {args.out}")


def cmd_validate_explanations(args):
    corpus = Corpus(args.data)
    model, scorer = _load_model(args.model, corpus)
    if not isinstance(model, models.SeerModel):
        raise ValueError("explanation validation needs a SeER checkpoint")
    rows = validate_explanations(model, corpus.lookup, corpus.dataset, corpus.raw_series, n_users=args.users,
                                 seed=args.seed, window_s=args.window, stride_s=args.stride, scorer=scorer)
    write_dtw_rows(rows, args.out, corpus.dataset.user_ids)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_tag_matching(args):
    corpus = Corpus(args.data)
    _, scorer = _load_model(args.model, corpus)
    tags = load_song_tags(args.tags, corpus.lookup.index)
    exp_tags = None
    if args.explanation_tags:
        exp_tags = {}
        users = corpus.dataset.user_index
        with open(args.explanation_tags, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = [p.strip() for p in line.split(",")]
                if len(parts) != 3:
                    raise ValueError(f"{args.explanation_tags}:{lineno}: expected user,song_id,tag")
                if parts[0] in users and parts[1] in corpus.lookup.index:
                    key = (users[parts[0]], corpus.lookup.index[parts[1]])
                    exp_tags.setdefault(key, set()).add(parts[2])
    rows = tag_matching(scorer, corpus.dataset, tags, exp_tags, n_users=args.users, seed=args.seed,
                        min_liked=args.min_liked)
    write_tag_rows(rows, args.out, corpus.dataset.user_ids)
    print(f"wrote {len(rows)} rows to {args.out}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seer", description="Sequence-based explainable song recommender.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a planted-preference corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=30)
    p.add_argument("--songs", type=int, default=40)
    p.add_argument("--archetypes", type=int, default=2)
    p.add_argument("--min-events", type=int, default=40)
    p.add_argument("--max-events", type=int, default=90)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("prepare", help="build lookup.bin, songs.idx and split.csv")
    p.add_argument("--midi-dir", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-unique", type=int, default=20)
    p.add_argument("--timesteps", type=_timesteps, default="median")
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train SeER or the MF baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("seer", "mf"), default="seer")
    p.add_argument("--cell", choices=("rnn", "gru", "lstm"), default="gru")
    p.add_argument("--latent", type=int, default=150)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-from")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch MSE csv (default: train_log.csv beside --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="top-k songs for a user")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--include-rated", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("explain", help="best 10 s segment of a song for a user")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--song", required=True)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out-midi")
    p.add_argument("--out-meta")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="MAP@K on the test fold")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model")
    group.add_argument("--baseline", choices=("itempop",))
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--relevance-min-rating", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="eval_report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("validate-explanations", help="DTW between explanations vs random segments")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", default="dtw_validation.csv")
    p.set_defaults(func=cmd_validate_explanations)

    p = sub.add_parser("tag-matching", help="percentage matching with users' preferred tags")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tags", required=True, help="song_tags.csv (song_id,tag)")
    p.add_argument("--explanation-tags", help="user,song_id,tag rows for explanation segments")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--min-liked", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="tag_matching.csv")
    p.set_defaults(func=cmd_tag_matching)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, IndexError, OSError, MidiParseError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"seer: error: {msg}".splitlines()[0], file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
