import json
import subprocess
import sys

import pytest

from seer.cli import main
from seer.midi import parse_smf
from seer.pipeline import Corpus, find_midi_files, prepare
from seer.synthetic import SyntheticSpec, generate
from smf_fixtures import note_on, smf, track


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "syn"), "--seed", "3"]) == 0
    assert main(["prepare", "--midi-dir", str(root / "syn" / "midi"), "--triplets",
                 str(root / "syn" / "triplets.tsv"), "--out", str(root / "data"), "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data"), "--latent", "4", "--epochs", "2", "--batch", "64",
                 "--out", str(root / "seer.ckpt")]) == 0
    return root


class TestSynthetic:
    def test_deterministic(self):
        a = generate(SyntheticSpec(seed=7))
        b = generate(SyntheticSpec(seed=7))
        assert a[1] == b[1] and a[2] == b[2]
        assert [s.events for s in a[0].values()] == [s.events for s in b[0].values()]

    def test_planted_structure(self):
        songs, triplets, manifest = generate(SyntheticSpec(seed=7))
        assert len(songs) == 40 and len(manifest["user_archetype"]) == 30
        matched, mismatched = [], []
        for uid, sid, count in triplets:
            same = manifest["user_archetype"][uid] == manifest["song_archetype"][sid]
            (matched if same else mismatched).append(count)
        assert min(matched) > max(mismatched)
        per_user = {}
        for uid, sid, _ in triplets:
            per_user.setdefault(uid, set()).add(sid)
        assert all(len(s) >= 20 for s in per_user.values())

    def test_files_roundtrip(self, workspace):
        files = find_midi_files(workspace / "syn" / "midi")
        songs, _, _ = generate(SyntheticSpec(seed=3))
        assert len(files) == 40
        for sid, path in files.items():
            back = parse_smf(path.read_bytes())
            assert back.events and back.events == songs[sid].events

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            generate(SyntheticSpec(min_events=0))


class TestPrepare:
    def test_outputs(self, workspace):
        data = workspace / "data"
        for name in ("lookup.bin", "songs.idx", "split.csv", "prepare.json"):
            assert (data / name).exists()
        config = json.loads((data / "prepare.json").read_text())
        corpus = Corpus(data)
        assert corpus.lookup.timesteps == config["timesteps"]
        assert corpus.dataset.n_songs == 40 and corpus.dataset.n_users == 30

    def test_rerun_identical_split(self, workspace, tmp_path):
        prepare(workspace / "syn" / "midi", workspace / "syn" / "triplets.tsv", tmp_path, seed=3)
        assert (tmp_path / "split.csv").read_bytes() == (workspace / "data" / "split.csv").read_bytes()
        assert (tmp_path / "lookup.bin").read_bytes() == (workspace / "data" / "lookup.bin").read_bytes()

    def test_intersection(self, tmp_path, capsys):
        midi = tmp_path / "midi"
        midi.mkdir()
        for sid in ("a", "b"):
            (midi / f"{sid}.mid").write_bytes(smf(track((0, note_on(0, 60, 90)), (96, note_on(0, 62, 90)))))
        (midi / "notes.txt").write_text("ignored")
        (tmp_path / "t.tsv").write_text("u1\ta\t3\nu1\tb\t1\nu1\tc\t9\nu2\ta\t2\nu2\tb\t5\n")
        code, out, _ = run(capsys, "prepare", "--midi-dir", midi, "--triplets", tmp_path / "t.tsv",
                           "--out", tmp_path / "out", "--min-unique", "2", "--timesteps", "5")
        assert code == 0 and "prepared 2 songs" in out
        corpus = Corpus(tmp_path / "out")
        assert corpus.song_ids == ["a", "b"] and corpus.lookup.timesteps == 5

    def test_skips_bad_midi(self, tmp_path, capsys):
        midi = tmp_path / "midi"
        midi.mkdir()
        (midi / "a.mid").write_bytes(smf(track((0, note_on(0, 60, 90)))))
        (midi / "b.mid").write_bytes(b"garbage")
        (midi / "c.mid").write_bytes(smf(track()))
        (tmp_path / "t.tsv").write_text("u\ta\t1\nu\tb\t1\nu\tc\t1\n")
        report = prepare(midi, tmp_path / "t.tsv", tmp_path / "out", min_unique=1)
        assert report.n_songs == 1 and set(report.skipped) == {"b", "c"}

    def test_no_overlap(self, tmp_path, capsys):
        (tmp_path / "midi").mkdir()
        (tmp_path / "midi" / "x.mid").write_bytes(smf(track((0, note_on(0, 60, 90)))))
        (tmp_path / "t.tsv").write_text("u\ty\t1\n")
        code, _, err = run(capsys, "prepare", "--midi-dir", tmp_path / "midi", "--triplets", tmp_path / "t.tsv",
                           "--out", tmp_path / "out")
        assert code == 1
        assert err.strip() == "seer: error: no overlapping songs: 1 in triplets, 1 MIDI files"

    def test_parallel_matches_serial(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("SEER_THREADS", "2")
        prepare(workspace / "syn" / "midi", workspace / "syn" / "triplets.tsv", tmp_path, seed=3)
        assert (tmp_path / "lookup.bin").read_bytes() == (workspace / "data" / "lookup.bin").read_bytes()


class TestCommands:
    def test_train_log(self, workspace):
        lines = (workspace / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,mse" and len(lines) == 3

    def test_train_mf(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--data", workspace / "data", "--model", "mf", "--latent", "3",
                           "--epochs", "3", "--out", tmp_path / "mf.ckpt", "--log", tmp_path / "log.csv")
        assert code == 0 and "trained mf" in out
        assert len((tmp_path / "log.csv").read_text().splitlines()) == 4
        code, out, _ = run(capsys, "evaluate", "--data", workspace / "data", "--model", tmp_path / "mf.ckpt",
                           "--out", tmp_path / "r.csv")
        assert code == 0 and out.startswith("mf MAP@10")

    def test_init_from_mismatch(self, workspace, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", workspace / "data", "--latent", "5", "--epochs", "1",
                           "--init-from", workspace / "seer.ckpt", "--out", tmp_path / "m.ckpt")
        assert code == 1 and "dimension mismatch" in err

    def test_recommend(self, workspace, capsys):
        code, out, _ = run(capsys, "recommend", "--model", workspace / "seer.ckpt", "--data", workspace / "data",
                           "--user", "user000", "--k", "5")
        lines = out.splitlines()
        assert code == 0 and lines[0] == "rank,song,score" and len(lines) == 6
        scores = [float(x.split(",")[2]) for x in lines[1:]]
        assert scores == sorted(scores, reverse=True)
        corpus = Corpus(workspace / "data")
        rated = {corpus.song_ids[s] for s in corpus.dataset.rated_by_user[corpus.user_index("user000")]}
        assert not {x.split(",")[1] for x in lines[1:]} & rated

    def test_explain(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "explain", "--model", workspace / "seer.ckpt", "--data", workspace / "data",
                           "--user", "user001", "--song", "song005", "--out-midi", tmp_path / "e.mid",
                           "--out-meta", tmp_path / "e.csv")
        assert code == 0
        meta = (tmp_path / "e.csv").read_text().strip()
        assert meta == out.strip() and meta.startswith("user001,song005,")
        start, end = map(int, meta.split(",")[2:4])
        assert 0 <= end - start <= 10_000_000
        assert parse_smf((tmp_path / "e.mid").read_bytes()).events

    def test_evaluate_itempop_without_checkpoint(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "evaluate", "--baseline", "itempop", "--data", workspace / "data",
                           "--out", tmp_path / "r.csv")
        assert code == 0 and out.startswith("itempop MAP@10 = ")
        assert (tmp_path / "r.csv").read_text().startswith("model,k,user,ap\nitempop,10,user000,")

    def test_validate_explanations(self, workspace, tmp_path, capsys):
        code, _, _ = run(capsys, "validate-explanations", "--model", workspace / "seer.ckpt",
                         "--data", workspace / "data", "--users", "3", "--out", tmp_path / "d.csv")
        assert code == 0
        assert len((tmp_path / "d.csv").read_text().splitlines()) == 4

    def test_tag_matching(self, workspace, tmp_path, capsys):
        planted = json.loads((workspace / "syn" / "planted.json").read_text())
        (tmp_path / "tags.csv").write_text("".join(f"{s},style{a}\n" for s, a in planted["song_archetype"].items()))
        code, out, err = run(capsys, "tag-matching", "--model", workspace / "seer.ckpt", "--data",
                             workspace / "data", "--tags", tmp_path / "tags.csv", "--users", "4",
                             "--out", tmp_path / "m.csv")
        assert code == 0, err
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "user,k,pct_rec,pct_exp" and len(lines) == 13

    @pytest.mark.parametrize("argv,fragment", [
        (["recommend", "--user", "nobody"], "unknown user id 'nobody'"),
        (["explain", "--user", "user000", "--song", "nope"], "unknown song id 'nope'"),
    ])
    def test_unknown_ids(self, workspace, capsys, argv, fragment):
        code, _, err = run(capsys, *argv, "--model", workspace / "seer.ckpt", "--data", workspace / "data")
        assert code == 1 and fragment in err and len(err.strip().splitlines()) == 1

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(capsys, "evaluate", "--baseline", "itempop", "--data", tmp_path)
        assert code == 1 and "not a prepared corpus" in err

    def test_usage_errors(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train"])
        assert info.value.code == 2
        err = capsys.readouterr().err
        assert len(err.strip().splitlines()) == 1
        with pytest.raises(SystemExit):
            main(["prepare", "--midi-dir", "x", "--triplets", "y", "--out", "z", "--thresholds", "3,2,1,0"])

    def test_module_entry_point(self, workspace):
        proc = subprocess.run([sys.executable, "-m", "seer", "evaluate", "--baseline", "itempop", "--data",
                               str(workspace / "data"), "--out", str(workspace / "ip.csv")],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
