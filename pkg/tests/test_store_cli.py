"""Workspace store, manifest integrity, dataset splits, and the CLI."""

import json

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.io import wavfile

from loopkit import audio, cli, store
from loopkit.errors import IngestError, InsufficientData
from loopkit.records import LoopPair, LoopRecord, SongEntry

from conftest import SR, two_loop_song


def song_manifest(n_songs, loops_per_song=2, with_pairs=True):
    m = store.Manifest()
    for s in range(n_songs):
        sid = f"s{s}"
        m.songs[sid] = SongEntry(song_id=sid, audio_path=f"audio/{sid}.wav")
        ids = []
        for l in range(loops_per_song):
            lid = f"{sid}_l{l}"
            m.loops[lid] = LoopRecord(loop_id=lid, song_id=sid,
                                      audio_path=f"loops/{lid}.wav")
            ids.append(lid)
        if with_pairs:
            m.pairs[f"pos_{sid}"] = LoopPair(
                pair_id=f"pos_{sid}", loop_a=ids[0], loop_b=ids[1],
                label="positive", strategy="original", song_id=sid)
    return m


class TestSongList:
    def test_json_array(self, tmp_path):
        path = tmp_path / "songs.json"
        path.write_text(json.dumps([{"song_id": "a", "audio_path": "a.wav",
                                     "bpm_hint": 97.0}]))
        entries = store.read_song_list(path)
        assert len(entries) == 1
        assert entries[0].song_id == "a"
        assert entries[0].bpm_hint == 97.0

    def test_jsonl(self, tmp_path):
        path = tmp_path / "songs.jsonl"
        path.write_text('{"song_id": "a", "audio_path": "a.wav"}\n'
                        '{"song_id": "b", "audio_path": "b.wav"}\n')
        assert [e.song_id for e in store.read_song_list(path)] == ["a", "b"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError):
            store.read_song_list(tmp_path / "nope.json")

    def test_missing_required_field(self, tmp_path):
        path = tmp_path / "songs.json"
        path.write_text(json.dumps([{"song_id": "a"}]))
        with pytest.raises(IngestError):
            store.read_song_list(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "songs.json"
        path.write_text("")
        assert store.read_song_list(path) == []


class TestIngest:
    def test_canonicalizes_stereo_48k_int16(self, tmp_path):
        stereo = (np.stack([np.sin(np.linspace(0, 400, 96000))] * 2, axis=1)
                  * 20000).astype(np.int16)
        wavfile.write(tmp_path / "raw.wav", 48000, stereo)
        (tmp_path / "songs.json").write_text(json.dumps(
            [{"song_id": "raw", "audio_path": "raw.wav"}]))
        manifest = store.ingest(tmp_path / "songs.json", tmp_path / "ws")
        assert "raw" in manifest.songs
        clip = audio.read_wav(tmp_path / "ws" /
                              manifest.songs["raw"].audio_path)
        assert clip.sample_rate == audio.SAMPLE_RATE
        assert clip.samples.ndim == 1
        assert len(clip) == pytest.approx(2 * audio.SAMPLE_RATE, abs=2)

    def test_missing_audio_rejected(self, tmp_path):
        (tmp_path / "songs.json").write_text(json.dumps(
            [{"song_id": "gone", "audio_path": "gone.wav"}]))
        with pytest.raises(IngestError):
            store.ingest(tmp_path / "songs.json", tmp_path / "ws")

    def test_corrupt_audio_rejected(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFFgarbage")
        (tmp_path / "songs.json").write_text(json.dumps(
            [{"song_id": "bad", "audio_path": "bad.wav"}]))
        with pytest.raises(IngestError):
            store.ingest(tmp_path / "songs.json", tmp_path / "ws")


class TestManifestPersistence:
    def test_roundtrip_preserves_records(self, tmp_path):
        m = song_manifest(3)
        m.stages["extract:s0"] = "abc"
        path = tmp_path / "manifest.jsonl"
        m.save(path)
        loaded = store.Manifest.load(path)
        assert loaded.songs == m.songs
        assert loaded.loops == m.loops
        assert loaded.pairs == m.pairs
        assert loaded.stages == m.stages

    def test_save_is_byte_stable(self, tmp_path):
        m = song_manifest(3)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        m.save(p1)
        store.Manifest.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_missing_gives_empty(self, tmp_path):
        m = store.Manifest.load(tmp_path / "none.jsonl")
        assert not m.songs and not m.loops and not m.pairs


class TestValidate:
    def test_clean_manifest(self):
        assert song_manifest(2).validate() == []

    def test_detects_unknown_song(self):
        m = song_manifest(1)
        m.loops["orphan"] = LoopRecord(loop_id="orphan", song_id="ghost",
                                       audio_path="loops/orphan.wav")
        assert any("unknown song" in p for p in m.validate())

    def test_detects_unknown_parent(self):
        m = song_manifest(1)
        m.loops["s0_l0"].derived_from = "missing"
        assert any("unknown parent" in p for p in m.validate())

    def test_detects_deep_provenance(self):
        m = song_manifest(1)
        m.loops["s0_l0"].derived_from = "s0_l1"
        m.loops["s0_l1"].derived_from = "s0_l0"
        assert any("provenance" in p for p in m.validate())

    def test_detects_pair_with_unknown_loop(self):
        m = song_manifest(1)
        m.pairs["bad"] = LoopPair(pair_id="bad", loop_a="s0_l0", loop_b="zzz",
                                  label="negative", strategy="random")
        assert any("unknown loop" in p for p in m.validate())

    def test_detects_cross_song_positive(self):
        m = song_manifest(2, with_pairs=False)
        m.pairs["bad"] = LoopPair(pair_id="bad", loop_a="s0_l0", loop_b="s1_l0",
                                  label="positive", strategy="original")
        assert any("spans songs" in p for p in m.validate())

    def test_detects_missing_audio(self, tmp_path):
        m = song_manifest(1)
        assert any("missing audio" in p for p in m.validate(tmp_path))


class TestSplit:
    def test_ten_songs_default(self):
        m = song_manifest(10)
        store.split(m, seed=0)
        counts = {}
        for entry in m.songs.values():
            counts[entry.split] = counts.get(entry.split, 0) + 1
        assert counts == {"train": 8, "val": 2}

    def test_test_songs_carved_first(self):
        m = song_manifest(10)
        store.split(m, seed=0, test_songs=2)
        counts = {}
        for entry in m.songs.values():
            counts[entry.split] = counts.get(entry.split, 0) + 1
        assert counts == {"train": 6, "val": 2, "test": 2}

    def test_songs_without_pairs_unassigned(self):
        m = song_manifest(6)
        m.songs["extra"] = SongEntry(song_id="extra", audio_path="x.wav")
        store.split(m, seed=0)
        assert m.songs["extra"].split is None
        assert all(m.songs[f"s{i}"].split in ("train", "val") for i in range(6))

    def test_deterministic_given_seed(self):
        a, b = song_manifest(10), song_manifest(10)
        store.split(a, seed=3, test_songs=1)
        store.split(b, seed=3, test_songs=1)
        assert {s: e.split for s, e in a.songs.items()} == \
            {s: e.split for s, e in b.songs.items()}

    def test_too_few_songs(self):
        with pytest.raises(InsufficientData):
            store.split(song_manifest(4), seed=0)
        with pytest.raises(InsufficientData):
            store.split(song_manifest(5), seed=0, test_songs=1)


class TestConfigParsing:
    def test_overrides_parsed(self, tmp_path):
        path = tmp_path / "overrides.cfg"
        path.write_text("# comment\nntf_rank = 2\n\nepochs=5\n")
        assert cli.parse_config(path) == {"ntf_rank": "2", "epochs": "5"}

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "overrides.cfg"
        path.write_text("just words\n")
        with pytest.raises(cli.InvalidInput):
            cli.parse_config(path)

    def test_none_path_empty(self):
        assert cli.parse_config(None) == {}


@pytest.fixture(scope="module")
def one_song_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_one")
    wavfile.write(root / "solo.wav", SR, two_loop_song().astype(np.float32))
    (root / "songs.json").write_text(json.dumps(
        [{"song_id": "solo", "audio_path": "solo.wav", "bpm_hint": 120.0}]))
    cfg = root / "overrides.cfg"
    cfg.write_text("ntf_rank=2\nntf_iters=150\n")
    return root, root / "ws", cfg


class TestCliPipeline:
    def _run(self, ws, cfg, *args):
        runner = CliRunner()
        return runner.invoke(cli.main,
                             ["-w", str(ws), "--config", str(cfg)] + list(args))

    def test_full_stage_sequence(self, one_song_env):
        root, ws, cfg = one_song_env
        result = self._run(ws, cfg, "ingest", str(root / "songs.json"))
        assert result.exit_code == 0, result.output
        assert "1 songs" in result.output

        for stage in ("extract", "dedup", "pairs"):
            result = self._run(ws, cfg, stage)
            assert result.exit_code == 0, result.output

        manifest = store.Manifest.load(ws / "manifest.jsonl")
        assert len(manifest.loops) == 2
        assert len(manifest.positives()) == 1

        result = self._run(ws, cfg, "negatives", "--strategy", "reverse")
        assert result.exit_code == 0, result.output
        assert "1 negative" in result.output

        result = self._run(ws, cfg, "featurize")
        assert result.exit_code == 0, result.output
        features = sorted(p.name for p in (ws / "features").glob("*.npy"))
        assert len([f for f in features if f.startswith("loop_")]) == 3
        assert len([f for f in features if f.startswith("pair_")]) == 2

        result = self._run(ws, cfg, "validate")
        assert result.exit_code == 0, result.output
        assert "manifest ok" in result.output

    def test_extract_is_resumable(self, one_song_env):
        root, ws, cfg = one_song_env
        target = ws / "loops" / "solo.sound.npy"
        before = target.stat().st_mtime_ns
        result = self._run(ws, cfg, "extract")
        assert result.exit_code == 0, result.output
        assert target.stat().st_mtime_ns == before

    def test_split_needs_enough_songs(self, one_song_env):
        root, ws, cfg = one_song_env
        result = self._run(ws, cfg, "split")
        assert result.exit_code == cli.EXIT_INSUFFICIENT

    def test_train_needs_split(self, one_song_env):
        root, ws, cfg = one_song_env
        result = self._run(ws, cfg, "train", "--model", "cnn", "--epochs", "1")
        assert result.exit_code == cli.EXIT_INSUFFICIENT


class TestCliErrors:
    def test_ingest_missing_audio_exit_2(self, tmp_path):
        (tmp_path / "songs.json").write_text(json.dumps(
            [{"song_id": "gone", "audio_path": "gone.wav"}]))
        result = CliRunner().invoke(cli.main, [
            "-w", str(tmp_path / "ws"), "ingest", str(tmp_path / "songs.json")])
        assert result.exit_code == cli.EXIT_INVALID

    def test_split_empty_workspace_exit_3(self, tmp_path):
        result = CliRunner().invoke(cli.main, ["-w", str(tmp_path), "split"])
        assert result.exit_code == cli.EXIT_INSUFFICIENT

    def test_rank_unknown_query_exit_2(self, tmp_path):
        result = CliRunner().invoke(cli.main, [
            "-w", str(tmp_path), "rank", "--query", "nope", "--scorer", "amu"])
        assert result.exit_code == cli.EXIT_INVALID


class TestCliTrainedWorkspace:
    def _run(self, workspace, *args):
        return CliRunner().invoke(cli.main, ["-w", str(workspace)] + list(args))

    def test_validate_ok(self, trained_workspace):
        workspace, _ = trained_workspace
        result = self._run(workspace, "validate")
        assert result.exit_code == 0, result.output

    def test_mix_writes_canonical_wav(self, trained_workspace, tmp_path):
        workspace, manifest = trained_workspace
        a, b = sorted(manifest.loops)[:2]
        out = tmp_path / "mix.wav"
        result = self._run(workspace, "mix", "--pair", f"{a},{b}",
                           "-o", str(out))
        assert result.exit_code == 0, result.output
        clip = audio.read_wav(out)
        assert len(clip) == audio.LOOP_SAMPLES
        assert np.max(np.abs(clip.samples)) == pytest.approx(1.0, abs=1e-4)

    def test_mix_unknown_loop_exit_2(self, trained_workspace, tmp_path):
        workspace, _ = trained_workspace
        result = self._run(workspace, "mix", "--pair", "nope,also_nope",
                           "-o", str(tmp_path / "x.wav"))
        assert result.exit_code == cli.EXIT_INVALID

    def test_rank_lists_top_candidates(self, trained_workspace):
        workspace, manifest = trained_workspace
        query = sorted(manifest.loops)[0]
        result = self._run(workspace, "rank", "--query", query,
                           "--scorer", "cnn", "--top-n", "3")
        assert result.exit_code == 0, result.output
        lines = [l for l in result.output.splitlines() if l.strip()]
        assert len(lines) == 3
        scores = [float(l.split()[0]) for l in lines]
        assert scores == sorted(scores, reverse=True)

    def test_eval_classify_writes_report(self, trained_workspace):
        workspace, _ = trained_workspace
        result = self._run(workspace, "eval", "--task", "classify",
                           "--scorer", "cnn")
        assert result.exit_code == 0, result.output
        report = json.loads((workspace / "reports" /
                             "classify_cnn.json").read_text())
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["n_classification_pairs"] >= 2

    def test_eval_rank_needs_big_pool_exit_3(self, trained_workspace):
        workspace, _ = trained_workspace
        result = self._run(workspace, "eval", "--task", "rank",
                           "--scorer", "amu")
        assert result.exit_code == cli.EXIT_INSUFFICIENT
