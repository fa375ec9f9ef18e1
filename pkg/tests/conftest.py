"""Shared fixtures: synthetic tones, click tracks, and a tiny song corpus.

All synthetic songs run at 120 BPM with 4-beat bars, so one bar is exactly
2 s at 44100 Hz and loop extraction needs no time stretching.
"""

import json

import numpy as np
import pytest
from scipy.io import wavfile

from loopkit import audio, pipeline, store
from loopkit.negatives import SamplingConfig
from loopkit.nn.checkpoint import save_checkpoint
from loopkit.nn.train import TrainConfig, train

SR = audio.SAMPLE_RATE
BAR_SAMPLES = 2 * SR  # one 4-beat bar at 120 BPM


def sine(freq, duration, sr=SR, amp=0.5, phase=0.0):
    t = np.arange(int(round(duration * sr))) / sr
    return amp * np.sin(2.0 * np.pi * freq * t + phase)


def beat_gated_tone(freq, duration, sr=SR, amp=0.4):
    """Tone with a decaying per-beat envelope, so every beat has an onset."""
    x = sine(freq, duration, sr, amp)
    beat = sr // 2  # 120 BPM
    env = np.ones(len(x))
    for b in range(len(x) // beat):
        env[b * beat : (b + 1) * beat] = np.linspace(1.0, 0.3, beat)
    return x * env


def click_track(duration, sr=SR, period=0.5, click_len=64, amp=0.9):
    """Impulse-like clicks every ``period`` seconds."""
    x = np.zeros(int(round(duration * sr)))
    pos = 0
    while pos + click_len < len(x):
        x[pos : pos + click_len] = amp * np.hanning(click_len)
        pos += int(round(period * sr))
    return x


def two_loop_song(low=220.0, high=3000.0, bars=16):
    """A song whose low-band loop plays everywhere and whose high-band
    loop joins for the second half: exactly one co-occurring loop pair."""
    x = np.zeros(bars * BAR_SAMPLES)
    for i in range(bars):
        seg = slice(i * BAR_SAMPLES, (i + 1) * BAR_SAMPLES)
        x[seg] += beat_gated_tone(low, 2.0)
        if i >= bars // 2:
            x[seg] += beat_gated_tone(high, 2.0)
    return x


def loop_clip(freq=440.0, amp=0.4):
    """One canonical 2 s loop with per-beat onsets."""
    return audio.AudioClip(beat_gated_tone(freq, 2.0, amp=amp))


def write_song_corpus(root, n_songs=6):
    """Write ``n_songs`` two-loop WAVs plus a song-list JSON; returns its path."""
    entries = []
    for i in range(n_songs):
        x = two_loop_song(low=200.0 + 15.0 * i, high=2400.0 + 200.0 * i)
        wavfile.write(root / f"song{i}.wav", SR, x.astype(np.float32))
        entries.append({"song_id": f"song{i}", "audio_path": f"song{i}.wav",
                        "bpm_hint": 120.0})
    path = root / "songs.json"
    path.write_text(json.dumps(entries))
    return path


@pytest.fixture(scope="session")
def song_corpus(tmp_path_factory):
    return write_song_corpus(tmp_path_factory.mktemp("corpus"))


def build_workspace(workspace, song_list, seed=0, epochs=1):
    """Ingest, extract, pair, sample negatives, featurize, and train both
    models in ``workspace``; returns the final manifest."""
    store.ingest(song_list, workspace)
    config = pipeline.PipelineConfig(seed=seed, ntf_rank=2, jobs=1)
    manifest = pipeline.run_pipeline(workspace, config)
    store.split(manifest, seed=seed, test_songs=1)
    manifest.save(store.workspace_paths(workspace)["manifest"])
    pipeline.generate_negatives(
        workspace, SamplingConfig(strategy="reverse", seed=seed))
    pipeline.featurize(workspace)
    manifest = store.Manifest.load(store.workspace_paths(workspace)["manifest"])
    paths = store.workspace_paths(workspace)
    paths[store.CHECKPOINT_DIR].mkdir(exist_ok=True)
    for kind in ("cnn", "snn"):
        train_pairs = (manifest.positives("train") + manifest.negatives("train"))
        val_pairs = (manifest.positives("val") + manifest.negatives("val"))
        features = pipeline.load_feature_store(workspace, manifest, kind,
                                               train_pairs + val_pairs)
        ckpt = train(train_pairs, val_pairs, features, kind,
                     TrainConfig(epochs=epochs, seed=seed))
        save_checkpoint(paths[store.CHECKPOINT_DIR] / f"{kind}.ckpt", ckpt)
    return manifest


@pytest.fixture(scope="session")
def trained_workspace(tmp_path_factory, song_corpus):
    workspace = tmp_path_factory.mktemp("workspace")
    manifest = build_workspace(workspace, song_corpus)
    return workspace, manifest
