"""Corpus manifest persistence, ingestion, and dataset splits.

A workspace is a directory holding one ``manifest.jsonl`` plus flat
subdirectories for canonical song audio, loop WAVs, features, checkpoints
and reports. The manifest is JSONL with one typed record per line, written
atomically (write-new-then-rename) and with sorted keys so reruns with
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

from . import audio
from .errors import IngestError, InsufficientData, InvalidInput
from .records import LoopPair, LoopRecord, SongEntry

MANIFEST_NAME = "manifest.jsonl"
AUDIO_DIR = "audio"
LOOP_DIR = "loops"
FEATURE_DIR = "features"
CHECKPOINT_DIR = "checkpoints"
REPORT_DIR = "reports"


class Manifest:
    """In-memory view of a workspace manifest."""

    def __init__(self):
        self.songs: dict[str, SongEntry] = {}
        self.loops: dict[str, LoopRecord] = {}
        self.pairs: dict[str, LoopPair] = {}
        self.stages: dict[str, str] = {}  # stage key -> content hash

    @classmethod
    def load(cls, path) -> "Manifest":
        manifest = cls()
        path = Path(path)
        if not path.exists():
            return manifest
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                kind = record.pop("kind")
                if kind == "song":
                    manifest.songs[record["song_id"]] = SongEntry(**record)
                elif kind == "loop":
                    manifest.loops[record["loop_id"]] = LoopRecord(**record)
                elif kind == "pair":
                    manifest.pairs[record["pair_id"]] = LoopPair(**record)
                elif kind == "stage":
                    manifest.stages[record["key"]] = record["hash"]
                else:
                    raise InvalidInput(f"unknown manifest record kind {kind!r}")
        return manifest

    def save(self, path) -> None:
        path = Path(path)
        lines = []
        for song_id in sorted(self.songs):
            lines.append({"kind": "song", **asdict(self.songs[song_id])})
        for loop_id in sorted(self.loops):
            lines.append({"kind": "loop", **asdict(self.loops[loop_id])})
        for pair_id in sorted(self.pairs):
            lines.append({"kind": "pair", **asdict(self.pairs[pair_id])})
        for key in sorted(self.stages):
            lines.append({"kind": "stage", "key": key, "hash": self.stages[key]})
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            for record in lines:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        os.replace(tmp, path)

    def positives(self, split: str | None = None) -> list[LoopPair]:
        pairs = [p for p in self.pairs.values() if p.label == "positive"]
        if split is not None:
            pairs = [p for p in pairs if self.pair_split(p) == split]
        return sorted(pairs, key=lambda p: p.pair_id)

    def negatives(self, split: str | None = None) -> list[LoopPair]:
        pairs = [p for p in self.pairs.values() if p.label == "negative"]
        if split is not None:
            pairs = [p for p in pairs if self.pair_split(p) == split]
        return sorted(pairs, key=lambda p: p.pair_id)

    def loop_split(self, loop_id: str) -> str | None:
        song = self.songs.get(self.loops[loop_id].song_id)
        return song.split if song else None

    def pair_split(self, pair: LoopPair) -> str | None:
        sa = self.loop_split(pair.loop_a)
        sb = self.loop_split(pair.loop_b)
        return sa if sa == sb else None

    def validate(self, workspace: Path | None = None) -> list[str]:
        """Referential-integrity problems, empty when the manifest is sound."""
        problems = []
        for loop in self.loops.values():
            if loop.song_id not in self.songs:
                problems.append(f"loop {loop.loop_id}: unknown song {loop.song_id}")
            if loop.derived_from is not None:
                parent = self.loops.get(loop.derived_from)
                if parent is None:
                    problems.append(f"loop {loop.loop_id}: unknown parent "
                                    f"{loop.derived_from}")
                elif parent.derived_from is not None:
                    problems.append(f"loop {loop.loop_id}: provenance chain "
                                    "deeper than one level")
        for pair in self.pairs.values():
            for ref in (pair.loop_a, pair.loop_b):
                if ref not in self.loops:
                    problems.append(f"pair {pair.pair_id}: unknown loop {ref}")
            if pair.label == "positive" and pair.loop_a in self.loops \
                    and pair.loop_b in self.loops:
                if self.loops[pair.loop_a].song_id != self.loops[pair.loop_b].song_id:
                    problems.append(f"pair {pair.pair_id}: positive pair spans songs")
        if workspace is not None:
            for loop in self.loops.values():
                if loop.audio_path and not (workspace / loop.audio_path).exists():
                    problems.append(f"loop {loop.loop_id}: missing audio "
                                    f"{loop.audio_path}")
        return problems


def workspace_paths(workspace) -> dict[str, Path]:
    workspace = Path(workspace)
    paths = {"root": workspace, "manifest": workspace / MANIFEST_NAME}
    for name in (AUDIO_DIR, LOOP_DIR, FEATURE_DIR, CHECKPOINT_DIR, REPORT_DIR):
        paths[name] = workspace / name
    return paths


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def read_song_list(manifest_path) -> list[SongEntry]:
    """Parse a user-supplied song list (JSON array or JSONL of song dicts)."""
    path = Path(manifest_path)
    if not path.exists():
        raise IngestError(f"song list {path} does not exist")
    text = path.read_text().strip()
    entries = []
    if not text:
        return entries
    records = (json.loads(text) if text.startswith("[")
               else [json.loads(line) for line in text.splitlines() if line.strip()])
    for record in records:
        if "song_id" not in record or "audio_path" not in record:
            raise IngestError(f"song record missing song_id/audio_path: {record}")
        entries.append(SongEntry(
            song_id=record["song_id"], audio_path=record["audio_path"],
            bpm_hint=record.get("bpm_hint"), license_tag=record.get("license_tag")))
    return entries


def ingest(song_list_path, workspace) -> Manifest:
    """Validate, resample to 44100 mono, and store songs in the workspace."""
    paths = workspace_paths(workspace)
    paths["root"].mkdir(parents=True, exist_ok=True)
    paths[AUDIO_DIR].mkdir(exist_ok=True)
    manifest = Manifest.load(paths["manifest"])
    base = Path(song_list_path).parent
    for entry in read_song_list(song_list_path):
        src = Path(entry.audio_path)
        if not src.is_absolute():
            src = base / src
        if not src.exists():
            raise IngestError(f"audio file missing for {entry.song_id}: {src}")
        try:
            clip = audio.read_wav(src)
        except InvalidInput as exc:
            raise IngestError(f"cannot decode {src}: {exc}") from exc
        clip = audio.resample(clip, audio.SAMPLE_RATE)
        rel = f"{AUDIO_DIR}/{entry.song_id}.wav"
        audio.write_wav(paths["root"] / rel, clip)
        manifest.songs[entry.song_id] = SongEntry(
            song_id=entry.song_id, audio_path=rel, bpm_hint=entry.bpm_hint,
            license_tag=entry.license_tag)
    manifest.save(paths["manifest"])
    return manifest


def split(manifest: Manifest, seed: int = 0, test_songs: int = 0) -> None:
    """Song-level train/val split at 4:1, after carving the test set.

    Test songs are drawn first from songs that have positive pairs; each
    contributes its pairs to the held-out evaluation.
    """
    import numpy as np

    songs_with_pairs = sorted({
        manifest.loops[p.loop_a].song_id for p in manifest.pairs.values()
        if p.label == "positive" and p.loop_a in manifest.loops})
    if len(songs_with_pairs) < max(5, test_songs + 5):
        raise InsufficientData(
            f"need at least {max(5, test_songs + 5)} songs with pairs, "
            f"have {len(songs_with_pairs)}")
    rng = np.random.default_rng(seed)
    order = [songs_with_pairs[int(i)] for i in rng.permutation(len(songs_with_pairs))]
    test = set(order[:test_songs])
    rest = order[test_songs:]
    n_val = max(1, round(len(rest) / 5))
    val = set(rest[:n_val])
    for song_id, entry in manifest.songs.items():
        if song_id in test:
            entry.split = "test"
        elif song_id in val:
            entry.split = "val"
        elif song_id in songs_with_pairs:
            entry.split = "train"
        else:
            entry.split = None
