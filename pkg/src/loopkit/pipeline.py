"""Pipeline stages: extract -> dedup -> pairs -> negatives -> featurize.

Each stage is deterministic and resumable: per-song content hashes are
recorded in the manifest and matching songs are skipped on rerun. A
song's NTF seed derives from its id and the pipeline seed, so stage-level
parallelism cannot change any result.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, dedup, extract, negatives, store
from .audio import AudioClip
from .errors import InsufficientData, LoopkitError
from .negatives import Corpus, SamplingConfig
from .nn import models
from .nn.train import FeatureStore
from .records import LoopPair, LoopRecord, POSITIVE

log = logging.getLogger("loopkit.pipeline")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    ntf_rank: int | None = None  # None: min(8, bars // 2) per song
    ntf_iters: int = 200
    frames_per_bar: int = extract.DEFAULT_FRAMES_PER_BAR
    pair_threshold: float = dedup.PAIR_ACTIVATION_THRESHOLD
    max_loops_per_song: int | None = None
    jobs: int = 1

    def song_seed(self, song_id: str) -> int:
        return (zlib.crc32(song_id.encode()) ^ self.seed) & 0x7FFFFFFF


def _song_path(paths, song_id: str, suffix: str) -> Path:
    return paths["root"] / f"{store.LOOP_DIR}/{song_id}{suffix}"


def _each_song(manifest: store.Manifest, stage: str, digests: dict[str, str],
               jobs: int, fn):
    """Run ``fn(song_id)`` for songs whose stage hash is stale; mark done."""
    pending = [s for s in sorted(digests)
               if manifest.stages.get(f"{stage}:{s}") != digests[s]]
    if jobs > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(fn, pending))
    else:
        outcomes = [fn(s) for s in pending]
    for song_id, ok in zip(pending, outcomes):
        if ok:
            manifest.stages[f"{stage}:{song_id}"] = digests[song_id]


def _extract_digests(manifest, paths, config) -> dict[str, str]:
    out = {}
    for song_id, entry in manifest.songs.items():
        out[song_id] = store.config_hash(
            "extract", store.file_hash(paths["root"] / entry.audio_path),
            config.seed, config.ntf_rank, config.ntf_iters,
            config.frames_per_bar, entry.bpm_hint)
    return out


def stage_extract(workspace, config: PipelineConfig) -> store.Manifest:
    """NTF-factorize every song; write factor matrices and template specs."""
    paths = store.workspace_paths(workspace)
    manifest = store.Manifest.load(paths["manifest"])
    paths[store.LOOP_DIR].mkdir(parents=True, exist_ok=True)
    digests = _extract_digests(manifest, paths, config)

    def job(song_id: str) -> bool:
        entry = manifest.songs[song_id]
        try:
            clip = audio.read_wav(paths["root"] / entry.audio_path)
            grid = extract.build_bar_grid(clip, bpm_hint=entry.bpm_hint)
            tensor = extract.tensorize(clip, grid, config.frames_per_bar)
            rank = config.ntf_rank or extract.default_rank(grid.bar_count)
            model = extract.ntf_factorize(tensor, rank, iters=config.ntf_iters,
                                          seed=config.song_seed(song_id))
        except LoopkitError as exc:
            log.warning("extract: skipping song %s: %s", song_id, exc)
            return False
        np.save(_song_path(paths, song_id, ".sound.npy"), model.sound_templates)
        np.save(_song_path(paths, song_id, ".rhythm.npy"), model.rhythm_templates)
        np.save(_song_path(paths, song_id, ".recipes.npy"), model.recipes)
        np.save(_song_path(paths, song_id, ".layout_raw.npy"),
                model.layout.activations)
        for r in range(rank):
            np.save(_song_path(paths, song_id, f".loop{r}.spec.npy"),
                    extract.reconstruct_loop_spectrogram(model, r))
        return True

    _each_song(manifest, "extract", digests, config.jobs, job)
    manifest.save(paths["manifest"])
    return manifest


def _load_ntf(paths, song_id: str) -> extract.NtfModel:
    return extract.NtfModel(
        sound_templates=np.load(_song_path(paths, song_id, ".sound.npy")),
        rhythm_templates=np.load(_song_path(paths, song_id, ".rhythm.npy")),
        recipes=np.load(_song_path(paths, song_id, ".recipes.npy")),
        layout=extract.LoopLayout(
            activations=np.load(_song_path(paths, song_id, ".layout_raw.npy"))))


def stage_dedup(workspace, config: PipelineConfig) -> store.Manifest:
    """Hash-dedup the extracted loop templates and refine each layout."""
    paths = store.workspace_paths(workspace)
    manifest = store.Manifest.load(paths["manifest"])
    digests = {}
    for song_id in manifest.songs:
        prev = manifest.stages.get(f"extract:{song_id}")
        if prev is not None:
            digests[song_id] = store.config_hash("dedup", prev)

    def job(song_id: str) -> bool:
        model = _load_ntf(paths, song_id)
        spectrograms = [np.load(_song_path(paths, song_id, f".loop{r}.spec.npy"))
                        for r in range(model.rank)]
        totals = model.layout.activations.sum(axis=1)
        result = dedup.dedup_loops(spectrograms, totals)
        layout = dedup.refine_layout(model.layout.activations, result.merge_map)
        np.save(_song_path(paths, song_id, ".layout.npy"), layout)
        with open(_song_path(paths, song_id, ".dedup.json"), "w") as fh:
            json.dump({"kept": result.kept,
                       "merge": {str(k): v for k, v in result.merge_map.items()}},
                      fh, sort_keys=True)
        return True

    _each_song(manifest, "dedup", digests, config.jobs, job)
    manifest.save(paths["manifest"])
    return manifest


def stage_pairs(workspace, config: PipelineConfig) -> store.Manifest:
    """Derive positive pairs, render loop audio, and register loop records.

    Songs without any pair above the activation threshold contribute no
    loops or pairs to the corpus.
    """
    paths = store.workspace_paths(workspace)
    manifest = store.Manifest.load(paths["manifest"])
    digests = {}
    for song_id in manifest.songs:
        prev = manifest.stages.get(f"dedup:{song_id}")
        if prev is not None:
            digests[song_id] = store.config_hash(
                "pairs", prev, config.pair_threshold, config.max_loops_per_song)

    results: dict[str, tuple[list[LoopRecord], list[LoopPair]]] = {}

    def job(song_id: str) -> bool:
        entry = manifest.songs[song_id]
        model = _load_ntf(paths, song_id)
        layout = np.load(_song_path(paths, song_id, ".layout.npy"))
        with open(_song_path(paths, song_id, ".dedup.json")) as fh:
            info = json.load(fh)
        kept = list(info["kept"])
        totals = model.layout.activations.sum(axis=1)
        index_pairs = dedup.derive_pairs(layout, config.pair_threshold)
        if not index_pairs:
            results[song_id] = ([], [])
            return True
        if config.max_loops_per_song is not None and \
                len(kept) > config.max_loops_per_song:
            trimmed = sorted(sorted(kept, key=lambda i: (-totals[i], i))
                             [: config.max_loops_per_song])
        else:
            trimmed = kept
        kept_pos = {orig: pos for pos, orig in enumerate(kept)}
        allowed = {kept_pos[orig] for orig in trimmed}
        pairs = []
        used: set[int] = set()
        for a_idx, b_idx in sorted(index_pairs):
            if a_idx not in allowed or b_idx not in allowed:
                continue
            bar_count = int(np.sum((layout[a_idx] >= config.pair_threshold)
                                   & (layout[b_idx] >= config.pair_threshold)))
            pairs.append((a_idx, b_idx, bar_count))
            used.update((a_idx, b_idx))
        if not pairs:
            results[song_id] = ([], [])
            return True
        try:
            clip = audio.read_wav(paths["root"] / entry.audio_path)
            grid = extract.build_bar_grid(clip, bpm_hint=entry.bpm_hint)
            loops = []
            pos_orig = {pos: orig for orig, pos in kept_pos.items()}
            for pos in sorted(used):
                orig = pos_orig[pos]
                loop_id = f"{song_id}_loop{orig}"
                rel = f"{store.LOOP_DIR}/{loop_id}.wav"
                loop_clip = extract.extract_loop_audio(clip, grid, model, orig)
                audio.write_wav(paths["root"] / rel, loop_clip)
                spec = np.load(_song_path(paths, song_id, f".loop{orig}.spec.npy"))
                loops.append(LoopRecord(
                    loop_id=loop_id, song_id=song_id, audio_path=rel,
                    source_bar=int(np.argmax(model.layout.activations[orig])),
                    activation_total=float(totals[orig]),
                    hash_bits=dedup.average_hash(spec).bits))
        except LoopkitError as exc:
            log.warning("pairs: skipping song %s: %s", song_id, exc)
            return False
        pair_records = []
        for a_idx, b_idx, bar_count in pairs:
            a_id = f"{song_id}_loop{pos_orig[a_idx]}"
            b_id = f"{song_id}_loop{pos_orig[b_idx]}"
            pair_records.append(LoopPair(
                pair_id=f"pos_{song_id}_{pos_orig[a_idx]}_{pos_orig[b_idx]}",
                loop_a=a_id, loop_b=b_id, label=POSITIVE, strategy="original",
                song_id=song_id, bar_count=bar_count))
        results[song_id] = (loops, pair_records)
        return True

    _each_song(manifest, "pairs", digests, config.jobs, job)
    for song_id, (loops, pairs) in results.items():
        for loop_id in [l for l, rec in manifest.loops.items()
                        if rec.song_id == song_id]:
            del manifest.loops[loop_id]
        for pair_id in [p for p, rec in manifest.pairs.items()
                        if rec.song_id == song_id]:
            del manifest.pairs[pair_id]
        for loop in loops:
            manifest.loops[loop.loop_id] = loop
        for pair in pairs:
            manifest.pairs[pair.pair_id] = pair
    manifest.save(paths["manifest"])
    return manifest


def run_pipeline(workspace, config: PipelineConfig) -> store.Manifest:
    """Extract, dedup, and pair every ingested song."""
    stage_extract(workspace, config)
    stage_dedup(workspace, config)
    return stage_pairs(workspace, config)


def build_corpus(manifest: store.Manifest, workspace,
                 drum_bass_labels: dict[str, bool] | None = None) -> Corpus:
    root = store.workspace_paths(workspace)["root"]
    cache: dict[str, AudioClip] = {}

    def load_clip(loop_id: str) -> AudioClip:
        if loop_id not in cache:
            cache[loop_id] = audio.read_wav(root / manifest.loops[loop_id].audio_path)
        return cache[loop_id]

    return Corpus(loops=manifest.loops, load_clip=load_clip,
                  drum_bass_labels=dict(drum_bass_labels or {}))


def generate_negatives(workspace, config: SamplingConfig,
                       drum_bass_labels: dict[str, bool] | None = None) -> store.Manifest:
    """Create negative pairs (per split when splits exist) and persist them."""
    paths = store.workspace_paths(workspace)
    manifest = store.Manifest.load(paths["manifest"])
    # regenerate from scratch: drop previous negatives and derived loops
    for pair_id in [p for p, rec in manifest.pairs.items() if rec.label == "negative"]:
        del manifest.pairs[pair_id]
    for loop_id in [l for l, rec in manifest.loops.items() if rec.strategy]:
        del manifest.loops[loop_id]
    corpus_all = build_corpus(manifest, workspace, drum_bass_labels)
    splits = sorted({s.split for s in manifest.songs.values() if s.split})
    groups = splits or [None]
    all_pairs, all_new = [], []
    for i, split_name in enumerate(groups):
        positives = manifest.positives(split_name)
        if not positives:
            continue
        if split_name is None:
            corpus = corpus_all
        else:
            loops = {l: rec for l, rec in manifest.loops.items()
                     if manifest.songs[rec.song_id].split == split_name}
            corpus = Corpus(loops=loops, load_clip=corpus_all.load_clip,
                            drum_bass_labels=corpus_all.drum_bass_labels)
        cfg = SamplingConfig(strategy=config.strategy, seed=config.seed + i,
                             neg_pos_ratio=config.neg_pos_ratio)
        try:
            pairs, new_loops = negatives.build_negative_set(positives, corpus, cfg)
        except InsufficientData as exc:
            log.warning("negatives for split %s: %s", split_name, exc)
            continue
        all_pairs += pairs
        all_new += new_loops
    paths[store.LOOP_DIR].mkdir(parents=True, exist_ok=True)
    for rec, clip in all_new:
        rel = f"{store.LOOP_DIR}/{rec.loop_id}.wav"
        audio.write_wav(paths["root"] / rel, clip)
        rec.audio_path = rel
        manifest.loops[rec.loop_id] = rec
    for pair in all_pairs:
        manifest.pairs[pair.pair_id] = pair
    manifest.save(paths["manifest"])
    return manifest


def featurize(workspace) -> store.Manifest:
    """Precompute per-loop and per-pair log-mel features as .npy files."""
    paths = store.workspace_paths(workspace)
    manifest = store.Manifest.load(paths["manifest"])
    paths[store.FEATURE_DIR].mkdir(parents=True, exist_ok=True)
    root = paths["root"]
    clips: dict[str, AudioClip] = {}

    def clip_of(loop_id: str) -> AudioClip:
        if loop_id not in clips:
            clips[loop_id] = audio.read_wav(root / manifest.loops[loop_id].audio_path)
        return clips[loop_id]

    for loop_id in sorted(manifest.loops):
        out = root / f"{store.FEATURE_DIR}/loop_{loop_id}.npy"
        if not out.exists():
            np.save(out, models.loop_input(clip_of(loop_id)).astype(np.float32))
    for pair_id in sorted(manifest.pairs):
        pair = manifest.pairs[pair_id]
        out = root / f"{store.FEATURE_DIR}/pair_{pair_id}.npy"
        if not out.exists():
            feat = models.pair_input(clip_of(pair.loop_a), clip_of(pair.loop_b))
            np.save(out, feat.astype(np.float32))
    return manifest


def load_feature_store(workspace, manifest: store.Manifest,
                       kind: str, pairs: list[LoopPair]) -> FeatureStore:
    """Features needed to train ``kind`` on ``pairs``, loaded from disk."""
    root = store.workspace_paths(workspace)["root"]
    features = FeatureStore()
    if kind == "cnn":
        for pair in pairs:
            features[pair.pair_id] = np.load(
                root / f"{store.FEATURE_DIR}/pair_{pair.pair_id}.npy")
    else:
        for loop_id in sorted({l for p in pairs for l in (p.loop_a, p.loop_b)}):
            features[loop_id] = np.load(
                root / f"{store.FEATURE_DIR}/loop_{loop_id}.npy")
    return features
