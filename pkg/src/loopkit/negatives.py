"""Negative pair generation: between-song draws and within-song edits.

Between-song strategies pair loops from different songs ('random', or
'selected' which skips pure drum/bass loops). Within-song strategies edit
the target loop of a positive pair: play it backward ('reverse'), rotate
it by 1-3 beats ('shift'), or shuffle its beats ('rearrange').
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable

import numpy as np
from scipy.ndimage import median_filter

from . import audio
from .audio import AudioClip
from .errors import InsufficientData, InvalidInput, Undeterminable
from .records import (LoopPair, LoopRecord, NEGATIVE, STRATEGIES,
                      WITHIN_SONG_STRATEGIES, pair_key)

BEATS_PER_LOOP = 4
BEAT_SAMPLES = audio.LOOP_SAMPLES // BEATS_PER_LOOP  # 22050
PERCUSSIVE_FRACTION_THRESHOLD = 0.8
BASS_FRACTION_THRESHOLD = 0.9
BASS_CUTOFF_HZ = 250.0

_NON_IDENTITY_PERMS = tuple(p for p in permutations(range(BEATS_PER_LOOP))
                            if p != tuple(range(BEATS_PER_LOOP)))


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str = "equal"  # one of STRATEGIES, or 'equal' for all five
    seed: int = 0
    neg_pos_ratio: float = 1.0
    beats_per_loop: int = BEATS_PER_LOOP

    def __post_init__(self):
        if self.neg_pos_ratio <= 0:
            raise InvalidInput(f"neg_pos_ratio must be > 0, got {self.neg_pos_ratio}")
        if self.strategy not in STRATEGIES + ("equal",):
            raise InvalidInput(f"unknown strategy {self.strategy!r}")


@dataclass
class Corpus:
    """Loop records plus a way to load their audio."""

    loops: dict[str, LoopRecord]
    load_clip: Callable[[str], AudioClip]
    drum_bass_labels: dict[str, bool] = field(default_factory=dict)

    def is_drum_or_bass(self, loop_id: str) -> bool:
        """Pluggable detector: precomputed labels win over the heuristic."""
        if loop_id in self.drum_bass_labels:
            return bool(self.drum_bass_labels[loop_id])
        try:
            verdict = is_pure_drum_or_bass(self.load_clip(loop_id))
        except Undeterminable:
            verdict = True  # silent loops are never 'selected' candidates
        self.drum_bass_labels[loop_id] = verdict
        return verdict


def _require_canonical(clip: AudioClip) -> None:
    if len(clip) != audio.LOOP_SAMPLES:
        raise InvalidInput(
            f"expected canonical {audio.LOOP_SAMPLES}-sample loop, got {len(clip)}")


def is_pure_drum_or_bass(clip: AudioClip) -> bool:
    """Heuristic drum/bass detector via median-filter HPSS and band energy.

    True when the percussive energy fraction exceeds 0.8 or at least 90%
    of spectral energy lies below 250 Hz.
    """
    _require_canonical(clip)
    spec = audio.stft(clip)
    power = spec.magnitudes ** 2
    if power.sum() <= 0:
        raise Undeterminable("silent clip")
    harmonic = median_filter(spec.magnitudes, size=(31, 1), mode="nearest")
    percussive = median_filter(spec.magnitudes, size=(1, 31), mode="nearest")
    h2, p2 = harmonic ** 2, percussive ** 2
    perc_mask = p2 / np.maximum(h2 + p2, 1e-12)
    perc_fraction = (power * perc_mask).sum() / power.sum()
    if perc_fraction > PERCUSSIVE_FRACTION_THRESHOLD:
        return True
    freqs = np.linspace(0.0, clip.sample_rate / 2.0, spec.n_bins)
    bass_fraction = power[:, freqs < BASS_CUTOFF_HZ].sum() / power.sum()
    return bool(bass_fraction >= BASS_FRACTION_THRESHOLD)


def reverse_loop(target: AudioClip) -> AudioClip:
    """Play the loop backward."""
    if len(target) == 0:
        raise InvalidInput("empty clip")
    return AudioClip(target.samples[::-1].copy(), target.sample_rate)


def shift_loop(target: AudioClip, k_beats: int | None = None,
               seed: int = 0) -> AudioClip:
    """Cycle-shift the loop by 1-3 beats (drawn by seed when unspecified)."""
    _require_canonical(target)
    if k_beats is None:
        k_beats = int(np.random.default_rng(seed).integers(1, BEATS_PER_LOOP))
    if k_beats not in (1, 2, 3):
        raise InvalidInput(f"k_beats must be in {{1,2,3}}, got {k_beats}")
    return AudioClip(np.roll(target.samples, k_beats * BEAT_SAMPLES),
                     target.sample_rate)


def draw_rearrangement(rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over the 23 non-identity orderings of 4 beats."""
    return _NON_IDENTITY_PERMS[int(rng.integers(len(_NON_IDENTITY_PERMS)))]


def rearrange_loop(target: AudioClip, seed: int = 0) -> AudioClip:
    """Cut the loop into 4 beats and reorder them (never the identity)."""
    _require_canonical(target)
    perm = draw_rearrangement(np.random.default_rng(seed))
    beats = target.samples.reshape(BEATS_PER_LOOP, BEAT_SAMPLES)
    return AudioClip(beats[list(perm)].reshape(-1).copy(), target.sample_rate)


def _loops_by_song(corpus: Corpus) -> dict[str, list[str]]:
    by_song: dict[str, list[str]] = {}
    for loop_id in sorted(corpus.loops):
        rec = corpus.loops[loop_id]
        if rec.strategy is None:  # only original loops are sampling sources
            by_song.setdefault(rec.song_id, []).append(loop_id)
    return by_song


def _draw_cross_song(corpus: Corpus, rng: np.random.Generator,
                     eligible: list[str], forbidden: set[tuple[str, str]],
                     max_tries: int = 10000) -> tuple[str, str]:
    if len({corpus.loops[l].song_id for l in eligible}) < 2:
        raise InsufficientData("need loops from at least 2 songs")
    for _ in range(max_tries):
        a, b = (eligible[int(i)] for i in rng.integers(len(eligible), size=2))
        if corpus.loops[a].song_id == corpus.loops[b].song_id:
            continue
        if pair_key(a, b) in forbidden:
            continue
        return a, b
    raise InsufficientData("could not draw a cross-song pair")


def sample_random(corpus: Corpus, seed: int | np.random.Generator = 0,
                  forbidden: set[tuple[str, str]] | None = None) -> LoopPair:
    """One negative pair of loops from two different songs."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_song = _loops_by_song(corpus)
    eligible = [l for loops in by_song.values() for l in loops]
    a, b = _draw_cross_song(corpus, rng, sorted(eligible), forbidden or set())
    return LoopPair(pair_id=f"neg_random_{a}_{b}", loop_a=a, loop_b=b,
                    label=NEGATIVE, strategy="random")


def sample_selected(corpus: Corpus, seed: int | np.random.Generator = 0,
                    forbidden: set[tuple[str, str]] | None = None) -> LoopPair:
    """Like :func:`sample_random`, but pure drum/bass loops are skipped."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_song = _loops_by_song(corpus)
    eligible = sorted(l for loops in by_song.values() for l in loops
                      if not corpus.is_drum_or_bass(l))
    if len({corpus.loops[l].song_id for l in eligible}) < 2:
        raise InsufficientData("fewer than 2 songs with non-drum/bass loops")
    a, b = _draw_cross_song(corpus, rng, eligible, forbidden or set())
    return LoopPair(pair_id=f"neg_selected_{a}_{b}", loop_a=a, loop_b=b,
                    label=NEGATIVE, strategy="selected")


_MANIPULATIONS = {
    "reverse": lambda clip, rng: reverse_loop(clip),
    "shift": lambda clip, rng: shift_loop(clip, int(rng.integers(1, BEATS_PER_LOOP))),
    "rearrange": lambda clip, rng: AudioClip(
        clip.samples.reshape(BEATS_PER_LOOP, BEAT_SAMPLES)[
            list(draw_rearrangement(rng))].reshape(-1).copy(),
        clip.sample_rate),
}


def _strategy_counts(total: int, strategy: str) -> dict[str, int]:
    if strategy != "equal":
        return {strategy: total}
    base, extra = divmod(total, len(STRATEGIES))
    return {s: base + (1 if i < extra else 0) for i, s in enumerate(STRATEGIES)}


def build_negative_set(positive_pairs: list[LoopPair], corpus: Corpus,
                       config: SamplingConfig):
    """Build the negative pair set for a list of positive pairs.

    Returns ``(pairs, new_loops)`` where ``new_loops`` is a list of
    ``(LoopRecord, AudioClip)`` for manipulated target loops created by
    the within-song strategies. Total count is ratio x positives; 'equal'
    mode spreads it across the five strategies (counts differ by <= 1).
    """
    if not positive_pairs:
        raise InsufficientData("no positive pairs")
    positives = sorted(positive_pairs, key=lambda p: p.pair_id)
    positive_keys = {pair_key(p.loop_a, p.loop_b) for p in positives}
    total = int(round(config.neg_pos_ratio * len(positives)))
    counts = _strategy_counts(total, config.strategy)
    rng = np.random.default_rng(config.seed)
    pairs: list[LoopPair] = []
    new_loops: list[tuple[LoopRecord, AudioClip]] = []

    for strategy in STRATEGIES:
        count = counts.get(strategy, 0)
        if count == 0:
            continue
        if strategy in WITHIN_SONG_STRATEGIES:
            for i in range(count):
                pos = positives[i % len(positives)]
                source, target = pos.loop_a, pos.loop_b
                clip = corpus.load_clip(target)
                _require_canonical(clip)
                edited = _MANIPULATIONS[strategy](clip, rng)
                new_id = f"{target}__{strategy}{i}"
                rec = corpus.loops[target]
                new_loops.append((LoopRecord(
                    loop_id=new_id, song_id=rec.song_id, audio_path="",
                    derived_from=target, strategy=strategy), edited))
                pairs.append(LoopPair(
                    pair_id=f"neg_{strategy}_{pos.pair_id}_{i}",
                    loop_a=source, loop_b=new_id, label=NEGATIVE,
                    strategy=strategy, song_id=rec.song_id))
        else:
            sampler = sample_random if strategy == "random" else sample_selected
            for i in range(count):
                pair = sampler(corpus, rng, forbidden=positive_keys)
                pairs.append(LoopPair(
                    pair_id=f"{pair.pair_id}_{i}", loop_a=pair.loop_a,
                    loop_b=pair.loop_b, label=NEGATIVE, strategy=strategy))
    return pairs, new_loops
