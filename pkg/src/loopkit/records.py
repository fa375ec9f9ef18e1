"""Manifest record types: songs, loops, pairs, splits.

Records serialize to flat dicts so the manifest can be stored as JSONL
(one record per line, greppable and diffable).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

POSITIVE = "positive"
NEGATIVE = "negative"
STRATEGIES = ("random", "selected", "reverse", "shift", "rearrange")
WITHIN_SONG_STRATEGIES = ("reverse", "shift", "rearrange")
BETWEEN_SONG_STRATEGIES = ("random", "selected")


@dataclass
class SongEntry:
    song_id: str
    audio_path: str
    bpm_hint: float | None = None
    license_tag: str | None = None
    split: str | None = None  # train / val / test


@dataclass
class LoopRecord:
    loop_id: str
    song_id: str
    audio_path: str
    source_bar: int = 0
    activation_total: float = 0.0
    hash_bits: int = 0
    derived_from: str | None = None
    strategy: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LoopPair:
    pair_id: str
    loop_a: str
    loop_b: str
    label: str  # positive / negative
    strategy: str  # original, or one of the negative-sampling strategies
    song_id: str | None = None
    bar_count: int = 0  # bars in which the pair co-occurred (positives)

    def to_dict(self) -> dict:
        return asdict(self)


def pair_key(loop_a: str, loop_b: str) -> tuple[str, str]:
    """Canonical unordered identity of a pair."""
    return (loop_a, loop_b) if loop_a <= loop_b else (loop_b, loop_a)
