"""Rule-based mashability baseline in the AutoMashUpper style.

Each loop is summarized by three beat-synchronous descriptors: a 12-bin
chromagram, an onset sub-beat rhythm pattern, and a low/mid/high band
energy distribution. The score averages key-shift-tolerant harmonic
similarity, rhythmic similarity, and spectral-balance complementarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import audio
from .audio import AudioClip
from .errors import InvalidInput, Undeterminable
from .negatives import BEATS_PER_LOOP, BEAT_SAMPLES

SUBDIVISIONS_PER_BEAT = 8
BAND_EDGES_HZ = (250.0, 2500.0)
N_BANDS = 3
A4_HZ = 440.0


@dataclass(frozen=True)
class BeatSyncFeatures:
    chroma: np.ndarray  # beats x 12, rows sum to 1 (or 0 for silence)
    rhythm: np.ndarray  # beats x subdivisions onset pattern
    bands: np.ndarray   # low/mid/high energy distribution, sums to 1


def _pitch_class_map(n_bins: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    valid = (freqs > 27.5) & (freqs < 8000.0)
    midi = 69.0 + 12.0 * np.log2(np.maximum(freqs, 1e-6) / A4_HZ)
    classes = np.mod(np.round(midi), 12).astype(int)
    return valid, classes


def beat_sync_features(clip: AudioClip) -> BeatSyncFeatures:
    """Per-beat chroma, rhythm pattern, and band distribution of a loop."""
    if len(clip) != audio.LOOP_SAMPLES:
        raise InvalidInput("expected a canonical 2 s loop")
    spec = audio.stft(clip)
    power = spec.magnitudes ** 2
    n_frames = spec.n_frames
    frame_beat = (np.arange(n_frames) * audio.HOP_SIZE) // BEAT_SAMPLES
    frame_beat = np.minimum(frame_beat, BEATS_PER_LOOP - 1)

    valid, classes = _pitch_class_map(spec.n_bins, clip.sample_rate)
    chroma = np.zeros((BEATS_PER_LOOP, 12))
    for b in range(BEATS_PER_LOOP):
        frames = power[frame_beat == b]
        if not len(frames):
            continue
        folded = np.zeros(12)
        np.add.at(folded, classes[valid], frames.sum(axis=0)[valid])
        total = folded.sum()
        if total > 0:
            chroma[b] = folded / total

    flux = np.maximum(np.diff(power.sum(axis=1), prepend=0.0), 0.0)
    rhythm = np.zeros((BEATS_PER_LOOP, SUBDIVISIONS_PER_BEAT))
    sub_len = BEAT_SAMPLES / SUBDIVISIONS_PER_BEAT
    total_subs = BEATS_PER_LOOP * SUBDIVISIONS_PER_BEAT
    for i in range(n_frames):
        # nearest subdivision, wrapping: frames are centered, so an onset on
        # a beat boundary must not be floored into the previous beat
        k = int(round(i * audio.HOP_SIZE / sub_len)) % total_subs
        b, s = divmod(k, SUBDIVISIONS_PER_BEAT)
        rhythm[b, s] += flux[i]

    freqs = np.linspace(0.0, clip.sample_rate / 2.0, spec.n_bins)
    total_power = power.sum()
    if total_power > 0:
        band_energy = np.array([
            power[:, freqs < BAND_EDGES_HZ[0]].sum(),
            power[:, (freqs >= BAND_EDGES_HZ[0]) & (freqs < BAND_EDGES_HZ[1])].sum(),
            power[:, freqs >= BAND_EDGES_HZ[1]].sum(),
        ])
        bands = band_energy / band_energy.sum()
    else:
        bands = np.full(N_BANDS, 1.0 / N_BANDS)  # silence: uniform by convention
    return BeatSyncFeatures(chroma=chroma, rhythm=rhythm, bands=bands)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def harmonic_similarity(chroma_a: np.ndarray, chroma_b: np.ndarray) -> float:
    """Max cosine similarity over the 12 pitch-class rotations."""
    best = 0.0
    flat_a = chroma_a.ravel()
    for shift in range(12):
        rotated = np.roll(chroma_b, shift, axis=1).ravel()
        best = max(best, _cosine(flat_a, rotated))
    return best


def rhythmic_similarity(rhythm_a: np.ndarray, rhythm_b: np.ndarray) -> float:
    return max(0.0, _cosine(rhythm_a.ravel(), rhythm_b.ravel()))


def spectral_balance(bands_a: np.ndarray, bands_b: np.ndarray) -> float:
    """Complementarity of band distributions, symmetrized over directions.

    Each side is compared to the complement of the other's distribution:
    loops that fill each other's spectral gaps score high.
    """
    def one_way(x, y):
        complement = (1.0 - y) / (N_BANDS - 1)
        return 1.0 - 0.5 * float(np.abs(x - complement).sum())

    return 0.5 * (one_way(bands_a, bands_b) + one_way(bands_b, bands_a))


def mashability_components(a: AudioClip, b: AudioClip) -> dict[str, float]:
    if np.max(np.abs(a.samples), initial=0.0) == 0 or \
       np.max(np.abs(b.samples), initial=0.0) == 0:
        raise Undeterminable("silent loop")
    fa, fb = beat_sync_features(a), beat_sync_features(b)
    return {
        "harmonic": float(np.clip(harmonic_similarity(fa.chroma, fb.chroma), 0, 1)),
        "rhythmic": float(np.clip(rhythmic_similarity(fa.rhythm, fb.rhythm), 0, 1)),
        "balance": float(np.clip(spectral_balance(fa.bands, fb.bands), 0, 1)),
    }


def mashability(a: AudioClip, b: AudioClip) -> float:
    """Mean of the harmonic, rhythmic, and balance components, in [0, 1]."""
    comps = mashability_components(a, b)
    return float(np.mean(list(comps.values())))
