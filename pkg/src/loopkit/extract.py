"""Bar-synchronous tensorization and NTF-based loop extraction.

A song is modelled as a non-negative bars x frames x mels tensor, factored
into sound templates, rhythm templates, per-loop mixing recipes, and a
loop layout saying which loop plays in which bar. Loop audio is rendered
by soft time-frequency masking of the best (highest-activation) bar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import audio
from .audio import AudioClip
from .errors import EstimationFailed, InvalidInput, NoInstance, TooShort

DEFAULT_FRAMES_PER_BAR = 64
MIN_BPM, MAX_BPM = 40.0, 240.0
MASK_FLOOR = 1e-3
_EPS = 1e-12


@dataclass(frozen=True)
class BarGrid:
    """Steady-tempo bar grid: bpm, downbeat offset, and bar count."""

    bpm: float
    downbeat_offset: float
    beats_per_bar: int = 4
    bar_count: int = 0

    @property
    def bar_duration(self) -> float:
        return self.beats_per_bar * 60.0 / self.bpm

    def bar_bounds(self, index: int, sample_rate: int) -> tuple[int, int]:
        start = self.downbeat_offset + index * self.bar_duration
        end = start + self.bar_duration
        return int(round(start * sample_rate)), int(round(end * sample_rate))


@dataclass(frozen=True)
class LoopLayout:
    """Loops x bars activation matrix, non-negative."""

    activations: np.ndarray


@dataclass(frozen=True)
class NtfModel:
    """Factorization result: R loop templates plus their layout."""

    sound_templates: np.ndarray   # R x mel_bins
    rhythm_templates: np.ndarray  # R x frames_per_bar
    recipes: np.ndarray           # R x R mixing weights
    layout: LoopLayout

    @property
    def rank(self) -> int:
        return self.sound_templates.shape[0]


def onset_strength(clip: AudioClip) -> np.ndarray:
    """Half-wave-rectified spectral flux over mel energies, per STFT frame."""
    mel = audio.mel_energies(audio.stft(clip))
    diff = np.diff(mel, axis=0, prepend=mel[:1])
    return np.maximum(diff, 0.0).sum(axis=1)


def build_bar_grid(clip: AudioClip, bpm_hint: float | None = None,
                   beats_per_bar: int = 4) -> BarGrid:
    """Estimate a steady-tempo bar grid from onset strength.

    With a ``bpm_hint`` the tempo is taken as given and only the downbeat
    offset is aligned; otherwise the tempo maximizes the autocorrelation
    of the onset curve over the 40-240 BPM lag range.
    """
    if bpm_hint is not None and not (MIN_BPM <= bpm_hint <= MAX_BPM):
        raise InvalidInput(f"bpm_hint {bpm_hint} outside [{MIN_BPM}, {MAX_BPM}]")
    if bpm_hint is None and clip.duration < 8.0:
        raise InvalidInput("need at least 8 s of audio to estimate tempo")
    flux = onset_strength(clip)
    frame_rate = clip.sample_rate / audio.HOP_SIZE
    if bpm_hint is not None:
        bpm = float(bpm_hint)
    else:
        centered = flux - flux.mean()
        if np.max(np.abs(centered)) < 1e-9:
            raise EstimationFailed("onset curve is flat; no periodicity")
        acorr = np.correlate(centered, centered, mode="full")[len(centered) - 1 :]
        min_lag = max(2, int(np.floor(frame_rate * 60.0 / MAX_BPM)))
        max_lag = min(len(acorr) - 1, int(np.ceil(frame_rate * 60.0 / MIN_BPM)))
        if max_lag <= min_lag:
            raise EstimationFailed("clip too short for tempo lags")
        lags = np.arange(min_lag, max_lag + 1)
        window = acorr[min_lag : max_lag + 1]
        if np.max(window) <= 0:
            raise EstimationFailed("no positive autocorrelation peak")
        best = lags[int(np.argmax(window))]
        bpm = 60.0 * frame_rate / best
    beat_period = 60.0 / bpm
    bar_duration = beats_per_bar * beat_period
    # Downbeat offset: frame-resolution scan over one bar, scoring onset
    # strength summed at the implied beat positions.
    n_offsets = max(1, int(round(bar_duration * frame_rate)))
    best_offset, best_score = 0.0, -np.inf
    times = np.arange(len(flux)) / frame_rate
    for k in range(n_offsets):
        offset = k / frame_rate
        beats = np.arange(offset, clip.duration - beat_period * 0.5, beat_period)
        if len(beats) == 0:
            continue
        score = np.interp(beats, times, flux).sum() / len(beats)
        if score > best_score + 1e-12:
            best_score, best_offset = score, offset
    bar_count = int((clip.duration - best_offset) // bar_duration)
    return BarGrid(bpm=bpm, downbeat_offset=best_offset,
                   beats_per_bar=beats_per_bar, bar_count=bar_count)


def tensorize(clip: AudioClip, grid: BarGrid,
              frames_per_bar: int = DEFAULT_FRAMES_PER_BAR) -> np.ndarray:
    """Stack per-bar linear mel energies, time-resampled to a fixed grid.

    Returns a non-negative bars x frames_per_bar x mel_bins array.
    """
    if grid.bar_count < 4:
        raise TooShort(f"need at least 4 bars, got {grid.bar_count}")
    bars = []
    for b in range(grid.bar_count):
        start, end = grid.bar_bounds(b, clip.sample_rate)
        segment = clip.samples[start:end]
        mel = audio.mel_energies(audio.stft(AudioClip(segment, clip.sample_rate)))
        src = np.linspace(0.0, 1.0, mel.shape[0])
        dst = np.linspace(0.0, 1.0, frames_per_bar)
        resampled = np.empty((frames_per_bar, mel.shape[1]))
        for m in range(mel.shape[1]):
            resampled[:, m] = np.interp(dst, src, mel[:, m])
        bars.append(resampled)
    return np.maximum(np.stack(bars), 0.0)


def _kl_divergence(v: np.ndarray, vhat: np.ndarray) -> float:
    """Generalized KL divergence with the usual 0*log0 = 0 convention."""
    vhat = np.maximum(vhat, _EPS)
    log_term = np.where(v > 0, v * np.log(np.maximum(v, _EPS) / vhat), 0.0)
    return float((log_term - v + vhat).sum())


def _loop_spectrograms(recipes, rhythm, sound) -> np.ndarray:
    """Per-loop template spectrograms: loops x frames x mels."""
    return np.einsum("lr,rt,rm->ltm", recipes, rhythm, sound)


def _reconstruct(activations, recipes, rhythm, sound) -> np.ndarray:
    w = _loop_spectrograms(recipes, rhythm, sound)
    return np.einsum("lb,ltm->btm", activations, w)


def ntf_factorize(tensor: np.ndarray, rank: int, iters: int = 200,
                  seed: int = 0, trace: list | None = None,
                  restarts: int = 5) -> NtfModel:
    """Multiplicative-update NTF minimizing generalized KL divergence.

    Factors are seeded from uniform(0, 1]; the objective is non-increasing
    at every iteration (within numerical slack). Multiplicative updates can
    stall in a symmetric local minimum where every component models the
    whole mixture, so several seeded restarts run and the lowest-objective
    solution wins; ``trace`` reports the winning run.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if rank < 1:
        raise InvalidInput(f"rank must be >= 1, got {rank}")
    if np.any(np.isnan(tensor)):
        raise InvalidInput("tensor contains NaN")
    if np.any(tensor < 0):
        raise InvalidInput("tensor must be non-negative")
    best_model, best_trace, best_obj = None, None, np.inf
    for attempt in range(max(1, restarts)):
        run_trace: list[float] = []
        model = _ntf_run(tensor, rank, iters, seed + 7919 * attempt, run_trace)
        obj = run_trace[-1]
        if obj < best_obj:
            best_model, best_trace, best_obj = model, run_trace, obj
    if trace is not None:
        trace.extend(best_trace)
    return best_model


def _ntf_run(tensor: np.ndarray, rank: int, iters: int, seed: int,
             trace: list) -> NtfModel:
    n_bars, n_frames, n_mels = tensor.shape
    rng = np.random.default_rng(seed)
    a = 1.0 - rng.random((rank, n_bars))      # layout activations
    # Identity-dominant recipe init: a dense random recipe matrix makes the
    # layout unidentifiable (only layout x recipes is constrained), so each
    # loop starts tied to its own template pair, with small noise on top.
    c = np.eye(rank) + 0.05 * (1.0 - rng.random((rank, rank)))
    h = 1.0 - rng.random((rank, n_frames))    # rhythm templates
    s = 1.0 - rng.random((rank, n_mels))      # sound templates

    if trace is not None:
        trace.append(_kl_divergence(tensor, _reconstruct(a, c, h, s)))
    for _ in range(iters):
        # layout
        w = _loop_spectrograms(c, h, s)
        vhat = np.maximum(np.einsum("lb,ltm->btm", a, w), _EPS)
        k = tensor / vhat
        num = np.einsum("btm,ltm->lb", k, w)
        den = np.maximum(w.sum(axis=(1, 2))[:, None], _EPS)
        a *= num / den
        # recipes
        vhat = np.maximum(np.einsum("lb,ltm->btm", a, _loop_spectrograms(c, h, s)), _EPS)
        k = tensor / vhat
        num = np.einsum("btm,lb,rt,rm->lr", k, a, h, s)
        den = np.maximum(np.outer(a.sum(axis=1), h.sum(axis=1) * s.sum(axis=1)), _EPS)
        c *= num / den
        # rhythm
        vhat = np.maximum(np.einsum("lb,ltm->btm", a, _loop_spectrograms(c, h, s)), _EPS)
        k = tensor / vhat
        num = np.einsum("btm,lb,lr,rm->rt", k, a, c, s)
        den = np.maximum(((a.sum(axis=1) @ c) * s.sum(axis=1))[:, None], _EPS)
        h *= num / den
        # sound
        vhat = np.maximum(np.einsum("lb,ltm->btm", a, _loop_spectrograms(c, h, s)), _EPS)
        k = tensor / vhat
        num = np.einsum("btm,lb,lr,rt->rm", k, a, c, h)
        den = np.maximum(((a.sum(axis=1) @ c) * h.sum(axis=1))[:, None], _EPS)
        s *= num / den
        if trace is not None:
            trace.append(_kl_divergence(tensor, _reconstruct(a, c, h, s)))

    return NtfModel(sound_templates=s, rhythm_templates=h, recipes=c,
                    layout=LoopLayout(activations=a))


def ntf_objective(tensor: np.ndarray, model: NtfModel) -> float:
    """Generalized KL divergence between the tensor and its reconstruction."""
    vhat = _reconstruct(model.layout.activations, model.recipes,
                        model.rhythm_templates, model.sound_templates)
    return _kl_divergence(np.asarray(tensor, dtype=np.float64), vhat)


def ntf_objective_trace(tensor: np.ndarray, rank: int, iters: int,
                        seed: int = 0) -> np.ndarray:
    """Objective value at init and after each iteration, for convergence checks."""
    trace: list[float] = []
    ntf_factorize(tensor, rank, iters=iters, seed=seed, trace=trace)
    return np.asarray(trace)


def reconstruct_loop_spectrogram(model: NtfModel, loop_index: int) -> np.ndarray:
    """One loop's template spectrogram (frames_per_bar x mel_bins)."""
    if not (0 <= loop_index < model.rank):
        raise InvalidInput(f"loop_index {loop_index} out of range for rank {model.rank}")
    return np.einsum("r,rt,rm->tm", model.recipes[loop_index],
                     model.rhythm_templates, model.sound_templates)


def extract_loop_audio(clip: AudioClip, grid: BarGrid, model: NtfModel,
                       loop_index: int) -> AudioClip:
    """Render one loop: best bar, soft TF mask, stretch to 2 s.

    The best instance is the bar with maximal layout activation. The mask
    is this loop's share of the summed loop reconstructions, mapped back
    to linear frequency through the mel filterbank and floored at 1e-3.
    """
    if not (0 <= loop_index < model.rank):
        raise InvalidInput(f"loop_index {loop_index} out of range")
    row = model.layout.activations[loop_index]
    if np.all(row <= 0):
        raise NoInstance(f"loop {loop_index} never active")
    bar = int(np.argmax(row))
    start, end = grid.bar_bounds(bar, clip.sample_rate)
    segment = clip.samples[start:end]
    spec = audio.stft_complex(segment)
    n_frames = spec.shape[0]

    fb = audio.cached_filterbank()
    acts = model.layout.activations[:, bar]
    mel_recons = _loop_spectrograms(model.recipes, model.rhythm_templates,
                                    model.sound_templates)  # R x T x M
    src = np.linspace(0.0, 1.0, mel_recons.shape[1])
    dst = np.linspace(0.0, 1.0, n_frames)
    lin = np.empty((model.rank, n_frames, fb.shape[1]))
    for r in range(model.rank):
        resampled = np.empty((n_frames, mel_recons.shape[2]))
        for m in range(mel_recons.shape[2]):
            resampled[:, m] = np.interp(dst, src, mel_recons[r, :, m])
        lin[r] = acts[r] * (resampled @ fb)
    total = lin.sum(axis=0)
    target = lin[loop_index]
    mask = np.where(total > _EPS, target / np.maximum(total, _EPS), 1.0 / model.rank)
    mask = np.clip(mask, MASK_FLOOR, 1.0)
    masked = spec * mask
    out = audio.istft(masked, length=len(segment))
    return audio.time_stretch(AudioClip(out, clip.sample_rate))


def loop_masks_at_bar(model: NtfModel, bar: int, n_frames: int) -> np.ndarray:
    """All loops' soft masks at one bar, before flooring; sums to 1 per bin."""
    fb = audio.cached_filterbank()
    acts = model.layout.activations[:, bar]
    mel_recons = _loop_spectrograms(model.recipes, model.rhythm_templates,
                                    model.sound_templates)
    src = np.linspace(0.0, 1.0, mel_recons.shape[1])
    dst = np.linspace(0.0, 1.0, n_frames)
    lin = np.empty((model.rank, n_frames, fb.shape[1]))
    for r in range(model.rank):
        resampled = np.empty((n_frames, mel_recons.shape[2]))
        for m in range(mel_recons.shape[2]):
            resampled[:, m] = np.interp(dst, src, mel_recons[r, :, m])
        lin[r] = acts[r] * (resampled @ fb)
    total = lin.sum(axis=0)
    return np.where(total > _EPS, lin / np.maximum(total, _EPS), 1.0 / model.rank)


def default_rank(bar_count: int, cap: int = 8) -> int:
    """Per-song NTF rank: min(cap, bar_count // 2), at least 1."""
    return max(1, min(cap, bar_count // 2))
