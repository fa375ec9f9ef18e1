"""Audio I/O and DSP shared by the whole toolkit.

All loops are canonicalized to mono 44100 Hz, 2.000 s (88200 samples).
Model inputs are 128-bin log mel-spectrograms with shape 173 x 128,
computed with a 2048-point Hamming window and 512-sample hop.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import InvalidInput

SAMPLE_RATE = 44100
LOOP_SECONDS = 2.0
LOOP_SAMPLES = int(round(SAMPLE_RATE * LOOP_SECONDS))  # 88200
WINDOW_SIZE = 2048
HOP_SIZE = 512
N_MELS = 128
LOG_EPS = 1e-10
LOG_FLOOR = float(np.log(LOG_EPS))


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM audio: float samples in [-1, 1] plus a sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise InvalidInput("samples contain NaN or inf")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude STFT: frames x bins, all entries >= 0."""

    magnitudes: np.ndarray
    frame_hop: int = HOP_SIZE
    window_size: int = WINDOW_SIZE

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[1]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log mel-spectrogram: frames x mel bins, clamped below at floor_db."""

    values: np.ndarray
    floor_db: float = LOG_FLOOR

    @property
    def shape(self):
        return self.values.shape


def read_wav(path) -> AudioClip:
    """Read a PCM16/PCM32/float32 WAV file, downmixing stereo to mono."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise InvalidInput(f"cannot read WAV file {path}: {exc}") from exc
    data = np.asarray(data)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as a mono float32 WAV file."""
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Polyphase resampling to ``target_rate``; identity rates pass through."""
    if target_rate <= 0:
        raise InvalidInput(f"target_rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return AudioClip(samples=clip.samples.copy(), sample_rate=target_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(samples=out, sample_rate=target_rate)


def _frame_signal(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Reflect-pad by window//2 on both sides and slice into frames.

    Yields 1 + len(samples)//hop frames, so a 2 s clip at 44100 Hz with
    the default 2048/512 analysis gives exactly 173 frames.
    """
    n_frames = 1 + len(samples) // hop
    pad = window // 2
    mode = "reflect" if len(samples) > pad else "constant"
    padded = np.pad(samples, pad, mode=mode)
    frames = np.empty((n_frames, window), dtype=np.float64)
    for i in range(n_frames):
        frames[i] = padded[i * hop : i * hop + window]
    return frames


def stft_complex(samples: np.ndarray, window: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> np.ndarray:
    """Complex STFT (frames x bins) with a Hamming window and centered frames."""
    if len(samples) == 0:
        raise InvalidInput("empty clip")
    if window <= 0 or hop <= 0:
        raise InvalidInput("window and hop must be positive")
    frames = _frame_signal(np.asarray(samples, dtype=np.float64), window, hop)
    win = np.hamming(window)
    return np.fft.rfft(frames * win, axis=1)


def stft(clip: AudioClip, window: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> Spectrogram:
    """Magnitude STFT of a clip; bins = window/2 + 1."""
    mags = np.abs(stft_complex(clip.samples, window, hop))
    return Spectrogram(magnitudes=mags, frame_hop=hop, window_size=window)


def istft(spec_complex: np.ndarray, window: int = WINDOW_SIZE, hop: int = HOP_SIZE,
          length: int | None = None) -> np.ndarray:
    """Overlap-add inverse of :func:`stft_complex` with window-sum correction."""
    n_frames = spec_complex.shape[0]
    win = np.hamming(window)
    out_len = window + hop * (n_frames - 1)
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    frames = np.fft.irfft(spec_complex, n=window, axis=1)
    for i in range(n_frames):
        out[i * hop : i * hop + window] += frames[i] * win
        norm[i * hop : i * hop + window] += win ** 2
    out /= np.maximum(norm, 1e-8)
    pad = window // 2
    out = out[pad:]
    if length is not None:
        if len(out) < length:
            out = np.pad(out, (0, length - len(out)))
        out = out[:length]
    return out


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    mel = f / (200.0 / 3.0)
    log_region = f >= 1000.0
    mel = np.where(log_region, 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / np.log(6.4) * 27.0, mel)
    return mel


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * (200.0 / 3.0)
    log_region = m >= 15.0
    f = np.where(log_region, 1000.0 * np.exp(np.log(6.4) * (m - 15.0) / 27.0), f)
    return f


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WINDOW_SIZE,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filterbank (n_mels x bins), slaney area-normalized."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        fb[m] *= 2.0 / (hi - lo)  # equal-area normalization
    return fb


_FB_CACHE: dict[tuple, np.ndarray] = {}


def cached_filterbank(n_mels: int = N_MELS, n_fft: int = WINDOW_SIZE,
                      sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    key = (n_mels, n_fft, sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_mels, n_fft, sample_rate)
    return _FB_CACHE[key]


def mel_energies(spec: Spectrogram, n_mels: int = N_MELS) -> np.ndarray:
    """Linear-domain mel energies (frames x n_mels), before log compression."""
    expected_bins = spec.window_size // 2 + 1
    if spec.n_bins != expected_bins:
        raise InvalidInput(f"expected {expected_bins} bins, got {spec.n_bins}")
    fb = cached_filterbank(n_mels, spec.window_size)
    return spec.magnitudes @ fb.T


def logmel(spec: Spectrogram, n_mels: int = N_MELS) -> MelSpectrogram:
    """Log-compressed mel spectrogram: log(mel + eps), clamped at the floor."""
    mel = mel_energies(spec, n_mels)
    values = np.log(mel + LOG_EPS)
    values = np.maximum(values, LOG_FLOOR)
    return MelSpectrogram(values=values, floor_db=LOG_FLOOR)


def clip_logmel(clip: AudioClip) -> MelSpectrogram:
    """Canonical feature path: STFT then log mel. 2 s @ 44100 -> 173 x 128."""
    return logmel(stft(clip))


def _lock_phases(phase_acc: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """Identity phase locking: rewrite each bin's phase relative to the
    accumulated phase of its nearest spectral peak.

    Independent per-bin accumulation destroys the fixed phase relations
    between bins inside one sinusoid's main lobe, and the overlap-add then
    cancels most of the energy. Locking non-peak bins to the peak keeps the
    vertical structure of the analysis frame intact.
    """
    mag = np.abs(frame)
    interior = (mag[1:-1] >= mag[:-2]) & (mag[1:-1] > mag[2:])
    peaks = np.flatnonzero(interior) + 1
    if peaks.size == 0:
        return phase_acc
    midpoints = (peaks[:-1] + peaks[1:]) / 2.0
    owner = peaks[np.searchsorted(midpoints, np.arange(len(mag)))]
    angles = np.angle(frame)
    return phase_acc[owner] + angles - angles[owner]


def phase_vocoder(spec_complex: np.ndarray, rate: float, hop: int = HOP_SIZE) -> np.ndarray:
    """Stretch an STFT in time by 1/rate with phase accumulation."""
    n_frames, n_bins = spec_complex.shape
    time_steps = np.arange(0, n_frames, rate)
    phase_advance = np.linspace(0, np.pi * hop, n_bins)
    out = np.empty((len(time_steps), n_bins), dtype=np.complex128)
    phase_acc = np.angle(spec_complex[0])
    padded = np.vstack([spec_complex, np.zeros((1, n_bins), dtype=np.complex128)])
    for i, step in enumerate(time_steps):
        idx = int(step)
        frac = step - idx
        lo, hi = padded[idx], padded[min(idx + 1, n_frames)]
        mag = (1.0 - frac) * np.abs(lo) + frac * np.abs(hi)
        phase = _lock_phases(phase_acc, lo)
        out[i] = mag * np.exp(1j * phase)
        dphase = np.angle(hi) - np.angle(lo) - phase_advance
        dphase -= 2.0 * np.pi * np.round(dphase / (2.0 * np.pi))
        phase_acc = phase + phase_advance + dphase
    return out


def time_stretch(clip: AudioClip, target_duration: float = LOOP_SECONDS) -> AudioClip:
    """Phase-vocoder stretch of a clip to an exact target duration.

    Pitch is preserved; the output length is round(target * rate) samples.
    A stretch ratio of exactly 1 passes samples through unchanged.
    """
    duration = clip.duration
    if not (0.25 < duration < 16.0):
        raise InvalidInput(f"duration {duration:.3f}s outside (0.25, 16) s")
    target_len = int(round(target_duration * clip.sample_rate))
    if target_len == len(clip.samples):
        return AudioClip(samples=clip.samples.copy(), sample_rate=clip.sample_rate)
    rate = len(clip.samples) / target_len
    spec = stft_complex(clip.samples)
    stretched = phase_vocoder(spec, rate)
    out = istft(stretched, length=target_len)
    return AudioClip(samples=out, sample_rate=clip.sample_rate)
