"""Skeleton network and the two compatibility models built on it.

The skeleton is a 2-conv + 3-FC network over 1 x 173 x 128 log-mel input:
16 and 4 filters of kernel 3 in the conv layers, then 256/128/16 output
features in the FC layers, with batch norm, 10% dropout, and PReLU on
every conv and FC layer. Conv blocks are followed by 2x2 max pooling.

The CNN classifier adds a 1-unit output layer with a sigmoid and scores a
pair from the log-mel of the two loops mixed in the time domain. The SNN
embeds single loops and compares them by Euclidean distance.
"""

from __future__ import annotations

import numpy as np

from .. import audio
from ..audio import AudioClip, MelSpectrogram
from ..errors import InvalidInput, ShapeError
from .layers import (BatchNorm, Conv2d, Dropout, Flatten, Linear, MaxPool2d,
                     PReLU, Sequential, Sigmoid)

INPUT_SHAPE = (1, 173, 128)
EMBEDDING_DIM = 16
DROPOUT_P = 0.10
CONV_FILTERS = (16, 4)
FC_FEATURES = (256, 128, EMBEDDING_DIM)


def _flatten_size(in_shape=INPUT_SHAPE) -> int:
    c, h, w = in_shape
    h, w = h // 2, w // 2  # pool after conv1
    h, w = h // 2, w // 2  # pool after conv2
    return CONV_FILTERS[1] * h * w


def build_skeleton(seed: int = 0, in_shape=INPUT_SHAPE) -> Sequential:
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = in_shape[0]
    for filters in CONV_FILTERS:
        layers += [Conv2d(in_ch, filters, kernel=3, rng=rng),
                   BatchNorm(filters), PReLU(), Dropout(DROPOUT_P), MaxPool2d()]
        in_ch = filters
    layers.append(Flatten())
    in_feat = _flatten_size(in_shape)
    for out_feat in FC_FEATURES:
        layers += [Linear(in_feat, out_feat, rng=rng),
                   BatchNorm(out_feat), PReLU(), Dropout(DROPOUT_P)]
        in_feat = out_feat
    model = Sequential(layers)
    model.seed_dropout(seed)
    return model


def build_model(kind: str, seed: int = 0, in_shape=INPUT_SHAPE) -> Sequential:
    """Full model for training/inference: 'cnn' adds the sigmoid head."""
    skeleton = build_skeleton(seed, in_shape)
    if kind == "snn":
        return skeleton
    if kind == "cnn":
        rng = np.random.default_rng(seed + 1)
        head = [Linear(EMBEDDING_DIM, 1, rng=rng), Sigmoid()]
        model = Sequential(skeleton.layers + head)
        model.seed_dropout(seed)
        return model
    raise InvalidInput(f"unknown model kind {kind!r}")


def mix_clips(a: AudioClip, b: AudioClip) -> AudioClip:
    """Peak-normalized time-domain sum of two canonical loops."""
    if len(a) != audio.LOOP_SAMPLES or len(b) != audio.LOOP_SAMPLES:
        raise InvalidInput("both clips must be canonical 2 s loops")
    mix = a.samples + b.samples
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix = mix / peak
    return AudioClip(mix, a.sample_rate)


def pair_input(a: AudioClip, b: AudioClip, stacked: bool = False) -> np.ndarray:
    """CNN input feature for a loop pair: log-mel of the mixed waveform.

    With ``stacked`` the two loops' log-mels become separate input channels
    instead (ablation variant; pair it with a 2-channel ``in_shape``).
    """
    if stacked:
        return np.stack([audio.clip_logmel(a).values,
                         audio.clip_logmel(b).values])
    mel = audio.clip_logmel(mix_clips(a, b))
    return mel.values[None, :, :]


def loop_input(clip: AudioClip) -> np.ndarray:
    """SNN input feature for a single loop."""
    if len(clip) != audio.LOOP_SAMPLES:
        raise InvalidInput("expected a canonical 2 s loop")
    return audio.clip_logmel(clip).values[None, :, :]


def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / np.maximum(std, 1e-6)


class Scorer:
    """Eval-mode wrapper around a trained model plus feature statistics."""

    def __init__(self, model: Sequential, kind: str,
                 feature_mean: np.ndarray, feature_std: np.ndarray,
                 distance_threshold: float | None = None,
                 in_shape: tuple = INPUT_SHAPE):
        self.model = model
        self.kind = kind
        self.feature_mean = feature_mean
        self.feature_std = feature_std
        self.distance_threshold = distance_threshold
        self.in_shape = tuple(in_shape)
        model.eval()

    def _forward(self, batch: np.ndarray) -> np.ndarray:
        return self.model.forward(standardize(batch, self.feature_mean,
                                              self.feature_std))

    def embed(self, features: np.ndarray) -> np.ndarray:
        """SNN embeddings for a batch of (1,173,128) features."""
        if self.kind != "snn":
            raise InvalidInput("embed() is only defined for SNN checkpoints")
        if features.ndim == 3:
            features = features[None]
        if features.shape[1:] != self.in_shape:
            raise ShapeError(f"expected (*, {self.in_shape}), got {features.shape}")
        return self._forward(features)

    def probability(self, pair_features: np.ndarray) -> np.ndarray:
        """CNN compatibility probabilities for a batch of pair features."""
        if self.kind != "cnn":
            raise InvalidInput("probability() is only defined for CNN checkpoints")
        if pair_features.ndim == 3:
            pair_features = pair_features[None]
        return self._forward(pair_features)[:, 0]


def cnn_score(source: AudioClip, target: AudioClip, scorer: Scorer) -> float:
    """Compatibility probability in [0, 1] for a pair of loops."""
    return float(scorer.probability(pair_input(source, target))[0])


def snn_embed(mel: MelSpectrogram | np.ndarray, scorer: Scorer) -> np.ndarray:
    feats = mel.values[None] if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    return scorer.embed(feats)[0]


def snn_distance(embedding_a: np.ndarray, embedding_b: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    a = np.asarray(embedding_a, dtype=np.float64)
    b = np.asarray(embedding_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
