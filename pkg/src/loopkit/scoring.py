"""Uniform loop-pair scoring interface over CNN, SNN, and the baseline.

All scorers map (loop_a_id, loop_b_id) -> real with higher meaning more
compatible; the SNN adapter negates its embedding distance.
"""

from __future__ import annotations

import numpy as np

from . import audio, mashability, store
from .audio import AudioClip
from .errors import InvalidInput, Undeterminable
from .nn import models
from .nn.checkpoint import ModelCheckpoint

SCORER_KINDS = ("cnn", "snn", "amu")


class LoopScorer:
    """Scores pairs of loops referenced by id, loading audio on demand."""

    def __init__(self, kind: str, manifest: store.Manifest, workspace,
                 checkpoint: ModelCheckpoint | None = None):
        if kind not in SCORER_KINDS:
            raise InvalidInput(f"unknown scorer kind {kind!r}")
        if kind in ("cnn", "snn") and checkpoint is None:
            raise InvalidInput(f"{kind} scorer needs a checkpoint")
        self.kind = kind
        self.manifest = manifest
        self.root = store.workspace_paths(workspace)["root"]
        self.model = checkpoint.scorer() if checkpoint is not None else None
        self._clips: dict[str, AudioClip] = {}
        self._embeddings: dict[str, np.ndarray] = {}

    def clip(self, loop_id: str) -> AudioClip:
        if loop_id not in self._clips:
            record = self.manifest.loops.get(loop_id)
            if record is None:
                raise InvalidInput(f"unknown loop {loop_id}")
            self._clips[loop_id] = audio.read_wav(self.root / record.audio_path)
        return self._clips[loop_id]

    def _embedding(self, loop_id: str) -> np.ndarray:
        if loop_id not in self._embeddings:
            feat = models.loop_input(self.clip(loop_id))
            self._embeddings[loop_id] = self.model.embed(feat)[0]
        return self._embeddings[loop_id]

    def __call__(self, loop_a: str, loop_b: str) -> float:
        if self.kind == "cnn":
            return models.cnn_score(self.clip(loop_a), self.clip(loop_b), self.model)
        if self.kind == "snn":
            return -models.snn_distance(self._embedding(loop_a),
                                        self._embedding(loop_b))
        try:
            return mashability.mashability(self.clip(loop_a), self.clip(loop_b))
        except Undeterminable:
            return 0.0

    def classification_threshold(self) -> float:
        """Score cut for classification metrics (0.5 for CNN probabilities,
        the negated validation-chosen distance threshold for the SNN)."""
        if self.kind == "snn":
            if self.model.distance_threshold is None:
                raise InvalidInput("SNN checkpoint lacks a distance threshold")
            return -float(self.model.distance_threshold)
        return 0.5
