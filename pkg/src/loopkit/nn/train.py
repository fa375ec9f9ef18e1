"""Seeded minibatch SGD for the CNN classifier and the Siamese embedder.

Both models train on precomputed log-mel features: the CNN on per-pair
mix features (keyed by pair id), the SNN on per-loop features (keyed by
loop id). Feature standardization statistics come from the training set
and travel with the checkpoint. The checkpoint with the best validation
loss is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..errors import InsufficientData, TrainingDiverged
from ..records import LoopPair, POSITIVE
from . import models
from .checkpoint import ModelCheckpoint
from .layers import Sequential
from .losses import bce_grad, bce_loss, contrastive_grad, contrastive_loss

_DTYPE = np.float32


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    negative_strategy: str = "equal"
    margin: float = 1.0  # contrastive margin (SNN only)
    in_shape: tuple = models.INPUT_SHAPE


class FeatureStore(dict):
    """Mapping of feature keys (pair or loop ids) to (1,H,W) arrays."""


def _labels(pairs: list[LoopPair]) -> np.ndarray:
    return np.array([1.0 if p.label == POSITIVE else 0.0 for p in pairs],
                    dtype=_DTYPE)


def _sgd_step(model: Sequential, lr: float) -> None:
    for p in model.parameters().values():
        p.value -= lr * p.grad


def _snapshot(model: Sequential) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state().items()}


def _check_finite(loss: float) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")


def _stack_features(features: FeatureStore, keys: list[str]) -> np.ndarray:
    try:
        return np.stack([features[k] for k in keys]).astype(_DTYPE)
    except KeyError as exc:
        raise InsufficientData(f"missing feature for {exc.args[0]!r}") from exc


def _feature_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.mean(axis=0), x.std(axis=0)


def _embed_pairs(model, xa, xb):
    """One shared forward pass for both twins; returns (ea, eb)."""
    emb = model.forward(np.concatenate([xa, xb]))
    return emb[: len(xa)], emb[len(xa) :]


def train(train_pairs: list[LoopPair], val_pairs: list[LoopPair],
          features: FeatureStore, kind: str, config: TrainConfig) -> ModelCheckpoint:
    """Train a 'cnn' or 'snn' model; deterministic given seed and ordering."""
    if not train_pairs or not val_pairs:
        raise InsufficientData("need non-empty train and validation pair sets")
    model = models.build_model(kind, seed=config.seed, in_shape=config.in_shape)
    model.astype(_DTYPE)
    model.seed_dropout(config.seed)
    rng = np.random.default_rng(config.seed)

    if kind == "cnn":
        x_train = _stack_features(features, [p.pair_id for p in train_pairs])
        x_val = _stack_features(features, [p.pair_id for p in val_pairs])
        mean, std = _feature_stats(x_train)
    else:
        loop_feats = _stack_features(
            features, sorted({l for p in train_pairs for l in (p.loop_a, p.loop_b)}))
        mean, std = _feature_stats(loop_feats)
        xa_train = _stack_features(features, [p.loop_a for p in train_pairs])
        xb_train = _stack_features(features, [p.loop_b for p in train_pairs])
        xa_val = _stack_features(features, [p.loop_a for p in val_pairs])
        xb_val = _stack_features(features, [p.loop_b for p in val_pairs])
    y_train = _labels(train_pairs)
    y_val = _labels(val_pairs)

    def norm(x):
        return models.standardize(x, mean, std).astype(_DTYPE)

    def batched(fn, *arrays):
        outs = []
        n = len(arrays[0])
        for lo in range(0, n, config.batch_size):
            outs.append(fn(*(a[lo : lo + config.batch_size] for a in arrays)))
        return np.concatenate(outs)

    def validate() -> dict:
        model.eval()
        if kind == "cnn":
            probs = batched(lambda xb: model.forward(norm(xb))[:, 0], x_val)
            loss = bce_loss(probs, y_val)
            acc = float(np.mean((probs >= 0.5) == (y_val > 0.5)))
            return {"val_loss": loss, "val_accuracy": acc}
        dists = batched(
            lambda xa, xb: np.linalg.norm(
                np.subtract(*_embed_pairs(model, norm(xa), norm(xb))), axis=1),
            xa_val, xb_val)
        loss = contrastive_loss(dists, y_val, config.margin)
        pos, neg = dists[y_val > 0.5], dists[y_val <= 0.5]
        sep = float(neg.mean() - pos.mean()) if len(pos) and len(neg) else 0.0
        return {"val_loss": loss, "val_separation": sep,
                "_val_dists": dists}

    history: list[dict] = []
    first = validate()
    best_dists = first.pop("_val_dists", None)
    best_loss = first["val_loss"]
    best_state = _snapshot(model)

    n = len(train_pairs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        model.train()
        train_losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            model.zero_grad()
            if kind == "cnn":
                probs = model.forward(norm(x_train[idx]))[:, 0]
                loss = bce_loss(probs, y_train[idx])
                _check_finite(loss)
                model.backward(bce_grad(probs, y_train[idx])[:, None].astype(_DTYPE))
            else:
                ea, eb = _embed_pairs(model, norm(xa_train[idx]), norm(xb_train[idx]))
                diff = ea - eb
                d = np.linalg.norm(diff, axis=1)
                loss = contrastive_loss(d, y_train[idx], config.margin)
                _check_finite(loss)
                dd = contrastive_grad(d, y_train[idx], config.margin)
                unit = diff / np.maximum(d, 1e-12)[:, None]
                ga = (dd[:, None] * unit).astype(_DTYPE)
                model.backward(np.concatenate([ga, -ga]))
            _sgd_step(model, config.lr)
            train_losses.append(loss)
        metrics = validate()
        dists = metrics.pop("_val_dists", None)
        record = {"epoch": epoch, "train_loss": float(np.mean(train_losses)),
                  **metrics}
        history.append(record)
        if metrics["val_loss"] < best_loss:
            best_loss = metrics["val_loss"]
            best_state = _snapshot(model)
            best_dists = dists

    threshold = None
    if kind == "snn" and best_dists is not None:
        threshold = choose_distance_threshold(best_dists, y_val)
    return ModelCheckpoint(kind=kind, state=best_state,
                           train_config={**asdict(config),
                                         "in_shape": list(config.in_shape)},
                           feature_mean=mean, feature_std=std,
                           history=history, distance_threshold=threshold)


def choose_distance_threshold(distances: np.ndarray, labels: np.ndarray) -> float:
    """Distance cut maximizing F1 (predict positive when d <= threshold)."""
    distances = np.asarray(distances, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    best_t, best_f1 = float(np.median(distances)), -1.0
    for q in np.linspace(0.0, 1.0, 101):
        t = float(np.quantile(distances, q))
        pred = distances <= t
        tp = int(np.sum(pred & labels))
        fp = int(np.sum(pred & ~labels))
        fn = int(np.sum(~pred & labels))
        f1 = 2 * tp / max(2 * tp + fp + fn, 1)
        if f1 > best_f1:
            best_f1, best_t = f1, t
    return best_t
