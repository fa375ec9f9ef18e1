"""Objective evaluation: balanced classification and 100-candidate ranking.

A scorer is any callable mapping (loop_a_id, loop_b_id) -> real, higher
meaning more compatible. Ranking metrics depend only on score order, so
any strictly increasing transform of a scorer leaves them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .errors import InsufficientData, InvalidInput
from .records import LoopPair, POSITIVE, STRATEGIES

N_CANDIDATES = 100

# Reference results reported on the full 3508-song corpus, for comparison
# when a user runs the evaluation at scale.
REFERENCE_RESULTS = {
    ("cnn", "random"): {"accuracy": 0.60, "f1": 0.59, "avg_rank": 43.0,
                        "top10": 0.13, "top30": 0.35, "top50": 0.59},
    ("cnn", "selected"): {"accuracy": 0.59, "f1": 0.59, "avg_rank": 43.1,
                          "top10": 0.13, "top30": 0.29, "top50": 0.62},
    ("cnn", "reverse"): {"accuracy": 0.63, "f1": 0.62, "avg_rank": 41.2,
                         "top10": 0.19, "top30": 0.42, "top50": 0.62},
    ("cnn", "shift"): {"accuracy": 0.57, "f1": 0.56, "avg_rank": 49.0,
                       "top10": 0.11, "top30": 0.34, "top50": 0.54},
    ("cnn", "rearrange"): {"accuracy": 0.57, "f1": 0.57, "avg_rank": 47.7,
                           "top10": 0.10, "top30": 0.31, "top50": 0.57},
    ("snn", "random"): {"accuracy": 0.51, "f1": 0.47, "avg_rank": 34.2,
                        "top10": 0.27, "top30": 0.52, "top50": 0.74},
    ("snn", "selected"): {"accuracy": 0.52, "f1": 0.47, "avg_rank": 42.8,
                          "top10": 0.18, "top30": 0.39, "top50": 0.59},
    ("snn", "reverse"): {"accuracy": 0.53, "f1": 0.48, "avg_rank": 42.7,
                         "top10": 0.16, "top30": 0.37, "top50": 0.62},
    ("snn", "shift"): {"accuracy": 0.53, "f1": 0.52, "avg_rank": 43.0,
                       "top10": 0.16, "top30": 0.41, "top50": 0.65},
    ("snn", "rearrange"): {"accuracy": 0.53, "f1": 0.53, "avg_rank": 44.2,
                           "top10": 0.16, "top30": 0.40, "top50": 0.60},
}

PairScorer = Callable[[str, str], float]


@dataclass(frozen=True)
class RankingTask:
    """One query, 100 candidates, exactly one true co-occurring target."""

    query_loop_id: str
    candidates: tuple
    target_id: str

    def __post_init__(self):
        if len(self.candidates) != N_CANDIDATES:
            raise InvalidInput(
                f"expected {N_CANDIDATES} candidates, got {len(self.candidates)}")
        if len(set(self.candidates)) != len(self.candidates):
            raise InvalidInput("candidates contain duplicates")
        if self.candidates.count(self.target_id) != 1:
            raise InvalidInput("target must appear exactly once in candidates")


@dataclass
class EvalReport:
    accuracy: float | None = None
    f1: float | None = None
    avg_rank: float | None = None
    top10: float | None = None
    top30: float | None = None
    top50: float | None = None
    n_classification_pairs: int = 0
    n_ranking_tasks: int = 0
    tie_count: int = 0
    reference: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def classification_eval(scorer: PairScorer, pairs: list[LoopPair],
                        threshold: float = 0.5,
                        allow_unbalanced: bool = False) -> tuple[float, float]:
    """Accuracy and binary F1 of thresholded scores on a 1:1 balanced set."""
    if not pairs:
        raise InvalidInput("empty pair set")
    labels = np.array([p.label == POSITIVE for p in pairs])
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos != n_neg and not allow_unbalanced:
        raise InvalidInput(f"unbalanced set: {n_pos} positives vs {n_neg} negatives")
    scores = np.array([scorer(p.loop_a, p.loop_b) for p in pairs])
    pred = scores >= threshold
    accuracy = float(np.mean(pred == labels))
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    f1 = 2 * tp / max(2 * tp + fp + fn, 1)
    return accuracy, f1


def rank_of_target(scores: np.ndarray, target_index: int) -> tuple[int, int]:
    """1-based rank after stable descending sort; also counts score ties."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    rank = int(np.flatnonzero(order == target_index)[0]) + 1
    ties = int(np.sum(scores == scores[target_index])) - 1
    return rank, ties


def ranking_eval(scorer: PairScorer, tasks: list[RankingTask]) -> EvalReport:
    """Average rank and top-10/30/50 hit rates over ranking tasks."""
    if not tasks:
        raise InvalidInput("no ranking tasks")
    ranks = []
    ties_total = 0
    for task in tasks:
        scores = np.array([scorer(task.query_loop_id, c) for c in task.candidates])
        target_index = task.candidates.index(task.target_id)
        rank, ties = rank_of_target(scores, target_index)
        ranks.append(rank)
        ties_total += ties
    ranks = np.array(ranks)
    return EvalReport(
        avg_rank=float(ranks.mean()),
        top10=float(np.mean(ranks <= 10)),
        top30=float(np.mean(ranks <= 30)),
        top50=float(np.mean(ranks <= 50)),
        n_ranking_tasks=len(tasks),
        tie_count=ties_total,
    )


def build_classification_set(val_positives: list[LoopPair],
                             negatives: list[LoopPair]) -> list[LoopPair]:
    """Validation positives plus an equal number of negatives, 1:1."""
    if len(negatives) < len(val_positives):
        raise InsufficientData(
            f"need {len(val_positives)} negatives, have {len(negatives)}")
    by_strategy: dict[str, list[LoopPair]] = {s: [] for s in STRATEGIES}
    for p in sorted(negatives, key=lambda p: p.pair_id):
        by_strategy.setdefault(p.strategy, []).append(p)
    chosen: list[LoopPair] = []
    i = 0
    # round-robin over strategies keeps per-strategy counts within 1
    while len(chosen) < len(val_positives):
        strategy = STRATEGIES[i % len(STRATEGIES)]
        bucket = by_strategy.get(strategy, [])
        if bucket:
            chosen.append(bucket.pop(0))
        elif not any(by_strategy.values()):
            raise InsufficientData("ran out of negatives")
        i += 1
    return list(val_positives) + chosen


def build_ranking_tasks(test_positives: list[LoopPair], loop_pool: list[str],
                        seed: int = 0) -> list[RankingTask]:
    """One task per held-out positive pair: target + 99 sampled distractors."""
    rng = np.random.default_rng(seed)
    tasks = []
    pool = sorted(set(loop_pool))
    for pair in sorted(test_positives, key=lambda p: p.pair_id):
        query, target = pair.loop_a, pair.loop_b
        distractor_pool = [l for l in pool if l not in (query, target)]
        if len(distractor_pool) < N_CANDIDATES - 1:
            raise InsufficientData(
                f"need {N_CANDIDATES - 1} distractors, have {len(distractor_pool)}")
        picks = rng.choice(len(distractor_pool), size=N_CANDIDATES - 1,
                           replace=False)
        candidates = [target] + [distractor_pool[int(i)] for i in sorted(picks)]
        tasks.append(RankingTask(query_loop_id=query,
                                 candidates=tuple(candidates), target_id=target))
    return tasks


def format_report(report: EvalReport, label: str = "") -> str:
    """Human-readable table of the report's metrics."""
    lines = [f"== Evaluation report {label} ==".strip()]
    rows = [("Accuracy", report.accuracy), ("F1 score", report.f1),
            ("Avg. rank", report.avg_rank), ("Top 10", report.top10),
            ("Top 30", report.top30), ("Top 50", report.top50)]
    for name, value in rows:
        lines.append(f"  {name:<10} {'-' if value is None else f'{value:.3f}'}")
    if report.tie_count:
        lines.append(f"  (ties encountered: {report.tie_count})")
    return "\n".join(lines)
