"""KNN-vote predictor over a feature memory, with confidence-gated augmentation.

The class score for c sums the cosine similarities of the k nearest entries
labeled c; probabilities are the softmax of those scores. When a prediction is
confident enough, the query is stored back into the memory under its predicted
label, so later queries can lean on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import softmax
from .errors import BadParams
from .memory_bank import MemoryBank, NeighborSet, Target


def default_margin(num_classes: int) -> float:
    """Confidence gate default: 0.5 for binary, a bit stricter for few classes."""
    if num_classes < 1:
        raise BadParams("num_classes must be >= 1")
    if num_classes <= 2:
        return 0.5
    return max(0.5, 2.0 / num_classes)


@dataclass(frozen=True)
class AdaptConfig:
    """Knobs for one adaptation stream; margin None defers to default_margin."""

    k: int = 10
    margin: float | None = None
    augment_enabled: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise BadParams("k must be >= 1")
        if self.margin is not None and not (0.0 < self.margin < 1.0):
            raise BadParams("margin must lie in (0, 1)")

    def resolve_margin(self, num_classes: int) -> float:
        return self.margin if self.margin is not None else default_margin(num_classes)


@dataclass(frozen=True)
class Prediction:
    label: int
    confidence: float
    probs: np.ndarray = field(repr=False)
    class_scores: np.ndarray = field(repr=False)
    neighbors: NeighborSet = field(repr=False)


def _predict_from_neighbors(bank: MemoryBank, neighbors: NeighborSet) -> Prediction:
    scores = np.zeros(bank.num_classes, dtype=np.float64)
    for entry_id, sim in neighbors:
        scores[bank.label_of(entry_id)] += sim
    probs = softmax(scores)
    label = int(np.argmax(probs))  # argmax ties resolve to the lowest index
    return Prediction(
        label=label,
        confidence=float(probs[label]),
        probs=probs,
        class_scores=scores,
        neighbors=neighbors,
    )


def predict(bank: MemoryBank, query, k: int) -> Prediction:
    """Vote over the k nearest stored features (cosine similarity)."""
    return _predict_from_neighbors(bank, bank.knn_exact(query, k))


def predict_excluding(bank: MemoryBank, query, k: int, excluded: set[int]) -> Prediction:
    """Like predict, but the search skips excluded ids and refills to k."""
    return _predict_from_neighbors(bank, bank.knn_exact(query, k, exclude=excluded))


def adapt_step(
    bank: MemoryBank, query, config: AdaptConfig
) -> tuple[Prediction, bool, int | None]:
    """Predict, then store the query under its predicted label if confident.

    The prediction is computed before any insertion, so a sample never votes
    for itself. Returns (prediction, inserted, entry_id or None).
    """
    if config.augment_enabled and bank.capacity is not None:
        raise BadParams("augmentation requires an unbounded (inference-mode) bank")
    pred = predict(bank, query, config.k)
    if config.augment_enabled and pred.confidence > config.resolve_margin(bank.num_classes):
        entry_id = bank.insert(query, pred.label, Target(pred.confidence))
        return pred, True, entry_id
    return pred, False, None
