"""Magnitude-aware duration partitions.

Inter-packet durations span microseconds to minutes, so they are clustered in
log10 space with a 1-D k-means. Downstream models predict the partition id;
concrete values are drawn back out of the partition's training members with
+/-10% uniform noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidTokenError

log = logging.getLogger(__name__)

EPSILON_FLOOR = 1e-6
NOISE_FRACTION = 0.1


@dataclass
class DurationModel:
    k: int
    centroids: list[float]          # log10 space, ascending
    members: list[list[float]]      # clamped, untransformed
    epsilon_floor: float = EPSILON_FLOOR

    def to_dict(self) -> dict:
        return {"k": self.k, "centroids": self.centroids, "members": self.members,
                "epsilon_floor": self.epsilon_floor}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DurationModel":
        return cls(int(d["k"]), [float(c) for c in d["centroids"]],
                   [[float(v) for v in m] for m in d["members"]], float(d["epsilon_floor"]))


def _nearest(centroids: np.ndarray, x: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties resolve to the lower index
    return np.argmin(np.abs(x[:, None] - centroids[None, :]), axis=1)


def fit_duration_partitions(durations: Sequence[float], k: int = 8, epsilon_floor: float = EPSILON_FLOOR,
                            max_iter: int = 300) -> DurationModel:
    if len(durations) == 0:
        raise ValueError("no durations to fit")
    if k < 1:
        raise ValueError("k must be >= 1")
    clamped = np.maximum(np.asarray(durations, dtype=np.float64), epsilon_floor)
    x = np.log10(clamped)
    distinct = np.unique(x)
    if len(distinct) < k:
        log.warning("only %d distinct durations; reducing k from %d", len(distinct), k)
        k = len(distinct)

    centroids = np.quantile(distinct, (np.arange(k) + 0.5) / k)
    for _ in range(max_iter):
        labels = _nearest(centroids, x)
        new = np.array([x[labels == j].mean() if np.any(labels == j) else np.nan for j in range(k)])
        new = np.sort(new[~np.isnan(new)])
        if len(new) == len(centroids) and np.allclose(new, centroids, rtol=0, atol=1e-12):
            centroids = new
            break
        centroids = new
    labels = _nearest(centroids, x)
    members = [clamped[labels == j].tolist() for j in range(len(centroids))]
    keep = [j for j, m in enumerate(members) if m]
    return DurationModel(len(keep), [float(centroids[j]) for j in keep], [members[j] for j in keep],
                         epsilon_floor)


def duration_to_token(model: DurationModel, q: float) -> int:
    x = np.log10(max(float(q), model.epsilon_floor))
    return int(_nearest(np.asarray(model.centroids), np.array([x]))[0])


def durations_to_tokens(model: DurationModel, qs: Sequence[float]) -> np.ndarray:
    x = np.log10(np.maximum(np.asarray(qs, dtype=np.float64), model.epsilon_floor))
    return _nearest(np.asarray(model.centroids), x)


def sample_duration(model: DurationModel, token: int, rng: np.random.Generator) -> float:
    """Pick a member ``q`` of the partition and return a value in ``[q - q/10, q + q/10]``."""
    if not 0 <= token < model.k:
        raise InvalidTokenError(f"duration token {token} outside [0, {model.k})")
    pool = model.members[token]
    q = pool[int(rng.integers(len(pool)))]
    lo, hi = q * (1 - NOISE_FRACTION), q * (1 + NOISE_FRACTION)
    return max(0.0, min(max(float(rng.uniform(lo, hi)), lo), hi))
