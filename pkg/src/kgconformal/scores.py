"""Nonconformity transforms of plausibility scores: softmax (default), APS, RAPS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScorerConfig",
    "aps_scores",
    "nonconformity",
    "raps_scores",
    "softmax_probs",
    "softmax_scores",
    "uniform_for_query",
]


@dataclass(frozen=True)
class ScorerConfig:
    kind: str = "softmax"  # softmax | aps | raps
    raps_lambda: float = 0.01
    raps_k_reg: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("softmax", "aps", "raps"):
            raise ValueError(f"unknown nonconformity kind: {self.kind}")
        if self.raps_lambda < 0:
            raise ValueError("raps_lambda must be nonnegative")
        if self.raps_k_reg < 1:
            raise ValueError("raps_k_reg must be >= 1")


def softmax_probs(raw: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over all candidate entities."""
    raw = np.asarray(raw, dtype=np.float64)
    shifted = raw - raw.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def softmax_scores(raw: np.ndarray) -> np.ndarray:
    """Nonconformity 1 - softmax(raw); lower means more plausible."""
    return 1.0 - softmax_probs(raw)


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # stable: ties broken by lowest entity index
    return np.argsort(-probs, kind="stable")


def aps_scores(raw: np.ndarray, u: float) -> np.ndarray:
    """Cumulative-probability nonconformity.

    Candidates are sorted by descending softmax probability (ties by entity
    index); the score of a candidate is the probability mass strictly ahead
    of it plus ``u`` times its own mass.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must be in [0, 1]")
    probs = softmax_probs(raw)
    order = _descending_order(probs)
    sorted_probs = probs[order]
    ahead = np.concatenate([[0.0], np.cumsum(sorted_probs)[:-1]])
    scores_sorted = ahead + u * sorted_probs
    out = np.empty_like(scores_sorted)
    out[order] = scores_sorted
    return out


def raps_scores(raw: np.ndarray, u: float, lam: float, k_reg: int) -> np.ndarray:
    """APS plus a rank-based penalty ``lam * max(position - k_reg, 0)``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if k_reg < 1:
        raise ValueError("k_reg must be >= 1")
    probs = softmax_probs(raw)
    order = _descending_order(probs)
    positions = np.empty(len(probs), dtype=np.int64)
    positions[order] = np.arange(1, len(probs) + 1)
    penalty = lam * np.maximum(positions - k_reg, 0)
    return aps_scores(raw, u) + penalty


def uniform_for_query(seed: int, query_index: int) -> float:
    """Deterministic uniform draw for the given query position in a run."""
    return float(np.random.default_rng([seed, query_index]).random())


def nonconformity(raw: np.ndarray, cfg: ScorerConfig, query_index: int = 0) -> np.ndarray:
    """Apply the configured transform; APS/RAPS draw one u per query."""
    if cfg.kind == "softmax":
        return softmax_scores(raw)
    u = uniform_for_query(cfg.rng_seed, query_index)
    if cfg.kind == "aps":
        return aps_scores(raw, u)
    return raps_scores(raw, u, cfg.raps_lambda, cfg.raps_k_reg)
