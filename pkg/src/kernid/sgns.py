"""Negative-sampling SGD primitives shared by the text and structure models.

One positive row and k noise rows score against a hidden vector; the loss is
the usual sigmoid cross-entropy and noise tokens are drawn from the
unigram^(3/4) distribution.  The math lives in small pure functions so the
analytic gradients can be checked against finite differences directly.
"""

from __future__ import annotations

import numpy as np

from kernid.errors import DataError

NOISE_POWER = 0.75
_REDRAW_ATTEMPTS = 8


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def step_loss(hidden: np.ndarray, rows: np.ndarray) -> float:
    """Loss of one step; rows[0] is the positive token, the rest are noise."""
    scores = rows @ hidden
    return float(-log_sigmoid(scores[0]) - np.sum(log_sigmoid(-scores[1:])))


def step_gradients(hidden: np.ndarray, rows: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus analytic gradients w.r.t. the output rows and the hidden vector."""
    scores = rows @ hidden
    predictions = sigmoid(scores)
    labels = np.zeros(len(rows))
    labels[0] = 1.0
    err = predictions - labels  # dL/dscore
    grad_rows = np.outer(err, hidden)
    grad_hidden = err @ rows
    loss = float(-log_sigmoid(scores[0]) - np.sum(log_sigmoid(-scores[1:])))
    return loss, grad_rows, grad_hidden


class NoiseTable:
    """Cumulative unigram^(3/4) table for drawing negative samples."""

    def __init__(self, counts: np.ndarray):
        weights = np.asarray(counts, dtype=np.float64) ** NOISE_POWER
        total = weights.sum()
        if total <= 0:
            raise DataError("noise distribution has no tokens with positive count")
        self.cdf = np.cumsum(weights / total)
        self.cdf[-1] = 1.0

    def sample(self, rng: np.random.Generator, k: int, exclude: int) -> np.ndarray:
        """Draw k indices, redrawing collisions with the positive target."""
        out = np.searchsorted(self.cdf, rng.random(k), side="right")
        for _ in range(_REDRAW_ATTEMPTS):
            mask = out == exclude
            if not mask.any():
                return out
            out[mask] = np.searchsorted(self.cdf, rng.random(int(mask.sum())), side="right")
        # Pathologically peaked distribution: fall back to a neighbor index.
        out[out == exclude] = (exclude + 1) % len(self.cdf)
        return out


def linear_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Linearly decayed learning rate for update number `step` (0-based)."""
    if total_steps <= 0:
        return lr_start
    progress = min(step / total_steps, 1.0)
    return lr_start + (lr_end - lr_start) * progress
