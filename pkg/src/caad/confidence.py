"""Confidence target, confidence head and the decision thresholds derived from it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neural import DenseNet

CONFIDENCE_HIDDEN = (100, 100, 100, 100)


def _spread(sigma, squared_sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return sigma * sigma if squared_sigma else sigma


def prediction_probability(nu, mu=0.0, sigma=1.0, squared_sigma=False):
    """Gaussian density of the score rescaled so that its mode maps to 1.

    By default the exponent denominator is ``2 * sigma``; ``squared_sigma``
    switches it to the textbook ``2 * sigma**2``. Both agree for sigma = 1.
    """
    s = _spread(sigma, squared_sigma)
    nu = np.asarray(nu, dtype=np.float64)
    out = np.exp(-((nu - mu) ** 2) / (2.0 * s))
    return float(out) if out.ndim == 0 else out


def anomaly_probability(prob, y):
    """Confidence target: ``prob`` for normals, ``1 - prob`` for anomalies."""
    prob = np.asarray(prob, dtype=np.float64)
    out = np.where(np.asarray(y) == 1, 1.0 - prob, prob)
    return float(out) if out.ndim == 0 else out


def confidence_loss(iota, g):
    """Squared error and its derivative with respect to ``iota``."""
    iota = np.asarray(iota, dtype=np.float64)
    diff = iota - np.asarray(g, dtype=np.float64)
    return diff * diff, 2.0 * diff


def boundary_score(target_prob=0.5, mu=0.0, sigma=1.0, squared_sigma=False):
    """Score above the mode at which :func:`prediction_probability` equals ``target_prob``."""
    if not 0.0 < target_prob <= 1.0:
        raise ValueError("target_prob must lie in (0, 1]")
    s = _spread(sigma, squared_sigma)
    return mu + float(np.sqrt(-2.0 * s * np.log(target_prob)))


@dataclass(frozen=True)
class DecisionThresholds:
    t_ano: float
    t_conf: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.t_conf <= 1.0:
            raise ValueError("t_conf must lie in [0, 1]")
        if not np.isfinite(self.t_ano):
            raise ValueError("t_ano must be finite")

    @classmethod
    def derive(cls, mu=0.0, sigma=1.0, t_conf=0.9, squared_sigma=False, boundary_prob=0.5):
        return cls(boundary_score(boundary_prob, mu, sigma, squared_sigma), t_conf)


def make_confidence_head(input_dim, rng=None, hidden=CONFIDENCE_HIDDEN) -> DenseNet:
    """Relu MLP with a sigmoid output unit, so confidences stay in [0, 1]."""
    return DenseNet.build(input_dim, hidden, 1, output_activation="sigmoid", rng=rng)


def confidence(head: DenseNet, features):
    out = head(features)
    return float(out[0]) if np.ndim(features) == 1 else out[:, 0]
