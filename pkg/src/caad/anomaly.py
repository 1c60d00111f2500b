"""Anomaly scoring head and the deviation loss against a Gaussian reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neural import DenseNet

ANOMALY_HIDDEN = (100, 100, 100)
MIN_REFERENCE_STD = 1e-6


@dataclass(frozen=True)
class ReferenceStats:
    """Mean and population std of ``n_samples`` draws from N(prior_mean, prior_std**2)."""

    mean: float
    std: float
    n_samples: int
    prior_mean: float = 0.0
    prior_std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("reference std must be positive")


def sample_reference(n_samples=5000, mu=0.0, sigma=1.0, rng=None, max_tries=10) -> ReferenceStats:
    """Draw reference scores and summarise them.

    Draws whose spread falls below ``MIN_REFERENCE_STD`` are rejected and
    redrawn, up to ``max_tries`` times.
    """
    if n_samples < 2:
        raise ValueError("need at least two reference draws")
    if sigma <= 0:
        raise ValueError("prior sigma must be positive")
    rng = np.random.default_rng(rng)
    for _ in range(max_tries):
        r = rng.normal(mu, sigma, size=n_samples)
        std = float(r.std())
        if std >= MIN_REFERENCE_STD:
            return ReferenceStats(float(r.mean()), std, int(n_samples), float(mu), float(sigma))
    raise RuntimeError(f"reference std stayed below {MIN_REFERENCE_STD} after {max_tries} draws")


def deviation_loss(nu, y, ref: ReferenceStats, margin=5.0):
    """Per-sample deviation loss and its derivative with respect to the score.

    Normals pay the absolute standardised deviation from the reference mean;
    anomalies pay a hinge until they sit ``margin`` reference stds above it.
    Subgradients at both kinks are taken as zero.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    nu = np.asarray(nu, dtype=np.float64)
    y = np.asarray(y)
    z = (nu - ref.mean) / ref.std
    normal_loss = np.abs(z)
    anomaly_loss = np.maximum(0.0, margin - z)
    loss = np.where(y == 1, anomaly_loss, normal_loss)
    grad = np.where(y == 1, -(z < margin).astype(np.float64), np.sign(z)) / ref.std
    return loss, grad


def standardized_score(nu, ref: ReferenceStats):
    return (np.asarray(nu, dtype=np.float64) - ref.mean) / ref.std


def make_anomaly_head(input_dim, rng=None, hidden=ANOMALY_HIDDEN) -> DenseNet:
    """Relu MLP with a single linear output unit."""
    return DenseNet.build(input_dim, hidden, 1, output_activation="linear", rng=rng)


def score(head: DenseNet, features):
    """Anomaly score for one feature vector (scalar) or a batch (1-D array)."""
    out = head(features)
    return float(out[0]) if np.ndim(features) == 1 else out[:, 0]
