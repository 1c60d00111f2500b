"""Three-stage training, balanced batching, augmentation and dual-threshold diagnosis."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Callable

import numpy as np
from scipy import ndimage

from .anomaly import deviation_loss, make_anomaly_head, sample_reference
from .confidence import (
    DecisionThresholds,
    anomaly_probability,
    confidence_loss,
    make_confidence_head,
    prediction_probability,
)
from .exceptions import ConfigError, DataError, DivergenceError
from .features import make_extractor
from .neural import LrSchedule, OptimizerState, apply_update

logger = logging.getLogger(__name__)

# rng stream ids; every consumer gets its own stream derived from (seed, stage, purpose)
INIT, BATCH, REFERENCE, AUGMENT = 0, 1, 2, 3


def stage_rng(seed, stage, purpose):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stage), int(purpose)]))


@dataclass
class TrainConfig:
    batch_size: int = 40
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage3_epochs: int = 10
    lr: float = 5e-4
    lr_final: float = 1e-6
    stage3_lr: float = 1e-7
    ano_weight: float = 1.0
    conf_weight: float = 1.0
    margin: float = 5.0
    n_reference: int = 5000
    ref_mean: float = 0.0
    ref_std: float = 1.0
    squared_sigma: bool = False
    augment: bool = True
    crop_fraction: float = 0.875
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be a positive even number")
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr <= 0 or self.lr_final <= 0 or self.lr_final > self.lr:
            raise ConfigError("need 0 < lr_final <= lr")
        if self.stage3_lr < 0:
            raise ConfigError("stage3_lr must be non-negative")
        if self.margin <= 0 or self.ref_std <= 0 or self.n_reference < 2:
            raise ConfigError("margin and ref_std must be positive and n_reference >= 2")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigError("crop_fraction must lie in (0, 1]")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return asdict(self)


class BalancedBatchSampler:
    """Yields index batches with exactly half positives and half negatives.

    Each class is drawn from its own shuffled stream that is reshuffled when
    exhausted, so the minority class is effectively sampled with replacement
    across an epoch. One epoch is enough batches to visit every negative once.
    """

    def __init__(self, labels, batch_size, rng=None):
        labels = np.asarray(labels)
        if batch_size < 2 or batch_size % 2:
            raise ConfigError("batch_size must be a positive even number")
        self.half = batch_size // 2
        self.rng = np.random.default_rng(rng)
        self._pools = {}
        for cls in (0, 1):
            idx = np.flatnonzero(labels == cls)
            if idx.size == 0:
                name = "positive" if cls else "negative"
                raise DataError(f"balanced batching needs at least one {name} example")
            self._pools[cls] = idx
        self._queues = {0: np.empty(0, dtype=np.intp), 1: np.empty(0, dtype=np.intp)}
        self.batches_per_epoch = int(np.ceil(self._pools[0].size / self.half))

    def _take(self, cls):
        out = []
        need = self.half
        while need:
            if self._queues[cls].size == 0:
                self._queues[cls] = self.rng.permutation(self._pools[cls])
            chunk = self._queues[cls][:need]
            self._queues[cls] = self._queues[cls][chunk.size:]
            out.append(chunk)
            need -= chunk.size
        return np.concatenate(out)

    def next_batch(self):
        return np.concatenate([self._take(1), self._take(0)])

    def epoch(self):
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()


def balanced_batch(labels, batch_size, rng=None):
    """One balanced batch of indices into ``labels``."""
    return BalancedBatchSampler(labels, batch_size, rng).next_batch()


def center_crop(image, crop):
    h, w = image.shape[-2:]
    if crop > h or crop > w:
        raise DataError(f"crop {crop} larger than image {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return image[..., top:top + crop, left:left + crop]


def augment(image, rng=None, *, size=None, crop=None, zoom_range=(0.9, 1.1), flip_prob=0.5,
            zoom=None, offset=None, flip=None):
    """Resize, random crop, random zoom and random horizontal flip of a ``(C, H, W)`` image.

    ``zoom``, ``offset`` and ``flip`` pin the otherwise random choices.
    """
    rng = np.random.default_rng(rng)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError(f"augment expects a (C, H, W) image, got shape {image.shape}")
    if size is not None and image.shape[1:] != (size, size):
        image = np.stack([
            ndimage.zoom(ch, (size / ch.shape[0], size / ch.shape[1]), order=1, mode="nearest")
            for ch in image
        ])
    h, w = image.shape[1:]
    if crop is None:
        crop = int(round(0.875 * min(h, w)))
    if crop > h or crop > w:
        raise DataError(f"crop {crop} larger than image {h}x{w}")
    if offset is None:
        offset = (int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)))
    patch = image[:, offset[0]:offset[0] + crop, offset[1]:offset[1] + crop]
    if zoom is None:
        zoom = float(rng.uniform(*zoom_range))
    if zoom != 1.0:
        c = (crop - 1) / 2.0
        inv = 1.0 / zoom
        patch = np.stack([
            ndimage.affine_transform(ch, np.diag([inv, inv]), offset=[c - inv * c] * 2, order=1, mode="nearest")
            for ch in patch
        ])
    if flip is None:
        flip = bool(rng.random() < flip_prob)
    if flip:
        patch = patch[:, :, ::-1]
    return np.ascontiguousarray(patch)


class CAADNetwork:
    """Shared extractor plus anomaly head and confidence head."""

    def __init__(self, extractor, anomaly_head, confidence_head):
        self.extractor = extractor
        self.anomaly_head = anomaly_head
        self.confidence_head = confidence_head

    @classmethod
    def build(cls, kind, input_shape, *, feature_dim=32, channels=(8, 16), seed=0):
        rng = stage_rng(seed, 0, INIT)
        extractor = make_extractor(kind, input_shape=input_shape, output_dim=feature_dim,
                                   channels=channels, rng=rng)
        d = extractor.output_dim
        return cls(extractor, make_anomaly_head(d, rng), make_confidence_head(d, rng))

    @property
    def is_image(self):
        return self.extractor.kind == "tiny_cnn"

    def copy(self):
        return CAADNetwork(self.extractor.copy(), self.anomaly_head.copy(), self.confidence_head.copy())

    def score_and_confidence(self, x, batch_size=512):
        """Anomaly scores and confidences for already-preprocessed inputs."""
        nus, iotas = [], []
        for start in range(0, len(x), batch_size):
            feats, _ = self.extractor.extract(x[start:start + batch_size])
            nus.append(self.anomaly_head(feats)[:, 0])
            iotas.append(self.confidence_head(feats)[:, 0])
        if not nus:
            return np.empty(0), np.empty(0)
        return np.concatenate(nus), np.concatenate(iotas)


def prepare_inputs(network, x, cfg: TrainConfig, rng=None, train=False):
    """Center-crop images for inference, or augment them for training."""
    if not network.is_image:
        return x
    crop = network.extractor.input_shape[-1]
    if train and cfg.augment:
        return np.stack([augment(img, rng, crop=crop) for img in x])
    return center_crop(np.asarray(x, dtype=np.float64), crop)


def _check_loss(value, stage, epoch):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss in stage {stage}, epoch {epoch}")


def _schedule(cfg, n_steps):
    return LrSchedule(cfg.lr, cfg.lr_final, max(1, n_steps - 1))


def train_stage1(network: CAADNetwork, x, y, cfg: TrainConfig, log: Callable | None = None):
    """Fit extractor and anomaly head with SGD on the mean deviation loss."""
    sampler = BalancedBatchSampler(y, cfg.batch_size, stage_rng(cfg.seed, 1, BATCH))
    ref_rng = stage_rng(cfg.seed, 1, REFERENCE)
    aug_rng = stage_rng(cfg.seed, 1, AUGMENT)
    ext, head = network.extractor, network.anomaly_head
    params = ext.params + head.params
    n_steps = cfg.stage1_epochs * sampler.batches_per_epoch
    sched = _schedule(cfg, n_steps)
    opt = OptimizerState.for_params("sgd", params, cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.stage1_epochs):
        total = 0.0
        for idx in sampler.epoch():
            xb = prepare_inputs(network, x[idx], cfg, aug_rng, train=True)
            ref = sample_reference(cfg.n_reference, cfg.ref_mean, cfg.ref_std, ref_rng)
            feats, fcache = ext.extract(xb)
            out, hcache = head.forward(feats)
            loss, dnu = deviation_loss(out[:, 0], y[idx], ref, cfg.margin)
            mean_loss = float(loss.mean())
            _check_loss(mean_loss, 1, epoch)
            hgrads, dfeat = head.backward(hcache, (dnu / len(idx))[:, None])
            grads = ext.backward(fcache, dfeat) + hgrads
            lr = sched(step)
            apply_update(params, grads, opt, lr)
            step += 1
            total += mean_loss
        rec = {"stage": 1, "epoch": epoch, "loss_ano": total / sampler.batches_per_epoch, "lr": lr}
        history.append(rec)
        if log:
            log(rec)
    return history


def confidence_targets(nu, y, cfg: TrainConfig):
    prob = prediction_probability(nu, cfg.ref_mean, cfg.ref_std, cfg.squared_sigma)
    return anomaly_probability(prob, y)


def train_stage2(network: CAADNetwork, x, y, cfg: TrainConfig, log: Callable | None = None):
    """Fit the confidence head with Adam; extractor and anomaly head stay frozen."""
    sampler = BalancedBatchSampler(y, cfg.batch_size, stage_rng(cfg.seed, 2, BATCH))
    aug_rng = stage_rng(cfg.seed, 2, AUGMENT)
    ext, ano, conf = network.extractor, network.anomaly_head, network.confidence_head
    params = conf.params
    n_steps = cfg.stage2_epochs * sampler.batches_per_epoch
    sched = _schedule(cfg, n_steps)
    opt = OptimizerState.for_params("adam", params, cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.stage2_epochs):
        total = 0.0
        for idx in sampler.epoch():
            xb = prepare_inputs(network, x[idx], cfg, aug_rng, train=True)
            feats, _ = ext.extract(xb)
            g = confidence_targets(ano(feats)[:, 0], y[idx], cfg)
            out, ccache = conf.forward(feats)
            loss, diota = confidence_loss(out[:, 0], g)
            mean_loss = float(loss.mean())
            _check_loss(mean_loss, 2, epoch)
            grads, _ = conf.backward(ccache, (diota / len(idx))[:, None])
            lr = sched(step)
            apply_update(params, grads, opt, lr)
            step += 1
            total += mean_loss
        rec = {"stage": 2, "epoch": epoch, "loss_conf": total / sampler.batches_per_epoch, "lr": lr}
        history.append(rec)
        if log:
            log(rec)
    return history


def joint_loss_and_grads(network: CAADNetwork, xb, yb, ref, cfg: TrainConfig):
    """Weighted joint loss on one batch and gradients for every parameter.

    The confidence target is computed from the current scores and treated
    as a constant. Gradients are ordered extractor, anomaly head, confidence head.
    """
    ext, ano, conf = network.extractor, network.anomaly_head, network.confidence_head
    m = len(yb)
    feats, fcache = ext.extract(xb)
    nu_out, acache = ano.forward(feats)
    iota_out, ccache = conf.forward(feats)
    nu, iota = nu_out[:, 0], iota_out[:, 0]
    l_ano, dnu = deviation_loss(nu, yb, ref, cfg.margin)
    g = confidence_targets(nu, yb, cfg)
    l_conf, diota = confidence_loss(iota, g)
    loss_ano, loss_conf = float(l_ano.mean()), float(l_conf.mean())
    agrads, dfeat_a = ano.backward(acache, (cfg.ano_weight * dnu / m)[:, None])
    cgrads, dfeat_c = conf.backward(ccache, (cfg.conf_weight * diota / m)[:, None])
    egrads = ext.backward(fcache, dfeat_a + dfeat_c)
    total = cfg.ano_weight * loss_ano + cfg.conf_weight * loss_conf
    return total, loss_ano, loss_conf, egrads + agrads + cgrads


def train_stage3(network: CAADNetwork, x, y, cfg: TrainConfig, log: Callable | None = None):
    """Joint fine-tuning of all parameters with Adam at a constant small learning rate."""
    sampler = BalancedBatchSampler(y, cfg.batch_size, stage_rng(cfg.seed, 3, BATCH))
    ref_rng = stage_rng(cfg.seed, 3, REFERENCE)
    aug_rng = stage_rng(cfg.seed, 3, AUGMENT)
    params = network.extractor.params + network.anomaly_head.params + network.confidence_head.params
    opt = OptimizerState.for_params("adam", params, cfg.stage3_lr or 1.0)
    history = []
    for epoch in range(cfg.stage3_epochs):
        tot = ta = tc = 0.0
        for idx in sampler.epoch():
            xb = prepare_inputs(network, x[idx], cfg, aug_rng, train=True)
            ref = sample_reference(cfg.n_reference, cfg.ref_mean, cfg.ref_std, ref_rng)
            total, la, lc, grads = joint_loss_and_grads(network, xb, y[idx], ref, cfg)
            _check_loss(total, 3, epoch)
            if cfg.stage3_lr > 0:
                apply_update(params, grads, opt, cfg.stage3_lr)
            tot, ta, tc = tot + total, ta + la, tc + lc
        n = sampler.batches_per_epoch
        rec = {"stage": 3, "epoch": epoch, "loss": tot / n, "loss_ano": ta / n,
               "loss_conf": tc / n, "lr": cfg.stage3_lr}
        history.append(rec)
        if log:
            log(rec)
    return history


STAGES = {1: train_stage1, 2: train_stage2, 3: train_stage3}


def train(network, x, y, cfg: TrainConfig, stages=(1, 2, 3), log=None, on_stage_end=None):
    """Run the requested stages in order; returns the concatenated epoch history."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    history = []
    for s in stages:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s}")
        logger.info("training stage %d", s)
        history += STAGES[s](network, x, y, cfg, log)
        if on_stage_end:
            on_stage_end(s, network, history)
    return history


class Decision(str, Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"


@dataclass(frozen=True)
class Diagnosis:
    decision: Decision
    score: float
    confidence: float
    thresholds: DecisionThresholds
    reason: str  # score_exceeded | low_confidence | clear_negative

    @property
    def positive(self):
        return self.decision is Decision.POSITIVE


def diagnose(nu, iota, thresholds: DecisionThresholds) -> Diagnosis:
    """Positive when the score reaches ``t_ano`` or the confidence drops below ``t_conf``."""
    if nu >= thresholds.t_ano:
        return Diagnosis(Decision.POSITIVE, float(nu), float(iota), thresholds, "score_exceeded")
    if iota < thresholds.t_conf:
        return Diagnosis(Decision.POSITIVE, float(nu), float(iota), thresholds, "low_confidence")
    return Diagnosis(Decision.NEGATIVE, float(nu), float(iota), thresholds, "clear_negative")


def diagnose_batch(nu, iota, thresholds: DecisionThresholds):
    """Vectorised :func:`diagnose`; returns 0/1 decisions."""
    nu = np.asarray(nu)
    iota = np.asarray(iota)
    return ((nu >= thresholds.t_ano) | (iota < thresholds.t_conf)).astype(np.int64)
