"""scikit-learn compatible front ends: the confidence-aware detector and a binary baseline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from ._validation import check_binary_labels, check_feature_shape, check_inputs, parse_stages
from .confidence import DecisionThresholds
from .exceptions import CheckpointError, DivergenceError
from .neural import LrSchedule, OptimizerState, apply_update, sigmoid
from .pipeline import (
    AUGMENT,
    BATCH,
    BalancedBatchSampler,
    CAADNetwork,
    TrainConfig,
    diagnose,
    diagnose_batch,
    prepare_inputs,
    stage_rng,
    train,
)

_TRAIN_FIELDS = tuple(TrainConfig.field_names())


def _crop_shape(input_shape, crop_fraction):
    c, h, w = input_shape
    return (c, int(round(crop_fraction * h)), int(round(crop_fraction * w)))


class CAADetector(ClassifierMixin, BaseEstimator):
    """Confidence-aware anomaly detector.

    ``fit`` runs up to three training stages: the anomaly head (deviation
    loss, SGD), the confidence head (squared error to the anomaly
    probability, Adam, everything else frozen) and a joint fine-tune.
    ``decision_function`` returns the raw anomaly score, ``predict_confidence``
    the confidence, and ``predict`` the dual-threshold diagnosis (1 = anomaly).

    ``t_ano=None`` derives the score threshold from the reference prior as the
    point where the normalised density drops to one half.
    """

    def __init__(self, *, extractor="identity", feature_dim=32, cnn_channels=(8, 16), stages=3,
                 batch_size=40, stage1_epochs=20, stage2_epochs=20, stage3_epochs=10,
                 lr=5e-4, lr_final=1e-6, stage3_lr=1e-7, ano_weight=1.0, conf_weight=1.0,
                 margin=5.0, n_reference=5000, ref_mean=0.0, ref_std=1.0, squared_sigma=False,
                 augment=True, crop_fraction=0.875, t_ano=None, t_conf=0.9, warm_start=False,
                 random_state=0):
        self.extractor = extractor
        self.feature_dim = feature_dim
        self.cnn_channels = cnn_channels
        self.stages = stages
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage3_epochs = stage3_epochs
        self.lr = lr
        self.lr_final = lr_final
        self.stage3_lr = stage3_lr
        self.ano_weight = ano_weight
        self.conf_weight = conf_weight
        self.margin = margin
        self.n_reference = n_reference
        self.ref_mean = ref_mean
        self.ref_std = ref_std
        self.squared_sigma = squared_sigma
        self.augment = augment
        self.crop_fraction = crop_fraction
        self.t_ano = t_ano
        self.t_conf = t_conf
        self.warm_start = warm_start
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        params = self.get_params()
        kw = {k: params[k] for k in _TRAIN_FIELDS if k in params}
        return TrainConfig(**kw, seed=int(self.random_state))

    def _build_network(self, input_shape):
        shape = input_shape if self.extractor == "identity" else _crop_shape(input_shape, self.crop_fraction)
        return CAADNetwork.build(self.extractor, shape, feature_dim=self.feature_dim,
                                 channels=tuple(self.cnn_channels), seed=int(self.random_state))

    def fit(self, X, y, *, log=None, on_stage_end=None):
        X = check_inputs(X, image=self.extractor == "tiny_cnn")
        y = check_binary_labels(y, len(X))
        cfg = self.train_config()
        if not (self.warm_start and hasattr(self, "network_")):
            self.network_ = self._build_network(X.shape[1:])
            self.history_ = []
            self.input_shape_ = tuple(X.shape[1:])
        else:
            check_feature_shape(X, self.input_shape_, "detector")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.history_ = self.history_ + train(self.network_, X, y, cfg, parse_stages(self.stages),
                                              log=log, on_stage_end=on_stage_end)
        self.stages_trained_ = tuple(sorted(set(getattr(self, "stages_trained_", ()))
                                            | set(parse_stages(self.stages))))
        return self

    @property
    def thresholds_(self) -> DecisionThresholds:
        if self.t_ano is not None:
            return DecisionThresholds(float(self.t_ano), float(self.t_conf))
        return DecisionThresholds.derive(self.ref_mean, self.ref_std, float(self.t_conf), self.squared_sigma)

    def _prepared(self, X):
        check_is_fitted(self, "network_")
        X = check_inputs(X, image=self.network_.is_image)
        check_feature_shape(X, self.input_shape_, "detector")
        return prepare_inputs(self.network_, X, self.train_config())

    def score_and_confidence(self, X, batch_size=512):
        return self.network_.score_and_confidence(self._prepared(X), batch_size)

    def decision_function(self, X):
        """Anomaly score; larger means more anomalous."""
        return self.score_and_confidence(X)[0]

    def predict_confidence(self, X):
        return self.score_and_confidence(X)[1]

    def predict(self, X, thresholds: DecisionThresholds | None = None):
        nu, iota = self.score_and_confidence(X)
        return diagnose_batch(nu, iota, thresholds or self.thresholds_)

    def diagnose(self, X, thresholds: DecisionThresholds | None = None):
        th = thresholds or self.thresholds_
        nu, iota = self.score_and_confidence(X)
        return [diagnose(a, b, th) for a, b in zip(nu, iota)]

    # -- persistence -------------------------------------------------------

    def to_bytes(self, metadata=None) -> bytes:
        check_is_fitted(self, "network_")
        net = self.network_
        meta = {"estimator": "CAADetector", "params": _jsonable(self.get_params()),
                "input_shape": list(self.input_shape_), "stages_trained": list(self.stages_trained_),
                "seed": int(self.random_state), "history": self.history_, **(metadata or {})}
        return ckpt.save_weights({"extractor": net.extractor, "anomaly_head": net.anomaly_head,
                                  "confidence_head": net.confidence_head}, metadata=meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> CAADetector:
        modules, _, meta = ckpt.load_weights(blob)
        if meta.get("estimator") != "CAADetector":
            raise CheckpointError("checkpoint does not hold a CAADetector")
        est = cls(**_unjson(meta["params"]))
        est.network_ = CAADNetwork(modules["extractor"], modules["anomaly_head"], modules["confidence_head"])
        est.input_shape_ = tuple(meta["input_shape"])
        est.stages_trained_ = tuple(meta["stages_trained"])
        est.history_ = list(meta.get("history", []))
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = int(np.prod(est.input_shape_))
        est.checkpoint_metadata_ = meta
        return est


def binary_cross_entropy(logits, y):
    """Per-sample cross-entropy of sigmoid(logits) and its derivative w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.logaddexp(0.0, logits) - y * logits
    return loss, sigmoid(logits) - y


class BinaryBaselineClassifier(ClassifierMixin, BaseEstimator):
    """Balanced-batch binary classifier sharing the detector's architecture.

    Same extractor and three-hidden-layer head as the detector's anomaly
    branch, a sigmoid output, cross-entropy loss and the detector's stage-1
    optimiser and learning-rate schedule.
    """

    def __init__(self, *, extractor="identity", feature_dim=32, cnn_channels=(8, 16), batch_size=40,
                 epochs=20, lr=5e-4, lr_final=1e-6, optimizer="sgd", augment=True,
                 crop_fraction=0.875, random_state=0):
        self.extractor = extractor
        self.feature_dim = feature_dim
        self.cnn_channels = cnn_channels
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.lr_final = lr_final
        self.optimizer = optimizer
        self.augment = augment
        self.crop_fraction = crop_fraction
        self.random_state = random_state

    def _cfg(self):
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, lr_final=self.lr_final,
                           augment=self.augment, crop_fraction=self.crop_fraction,
                           seed=int(self.random_state))

    def fit(self, X, y, *, log=None):
        X = check_inputs(X, image=self.extractor == "tiny_cnn")
        y = check_binary_labels(y, len(X))
        cfg = self._cfg()
        shape = X.shape[1:] if self.extractor == "identity" else _crop_shape(X.shape[1:], self.crop_fraction)
        net = CAADNetwork.build(self.extractor, shape, feature_dim=self.feature_dim,
                                channels=tuple(self.cnn_channels), seed=int(self.random_state))
        self.extractor_, self.head_ = net.extractor, net.anomaly_head
        self.input_shape_ = tuple(X.shape[1:])
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        sampler = BalancedBatchSampler(y, cfg.batch_size, stage_rng(cfg.seed, 1, BATCH))
        aug_rng = stage_rng(cfg.seed, 1, AUGMENT)
        params = self.extractor_.params + self.head_.params
        n_steps = self.epochs * sampler.batches_per_epoch
        sched = LrSchedule(cfg.lr, cfg.lr_final, max(1, n_steps - 1))
        opt = OptimizerState.for_params(self.optimizer, params, cfg.lr)
        self.history_ = []
        step = 0
        for epoch in range(self.epochs):
            total = 0.0
            for idx in sampler.epoch():
                xb = self._inputs(X[idx], cfg, aug_rng, train=True)
                loss, grads = self.loss_and_grads(xb, y[idx])
                apply_update(params, grads, opt, sched(step))
                step += 1
                total += loss
            rec = {"stage": "binary", "epoch": epoch, "loss_ce": total / sampler.batches_per_epoch}
            self.history_.append(rec)
            if log:
                log(rec)
        return self

    def _inputs(self, X, cfg, rng=None, train=False):
        if self.extractor_.kind != "tiny_cnn":
            return X
        view = CAADNetwork(self.extractor_, None, None)
        return prepare_inputs(view, X, cfg, rng, train)

    def loss_and_grads(self, xb, yb):
        """Mean cross-entropy on a preprocessed batch and gradients, extractor first."""
        feats, fcache = self.extractor_.extract(xb)
        out, hcache = self.head_.forward(feats)
        loss, dlogit = binary_cross_entropy(out[:, 0], yb)
        mean = float(loss.mean())
        if not np.isfinite(mean):
            raise DivergenceError("non-finite cross-entropy")
        hgrads, dfeat = self.head_.backward(hcache, (dlogit / len(yb))[:, None])
        return mean, self.extractor_.backward(fcache, dfeat) + hgrads

    def decision_function(self, X):
        """Logit of the anomaly class."""
        check_is_fitted(self, "head_")
        X = check_inputs(X, image=self.extractor_.kind == "tiny_cnn")
        check_feature_shape(X, self.input_shape_, "classifier")
        xb = self._inputs(X, self._cfg())
        out = []
        for s in range(0, len(xb), 512):
            feats, _ = self.extractor_.extract(xb[s:s + 512])
            out.append(self.head_(feats)[:, 0])
        return np.concatenate(out) if out else np.empty(0)

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


def _jsonable(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


def _unjson(params):
    out = dict(params)
    if "cnn_channels" in out:
        out["cnn_channels"] = tuple(out["cnn_channels"])
    if isinstance(out.get("stages"), list):
        out["stages"] = tuple(out["stages"])
    return out


__all__ = ["CAADetector", "BinaryBaselineClassifier", "binary_cross_entropy"]
