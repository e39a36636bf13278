"""scikit-learn compatible wrapper around the cycle decoder."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .data import stratified_holdout
from .model import Decoder, DecoderConfig
from .train import Checkpoint, LossWeights, TrainConfig, fit


def _check_trials(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=(np.float64, np.float32), ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected trials shaped (n_trials, n_channels, n_times), got {X.shape}")
    return X


class CycleDecoderClassifier(ClassifierMixin, BaseEstimator):
    """Trial classifier: conv backbone, optional cycle encoder and reliability head.

    X has shape (n_trials, n_channels, n_times).  Without an explicit
    validation set, ``validation_fraction`` of the training trials is held out
    (stratified) for checkpoint selection.
    """

    def __init__(self, backbone="compact", use_mhsp=True, use_iue=True, windows=(16,),
                 stride=0, d=8, d_h=32, L_max=4, rms_eps=1e-5, tau_ens=4.0, tau_stop=0.85,
                 n_simulations=8, ucb_c=float(np.sqrt(2.0)), lambda_halt=0.05, lambda_iue=0.5,
                 lr=1e-3, beta1=0.9, beta2=0.999, epochs=100, batch_size=16,
                 validation_fraction=0.2, random_state=0):
        self.backbone = backbone
        self.use_mhsp = use_mhsp
        self.use_iue = use_iue
        self.windows = windows
        self.stride = stride
        self.d = d
        self.d_h = d_h
        self.L_max = L_max
        self.rms_eps = rms_eps
        self.tau_ens = tau_ens
        self.tau_stop = tau_stop
        self.n_simulations = n_simulations
        self.ucb_c = ucb_c
        self.lambda_halt = lambda_halt
        self.lambda_iue = lambda_iue
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @classmethod
    def from_run_config(cls, rc: RunConfig) -> "CycleDecoderClassifier":
        names = cls._get_param_names()
        kw = {k: getattr(rc, k) for k in names if hasattr(rc, k)}
        kw["validation_fraction"] = rc.val_fraction
        kw["random_state"] = rc.seed
        return cls(**kw)

    def _run_config(self) -> RunConfig:
        return RunConfig(backbone=self.backbone, use_mhsp=self.use_mhsp,
                         use_iue=self.use_iue and self.use_mhsp, windows=tuple(self.windows),
                         stride=self.stride, d=self.d, d_h=self.d_h, L_max=self.L_max,
                         rms_eps=self.rms_eps, tau_ens=self.tau_ens, tau_stop=self.tau_stop)

    def fit(self, X, y, X_val=None, y_val=None, on_epoch=None):
        X = _check_trials(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} trials but y has {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            keep, held = stratified_holdout(y_idx, self.validation_fraction, rng)
            X, X_val, y_idx, yv_idx = X[keep], X[held], y_idx[keep], y_idx[held]
        else:
            X_val = _check_trials(X_val)
            yv_idx = np.searchsorted(self.classes_, np.asarray(y_val))
        _, C, T = X.shape
        self.n_features_in_ = C * T
        cfg = DecoderConfig.from_run_config(self._run_config(), C, T, len(self.classes_))
        model = Decoder(cfg, seed=self.random_state)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           betas=(self.beta1, self.beta2), n_simulations=self.n_simulations,
                           ucb_c=self.ucb_c, seed=self.random_state)
        lw = LossWeights(self.lambda_halt, self.lambda_iue, iue_enabled=cfg.use_iue)
        self.checkpoint_ = fit(model, (X, y_idx), (X_val, yv_idx), lw=lw, cfg=tcfg,
                               on_epoch=on_epoch)
        self.model_ = self.checkpoint_.build()
        self.best_epoch_ = self.checkpoint_.epoch
        self.best_val_accuracy_ = self.checkpoint_.val_accuracy
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, classes=None) -> "CycleDecoderClassifier":
        c = ckpt.config
        est = cls(use_mhsp=c.use_mhsp, use_iue=c.use_iue, windows=c.windows, stride=c.stride,
                  d=c.d, d_h=c.d_h, L_max=c.L_max, rms_eps=c.rms_eps, tau_ens=c.tau_ens,
                  tau_stop=c.tau_stop)
        est.checkpoint_ = ckpt
        est.model_ = ckpt.build()
        est.classes_ = np.arange(c.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = c.n_channels * c.n_times
        est.best_epoch_ = ckpt.epoch
        est.best_val_accuracy_ = ckpt.val_accuracy
        return est

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = _check_trials(X)
        cfg = self.model_.cfg
        if X.shape[1:] != (cfg.n_channels, cfg.n_times):
            raise ValueError(f"trials shaped {X.shape[1:]} but the model was fitted on "
                             f"({cfg.n_channels}, {cfg.n_times})")
        return self.model_.predict_logits(X)

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)[0]

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def predict_cycles(self, X) -> np.ndarray:
        """Number of reasoning cycles each trial used before halting."""
        return self._logits(X)[1]
