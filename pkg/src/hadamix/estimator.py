"""scikit-learn style front end.

:class:`HadamardMixer` is a stateless-ish transformer wrapping the mixing
layer, so it can sit in a ``Pipeline``. :class:`HadamardLM` wraps model
construction and training behind ``fit`` / ``predict`` / ``score``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attention import AttentionVariant, hadamard_mix_forward
from .model import ModelConfig, cross_entropy_loss
from .numerics import DTYPE
from .train import TrainConfig, load_corpus, train_loop
from .wht import HadamardSpec, fwht_batch


def check_tokens(X, vocab_size, ensure_2d=True):
    """Validate an integer token matrix (or vector) against ``vocab_size``."""
    X = check_array(X, dtype=np.int64, ensure_2d=ensure_2d)
    if X.size and (X.min() < 0 or X.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return X


class HadamardMixer(TransformerMixin, BaseEstimator):
    """Row-wise ``alpha * (X @ H) + beta`` with a normalized Hadamard ``H``.

    ``alpha`` / ``beta`` default to ones / zeros, i.e. a pure orthogonal mix.
    ``fit`` only records the width and resolves the Hadamard construction.
    """

    def __init__(self, alpha=None, beta=None):
        self.alpha = alpha
        self.beta = beta

    def fit(self, X, y=None):
        X = check_array(X, dtype=[np.float32, np.float64])
        d = X.shape[1]
        self.spec_ = HadamardSpec.for_order(d)
        self.alpha_ = np.ones(d, X.dtype) if self.alpha is None else np.asarray(self.alpha, X.dtype)
        self.beta_ = np.zeros(d, X.dtype) if self.beta is None else np.asarray(self.beta, X.dtype)
        if self.alpha_.shape != (d,) or self.beta_.shape != (d,):
            raise ValueError(f"alpha and beta must have shape ({d},)")
        self.n_features_in_ = d
        return self

    def _validated(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=[np.float32, np.float64])
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, mixer was fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._validated(X)
        return hadamard_mix_forward(X, self.alpha_.astype(X.dtype), self.beta_.astype(X.dtype), self.spec_)[0]

    def inverse_transform(self, X):
        X = self._validated(X)
        if np.any(self.alpha_ == 0):
            raise ValueError("mix is not invertible with a zero entry in alpha")
        return fwht_batch((X - self.beta_) / self.alpha_, self.spec_, adjoint=False)


class HadamardLM(BaseEstimator):
    """Byte-level decoder-only language model.

    ``fit`` takes a corpus (bytes, str path, or uint8 array). ``predict`` /
    ``predict_proba`` take a ``(n, T)`` token matrix and score the token after
    each row; ``score`` is the mean log-likelihood of ``y`` given ``X``.
    """

    def __init__(self, n_layers=2, d_model=64, n_heads=4, variant="hadamard", context_length=64,
                 norm_kind="layernorm", total_steps=200, peak_lr=3e-3, batch_tokens=1024,
                 eval_interval=100, seed=0):
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.variant = variant
        self.context_length = context_length
        self.norm_kind = norm_kind
        self.total_steps = total_steps
        self.peak_lr = peak_lr
        self.batch_tokens = batch_tokens
        self.eval_interval = eval_interval
        self.seed = seed

    def _configs(self):
        model_cfg = ModelConfig(n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
                                variant=AttentionVariant.parse(self.variant), context_length=self.context_length,
                                norm_kind=self.norm_kind)
        train_cfg = TrainConfig(total_steps=self.total_steps, peak_lr=self.peak_lr, batch_tokens=self.batch_tokens,
                                eval_interval=self.eval_interval, seed=self.seed)
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        model_cfg, train_cfg = self._configs()
        result = train_loop(model_cfg, train_cfg, load_corpus(X))
        self.model_ = result.model
        self.history_ = result.history
        self.initial_val_loss_ = result.state.initial_val_loss
        self.n_params_ = result.model.num_params()
        return self

    def _last_logits(self, X):
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.model_.cfg.vocab_size)
        return self.model_.forward(X)[:, -1].astype(np.float64)

    def predict_proba(self, X):
        z = self._last_logits(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self._last_logits(X), axis=1)

    def score(self, X, y):
        check_is_fitted(self, "model_")
        y = check_tokens(y, self.model_.cfg.vocab_size, ensure_2d=False)
        return -cross_entropy_loss(self._last_logits(X).astype(DTYPE), y)[0]

    def generate(self, prompt, n_new, temperature=None, seed=0):
        check_is_fitted(self, "model_")
        if isinstance(prompt, str):
            prompt = prompt.encode()
        if isinstance(prompt, (bytes, bytearray)):
            prompt = np.frombuffer(bytes(prompt), dtype=np.uint8)
        return self.model_.generate(np.asarray(prompt, dtype=np.int64), n_new, temperature=temperature, seed=seed)
