"""Scikit-learn style estimator around the multimodal transformer."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from syngrid.dataset import Episode
from syngrid.model import ModelConfig, MultimodalTransformer
from syngrid.training import TrainConfig, exact_match, predict_actions, train
from syngrid.validation import check_episodes, check_targets


class SyntaxGuidedTransformer(BaseEstimator):
    """Grounded command-to-action model with syntax-masked text self-attention.

    ``X`` is a sequence of :class:`~syngrid.dataset.Episode` objects (or the
    JSON records read from a corpus file); ``y`` defaults to each episode's
    gold action sequence.

    Parameters
    ----------
    d_model, d_hidden, n_heads, n_encoder_layers, n_decoder_layers, dropout
        Architecture sizes (defaults follow the reference-scale setting).
    share_encoder_weights : bool
        Apply one encoder layer's parameters at every encoder step.
    use_text_mask : bool
        Restrict text self-attention to parse-tree neighbours.
    mask_source : {"dependency", "constituency"}
    lr, batch_size, epochs, eval_every, seed
        Optimisation settings.
    dtype : {"float32", "float64"}

    Attributes
    ----------
    model_ : MultimodalTransformer
    history_ : list of dict
    best_step_ : int
    """

    def __init__(
        self,
        d_model: int = 128,
        d_hidden: int = 256,
        n_heads: int = 8,
        n_encoder_layers: int = 6,
        n_decoder_layers: int = 6,
        dropout: float = 0.1,
        share_encoder_weights: bool = True,
        use_text_mask: bool = True,
        mask_source: str = "dependency",
        max_decode_len: int = 64,
        lr: float = 3e-4,
        batch_size: int = 32,
        epochs: int = 120,
        eval_every: int = 1,
        seed: int = 0,
        dtype: str = "float32",
    ):
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.n_heads = n_heads
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.dropout = dropout
        self.share_encoder_weights = share_encoder_weights
        self.use_text_mask = use_text_mask
        self.mask_source = mask_source
        self.max_decode_len = max_decode_len
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.eval_every = eval_every
        self.seed = seed
        self.dtype = dtype

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            d_hidden=self.d_hidden,
            n_heads=self.n_heads,
            n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers,
            dropout=self.dropout,
            share_encoder_weights=self.share_encoder_weights,
            use_text_mask=self.use_text_mask,
            mask_source=self.mask_source,
            max_decode_len=self.max_decode_len,
            dtype=self.dtype,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            eval_every=self.eval_every,
            float64=self.dtype == "float64",
        )

    def fit(self, X, y=None, X_val=None, history_path=None):
        """Train on episodes ``X``; ``X_val`` drives best-checkpoint selection."""
        episodes = check_episodes(X)
        if y is not None:
            targets = check_targets(y, len(episodes))
            episodes = [ep if tuple(t) == ep.actions else _with_actions(ep, t) for ep, t in zip(episodes, targets)]
        val = check_episodes(X_val) if X_val is not None else []
        result = train(episodes, val, self.model_config(), self.train_config(), history_path=history_path)
        self.model_ = result.model
        self.history_ = result.history
        self.best_step_ = result.best_step
        self.best_val_exact_match_ = result.best_val_exact_match
        return self

    @classmethod
    def from_model(cls, model: MultimodalTransformer, **params) -> "SyntaxGuidedTransformer":
        """Wrap an already trained (e.g. checkpoint-loaded) model."""
        cfg = model.config
        est = cls(
            d_model=cfg.d_model,
            d_hidden=cfg.d_hidden,
            n_heads=cfg.n_heads,
            n_encoder_layers=cfg.n_encoder_layers,
            n_decoder_layers=cfg.n_decoder_layers,
            dropout=cfg.dropout,
            share_encoder_weights=cfg.share_encoder_weights,
            use_text_mask=cfg.use_text_mask,
            mask_source=cfg.mask_source,
            max_decode_len=cfg.max_decode_len,
            dtype=cfg.dtype,
            **params,
        )
        est.model_ = model
        est.history_ = []
        est.best_step_ = 0
        est.best_val_exact_match_ = None
        return est

    def predict(self, X) -> list[list[str]]:
        check_is_fitted(self, "model_")
        return predict_actions(self.model_, check_episodes(X))

    def score(self, X, y=None) -> float:
        """Exact-match accuracy in [0, 1]."""
        episodes = check_episodes(X)
        gold = check_targets(y, len(episodes)) if y is not None else [ep.actions for ep in episodes]
        pred = self.predict(episodes)
        return float(np.mean([exact_match(p, g) for p, g in zip(pred, gold)])) if episodes else 0.0

    def transform(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Encoder outputs ``(text_enc, vis_enc)`` for a batch of episodes."""
        from syngrid import autodiff as ad
        from syngrid.model import make_batch

        check_is_fitted(self, "model_")
        batch = make_batch(check_episodes(X), self.model_.config, with_targets=False)
        with ad.no_grad():
            t = self.model_.embed_text(batch.text)
            v = self.model_.embed_world(batch.world)
            t_enc, v_enc = self.model_.encode(t, v, batch)
        return t_enc.data, v_enc.data

    def n_parameters(self, trainable_only: bool = True) -> int:
        from syngrid.autodiff import count_params

        model = getattr(self, "model_", None) or MultimodalTransformer(self.model_config(), self.seed)
        return count_params(model.params, trainable_only)


def _with_actions(ep: Episode, actions: Sequence[str]) -> Episode:
    from dataclasses import replace

    return replace(ep, actions=tuple(actions))


__all__ = ["SyntaxGuidedTransformer", "NotFittedError"]
