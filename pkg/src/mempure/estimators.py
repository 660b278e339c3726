"""Estimator-style wrappers: a fit/transform purifier and a fit/predict matcher."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import recognition, training
from .validation import check_image_batch, check_labels, to_nchw, to_nhwc


class MemoryPurifier(BaseEstimator, TransformerMixin):
    """Adversarial-noise remover with the sklearn transformer contract.

    `fit` trains the two-scale memory autoencoder on clean images (labels are
    ignored); `transform` reconstructs a batch from memory, stripping
    perturbations the memories never stored. Images are numpy arrays shaped
    [n, H, W] or [n, H, W, C] with values in [0, 1].
    """

    def __init__(self, image_size=64, n_items=1000, top_channels=64,
                 bottom_channels=None, reduce_top=4, reduce_bottom=8,
                 gamma=None, scorer_hidden=None, metric="learned", epochs=100,
                 batch_size=32, lr_init=1e-3, lr_final=1e-4, warmup_epochs=10,
                 weight_decay=0.05, entropy_alpha=2e-4, sigma=1e-4,
                 use_adversarial=True, perceptual_weights=None, seed=0):
        self.image_size = image_size
        self.n_items = n_items
        self.top_channels = top_channels
        self.bottom_channels = bottom_channels
        self.reduce_top = reduce_top
        self.reduce_bottom = reduce_bottom
        self.gamma = gamma
        self.scorer_hidden = scorer_hidden
        self.metric = metric
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.entropy_alpha = entropy_alpha
        self.sigma = sigma
        self.use_adversarial = use_adversarial
        self.perceptual_weights = perceptual_weights
        self.seed = seed

    def _train_config(self):
        return training.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_init=self.lr_init,
            lr_final=self.lr_final, warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, entropy_alpha=self.entropy_alpha,
            sigma=self.sigma, use_adversarial=self.use_adversarial,
            perceptual_weights=self.perceptual_weights, seed=self.seed,
            model_params=dict(
                image_size=self.image_size, n_items=self.n_items,
                top_channels=self.top_channels, bottom_channels=self.bottom_channels,
                reduce_top=self.reduce_top, reduce_bottom=self.reduce_bottom,
                gamma=self.gamma, scorer_hidden=self.scorer_hidden,
                metric=self.metric))

    def fit(self, X, y=None):
        X = check_image_batch(X, image_size=self.image_size)
        self.model_, self.discriminator_, self.history_, _ = training.train_purifier(
            X, self._train_config())
        return self

    def transform(self, X, batch_size=64):
        check_is_fitted(self, "model_")
        X = check_image_batch(X, image_size=self.image_size)
        x = to_nchw(X)
        self.model_.eval()
        with torch.no_grad():
            parts = [self.model_.purify(x[i:i + batch_size])
                     for i in range(0, len(x), batch_size)]
        return to_nhwc(torch.cat(parts, dim=0))

    def save(self, path):
        check_is_fitted(self, "model_")
        return training.save_checkpoint(
            path, self.model_, self.discriminator_, config=self._train_config(),
            extra={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path):
        model, disc, payload = training.load_checkpoint(path)
        params = payload.get("extra", {}).get("estimator_params") or {}
        estimator = cls(**params)
        estimator.model_ = model
        estimator.discriminator_ = disc
        estimator.history_ = []
        return estimator


class VeinMatcher(BaseEstimator, ClassifierMixin):
    """Identification classifier: embedding CNN plus per-class mean templates.

    `fit` trains the network with cross-entropy and enrolls one template per
    class from the training gallery; `predict` assigns each probe to the
    template with the highest cosine similarity.
    """

    def __init__(self, epochs=30, batch_size=32, lr=1e-3, embedding_dim=128, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.embedding_dim = embedding_dim
        self.seed = seed

    def fit(self, X, y):
        X = check_image_batch(X)
        y = check_labels(y, n=len(X))
        self.model_ = recognition.train_classifier(
            X, y, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, seed=self.seed, embedding_dim=self.embedding_dim)
        self.templates_ = recognition.enroll(self.model_, X, y)
        self.classes_ = np.unique(y)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return recognition.predict_identity(self.model_, self.templates_, X)

    def logit_fn(self):
        """Class-logit callable on NCHW tensors, as the attacks expect."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        return self.model_
