"""scikit-learn style wrappers: stain normalizer, color augmenter and the patch classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import data as D
from . import evaluation as E
from . import stain as S
from . import trainer as TR
from ._validation import check_image, check_images, check_labels, check_windows


class MacenkoNormalizer(TransformerMixin, BaseEstimator):
    """Re-renders images with a reference stain matrix.

    ``fit(None)`` keeps the built-in reference; ``fit(images)`` estimates it
    from the pooled pixels of the given images.
    """

    def __init__(self, od_threshold=0.15, angle_percentile=1.0, percentile=99.0):
        self.od_threshold = od_threshold
        self.angle_percentile = angle_percentile
        self.percentile = percentile

    def fit(self, X=None, y=None):
        if X is None:
            self.reference_ = S.StainModel()
        else:
            pixels = np.concatenate([im.reshape(-1, 1, 3) for im in check_images(X)])
            self.reference_ = S.fit_reference(pixels, self.percentile, self.od_threshold,
                                              self.angle_percentile)
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        return [S.normalize_image(im, self.reference_, self.percentile, self.od_threshold,
                                  self.angle_percentile) for im in check_images(X)]

    def stain_matrices(self, X) -> list[np.ndarray]:
        return [S.estimate_stain_matrix(im, self.od_threshold, self.angle_percentile).A
                for im in check_images(X)]


class ColorAugmenter(TransformerMixin, BaseEstimator):
    """Per-image random per-channel ``a*I + b`` with rounding and clamping."""

    def __init__(self, scale_range=(0.9, 1.1), shift_range=(-10.0, 10.0), random_state=None):
        self.scale_range = scale_range
        self.shift_range = shift_range
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.config_ = S.ColorAugmentConfig(*self.scale_range, *self.shift_range)
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return [S.color_augment(im, self.config_, self.rng_) for im in check_images(X)]


def _to_context(windows: np.ndarray) -> np.ndarray:
    s = windows.shape[1]
    if s > D.CONTEXT:
        k = (s - D.CONTEXT) // 2
        return windows[:, k:k + D.CONTEXT, k:k + D.CONTEXT]
    if s < D.CONTEXT:
        k = (D.CONTEXT - s) // 2
        return np.pad(windows, ((0, 0), (k, k), (k, k), (0, 0)), mode="reflect")
    return windows


class MitosisCNN(ClassifierMixin, BaseEstimator):
    """Patch classifier trained with optional color augmentation and domain-adversarial updates.

    ``X`` holds square windows centered on candidate locations, ``[N, S, S, 3]``
    with odd ``S >= 63``; windows smaller than the rotation context are
    reflect-padded.
    """

    def __init__(self, iterations=1500, batch_size=32, domain_batch_size=None, learning_rate=0.01,
                 color_augmentation=False, domain_adversarial=False, alpha_max=1.0,
                 cycle_length=500, warmup_fraction=0.25, lr_domain=0.0025, random_state=0):
        self.iterations = iterations
        self.batch_size = batch_size
        self.domain_batch_size = domain_batch_size
        self.learning_rate = learning_rate
        self.color_augmentation = color_augmentation
        self.domain_adversarial = domain_adversarial
        self.alpha_max = alpha_max
        self.cycle_length = cycle_length
        self.warmup_fraction = warmup_fraction
        self.lr_domain = lr_domain
        self.random_state = random_state

    def _config(self) -> TR.TrainingConfig:
        return TR.TrainingConfig(
            batch_size=self.batch_size, domain_batch_size=self.domain_batch_size,
            base_lr=self.learning_rate, total_iterations=self.iterations,
            color_augmentation=self.color_augmentation, domain_adversarial=self.domain_adversarial,
            alpha_max=self.alpha_max, cycle_length=self.cycle_length,
            warmup_fraction=self.warmup_fraction, lr_domain=self.lr_domain,
            seed=int(self.random_state or 0))

    def fit(self, X, y, domains=None):
        X = check_windows(X, D.PATCH)
        y = check_labels(y, len(X))
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0 (background) or 1 (mitosis)")
        if domains is None:
            if self.domain_adversarial:
                raise ValueError("domain-adversarial training needs per-sample domains")
            domains = np.zeros(len(X), dtype=np.int64)
        domains = check_labels(domains, len(X), "domains")
        ids, dense = np.unique(domains, return_inverse=True)
        cfg = self._config()
        cfg.check_domains(len(ids))
        pool = TR.PatchPool(np.ascontiguousarray(_to_context(X)).astype(np.uint8), y, dense,
                            np.where(y == 1, TR.POSITIVE, TR.RANDOM_NEGATIVE),
                            np.zeros((len(X), 4), dtype=np.int64), list(ids))
        res = TR.run_training(cfg, pool)
        self.model_, self.branch_, self.log_ = res.model, res.branch, res.log
        self.classes_ = np.array([0, 1])
        return self

    def _inputs(self, X):
        X = check_windows(X, D.PATCH)
        k = (X.shape[1] - D.PATCH) // 2
        return D.to_network_input(X[:, k:k + D.PATCH, k:k + D.PATCH])

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        x = self._inputs(X)
        return np.concatenate([self.model_.forward(x[i:i + 256], "infer").class_probabilities
                               for i in range(0, len(x), 256)])

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def probability_map(self, image) -> E.ProbabilityMap:
        check_is_fitted(self, "model_")
        return E.dense_inference(self.model_, check_image(image, D.PATCH))

    def detect(self, image, threshold: float = 0.5) -> list[E.Detection]:
        return E.local_maxima(self.probability_map(image), threshold)
