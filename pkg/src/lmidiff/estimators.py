"""scikit-learn style wrappers around the translation and segmentation pipeline.

Image collections are passed as (N, H, W) arrays, a single (H, W) image is
also accepted. ``fit`` sees only target-modality images; ``transform``
translates source-modality images into the target modality.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .lmi import LMIConfig
from .sde import NoiseSchedule, SamplerConfig, em_translate, sdedit_translate
from .score_model import ArchSpec, ScoreModel, TrainConfig, train
from .segmetrics import kmeans_assign, kmeans_fit
from .seeding import derive_seed
from .validation import check_image_stack


class LMIDiffusionTranslator(TransformerMixin, BaseEstimator):
    """Zero-shot translator: a score model trained on the target modality,
    sampled with LMI guidance from the source image.

    Parameters mirror the run configuration keys; ``random_state`` is the
    single run seed from which model init, training and sampling seeds are
    derived.
    """

    _guidance = "lmi"

    def __init__(self, levels=16, radius=3, search_radius=None, value_only=False,
                 sigma_min=0.01, sigma_max=1.0, width=16, depth=2, time_dim=32,
                 iterations=5000, batch_size=16, learning_rate=3e-4, weighting="sigma2",
                 steps=200, t_start=0.5, random_state=0):
        self.levels = levels
        self.radius = radius
        self.search_radius = search_radius
        self.value_only = value_only
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.width = width
        self.depth = depth
        self.time_dim = time_dim
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weighting = weighting
        self.steps = steps
        self.t_start = t_start
        self.random_state = random_state

    def _lmi_config(self):
        return LMIConfig(self.levels, self.radius, self.search_radius, self.value_only)

    def fit(self, X, y=None):
        X = check_image_stack(X)
        lmi_cfg = self._lmi_config()
        arch = ArchSpec(cond_channels=lmi_cfg.cond_channels, width=self.width,
                        depth=self.depth, time_dim=self.time_dim)
        schedule = NoiseSchedule(self.sigma_min, self.sigma_max)
        seed = self.random_state or 0
        self.model_ = ScoreModel(arch, schedule, seed=derive_seed(seed, "init"))
        self.train_config_ = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                                         lr=self.learning_rate, weighting=self.weighting,
                                         seed=derive_seed(seed, "train"))
        self.optimizer_state_, self.loss_curve_ = train(self.model_, X, self.train_config_, lmi_cfg)
        self.lmi_config_ = lmi_cfg
        return self

    @classmethod
    def from_model(cls, model, lmi_cfg, **params):
        """Wrap an already trained :class:`ScoreModel` (e.g. from a checkpoint)."""
        est = cls(levels=lmi_cfg.levels, radius=lmi_cfg.radius,
                  search_radius=lmi_cfg.search_radius, value_only=lmi_cfg.value_only,
                  sigma_min=model.schedule.sigma_min, sigma_max=model.schedule.sigma_max,
                  width=model.arch.width, depth=model.arch.depth, time_dim=model.arch.time_dim,
                  **params)
        est.model_ = model
        est.lmi_config_ = lmi_cfg
        return est

    def sampler_config(self):
        return SamplerConfig(steps=self.steps, seed=derive_seed(self.random_state or 0, "sample"),
                             lmi=self._lmi_config(), guidance=self._guidance, t_start=self.t_start)

    def transform(self, X):
        check_is_fitted(self, "model_")
        single = np.ndim(X) == 2
        X = check_image_stack(X)
        cfg = self.sampler_config()
        run = sdedit_translate if cfg.guidance == "perturb" else em_translate
        out = run(self.model_, X, cfg)
        return out[0] if single else out


class SDEditTranslator(LMIDiffusionTranslator):
    """Perturbation-guidance baseline sharing the same trained model type:
    the source is noised to ``t_start`` and denoised without conditioning."""

    _guidance = "perturb"


class KMeansSegmenter(ClusterMixin, BaseEstimator):
    """Intensity K-Means fitted on target-modality images; predicts label masks."""

    def __init__(self, n_clusters=5, max_iter=300, tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_image_stack(X)
        self.model_ = kmeans_fit(X, self.n_clusters, self.random_state or 0, self.max_iter, self.tol)
        self.cluster_centers_ = self.model_.centroids
        self.n_iter_ = self.model_.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        single = np.ndim(X) == 2
        X = check_image_stack(X, unit_range=False)
        masks = np.stack([kmeans_assign(self.model_, x) for x in X])
        return masks[0] if single else masks

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)
