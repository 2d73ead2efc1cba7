"""Estimator-style wrappers around the three training stages.

``fit`` trains, fitted state lives in trailing-underscore attributes and
``get_params``/``set_params`` come from scikit-learn's ``BaseEstimator``.
"""

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .proxy import ProxyWarp
from .render import render_image
from .train import StageConfig, run_stage


class _StageEstimator(BaseEstimator):
    stage = None

    def _config(self):
        params = {k: v for k, v in self.get_params().items() if k not in ("backend", "preset")}
        make = StageConfig.desk if self.preset == "desk" else StageConfig.full
        return make(self.stage, **{k: v for k, v in params.items() if v is not None})

    def _fit(self, scene, inputs):
        result = run_stage(self._config(), scene, inputs, self.backend)
        self.result_ = result
        self.log_ = result.log
        self.checkpoints_ = result.checkpoints
        return result


class BodyGenerator(_StageEstimator):
    """Train the body layer of ``scene`` and render it from new cameras."""

    stage = "body"

    def __init__(self, iterations=None, lr=None, resolution=None, rays_per_view=None, n_samples=None,
                 seed=0, use_sh=False, backend=None, preset="desk"):
        self.iterations = iterations
        self.lr = lr
        self.resolution = resolution
        self.rays_per_view = rays_per_view
        self.n_samples = n_samples
        self.seed = seed
        self.use_sh = use_sh
        self.backend = backend
        self.preset = preset

    def fit(self, scene, y=None):
        result = self._fit(scene, {})
        self.field_ = result.trained["body"]
        self.sh_ = result.trained["sh"]
        return self

    def predict(self, cameras, n_samples=64):
        """Colour images, one per camera."""
        check_is_fitted(self, "field_")
        return [render_image(self.field_, cam, n_samples, sh=self.sh_)[0] for cam in cameras]


class ClothingDecoupler(_StageEstimator):
    """Train one clothing layer over frozen underlayers."""

    stage = "clothing"

    def __init__(self, iterations=None, lr=None, resolution=None, rays_per_view=None, n_samples=None,
                 seed=0, weight_threshold=None, combinator=None, backend=None, preset="desk"):
        self.iterations = iterations
        self.lr = lr
        self.resolution = resolution
        self.rays_per_view = rays_per_view
        self.n_samples = n_samples
        self.seed = seed
        self.weight_threshold = weight_threshold
        self.combinator = combinator
        self.backend = backend
        self.preset = preset

    def fit(self, scene, body=None):
        body = scene.body if body is None else body
        result = self._fit(scene, {"body": body})
        self.body_ = body
        self.field_ = result.trained["clothing"]
        self.overlap_mass_ = result.metrics["overlap_mass"]
        return self

    def predict(self, cameras, n_samples=64):
        """Fused body + clothing images, one per camera."""
        check_is_fitted(self, "field_")
        return [render_image([self.body_, self.field_], cam, n_samples)[0] for cam in cameras]


class ProxyMatcher(_StageEstimator):
    """Fit vertex offsets so the clothing covers a target body proxy.

    ``transform`` maps deformed-space points back to canonical clothing space.
    """

    stage = "matching"

    def __init__(self, iterations=None, lr=None, resolution=None, n_views=None, sharpness=None,
                 one_sided=True, seed=0, backend=None, preset="desk"):
        self.iterations = iterations
        self.lr = lr
        self.resolution = resolution
        self.n_views = n_views
        self.sharpness = sharpness
        self.one_sided = one_sided
        self.seed = seed
        self.backend = backend
        self.preset = preset

    def fit(self, scene, target_proxy=None, clothing=None):
        clothing = scene.clothing[-1] if clothing is None else clothing
        inputs = {"body": scene.body, "clothing": clothing, "target_proxy": target_proxy}
        result = self._fit(scene, inputs)
        self.offsets_ = result.trained["offset_values"]
        self.problem_ = result.trained["problem"]
        self.warp_ = ProxyWarp(self.problem_.canonical, self.offsets_)
        return self

    def transform(self, X):
        check_is_fitted(self, "warp_")
        return self.warp_.canonical(check_points(X, "X"))

    def predict(self, X):
        """Displacement ``x - canonical(x)`` at each query point."""
        X = check_points(X, "X")
        return X - self.transform(X)

    def score(self, X=None, y=None):
        """Relative drop of uncovered body mass (1 means fully covered)."""
        check_is_fitted(self, "offsets_")
        start, end = self.result_.metrics["uncovered_mass"]
        return float(1.0 - end / start) if start > 0 else 1.0
