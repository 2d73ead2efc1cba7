"""Decoupling a new clothing layer from the layers beneath it.

Layer ``N`` (the clothing being trained) is compared sample-by-sample with a
combined underlayer track built from layers ``1..N-1``: at each sample the
underlayer with the largest compositing weight supplies the combined density
density and colour.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_unit_interval
from .errors import ConfigError
from .render import (DEFAULT_SAMPLES, LayerRender, LayerSamples, RaySamples,
                     composite_weights, composite_weights_backward)

AND = "and"
OR = "or"
DEFAULT_THRESHOLD = 0.01
CLOTHING_WEIGHTS = (1.0, 1.0, 0.05, 2.0)
ALTERNATION = (1, 6)
PROXY_MARGIN = 0.05


def _combine(a, b, combinator):
    if combinator == AND:
        return a & b
    if combinator == OR:
        return a | b
    raise ConfigError(f"unknown set combinator {combinator!r}")


@dataclass
class CombinedDensity:
    """Per-sample combined underlayer track.

    ``source`` is the 0-based position of the winning layer in the
    underlayer list (layer number ``source + 1``).
    """

    sigma: np.ndarray
    source: np.ndarray
    rgb: np.ndarray
    weights: np.ndarray
    trans: np.ndarray
    delta: np.ndarray

    @property
    def source_layer(self):
        return self.source + 1


def combined_density(underlayers):
    """Combine evaluated underlayers (:class:`LayerSamples`) into one track."""
    if len(underlayers) < 1:
        raise ConfigError("need at least one underlayer")
    w = np.stack([lay.weights for lay in underlayers])
    source = np.argmax(w, axis=0)
    sel = source[None]
    sigma = np.take_along_axis(np.stack([lay.sigma for lay in underlayers]), sel, axis=0)[0]
    rgb = np.take_along_axis(np.stack([lay.rgb for lay in underlayers]), sel[..., None], axis=0)[0]
    delta = underlayers[0].samples.delta
    weights, trans = composite_weights(sigma, delta)
    return CombinedDensity(sigma, source, rgb, weights, trans, delta)


def overlap_mask(cloth, combined, weight_threshold=DEFAULT_THRESHOLD, combinator=AND):
    """Samples penalised by the overlap regulariser.

    A sample belongs to the set when the clothing weight exceeds ``weight_threshold``
    and (``combinator="and"``) or (``"or"``) the clothing density is below the
    combined underlayer density.
    """
    check_unit_interval(weight_threshold, "weight_threshold")
    return _combine(cloth.weights > weight_threshold, cloth.sigma < combined.sigma, combinator)


def overlap_reg_loss(cloth, combined, weight_threshold=DEFAULT_THRESHOLD, combinator=AND):
    """Per-ray L2 norm of clothing weights on the overlap set, averaged over rays.

    Returns ``(value, d_cloth_weights)``.
    """
    mask = overlap_mask(cloth, combined, weight_threshold, combinator)
    w = np.where(mask, cloth.weights, 0.0)
    norms = np.sqrt(np.sum(w * w, axis=1))
    r = w.shape[0]
    safe = np.where(norms > 0, norms, 1.0)
    d_w = np.where(norms[:, None] > 0, w / safe[:, None], 0.0) / r
    return float(np.sum(norms) / r), d_w


def overlap_mass(cloth, combined, weight_threshold=DEFAULT_THRESHOLD, combinator=AND):
    """Mean over rays of the summed clothing weight on the overlap set."""
    mask = overlap_mask(cloth, combined, weight_threshold, combinator)
    return float(np.sum(np.where(mask, cloth.weights, 0.0)) / cloth.weights.shape[0])


def composite_partition(cloth, combined, weight_threshold=DEFAULT_THRESHOLD, combinator=AND):
    """Boolean mask of samples attributed to the clothing layer.

    Clothing takes a sample when its density exceeds the combined underlayer
    density and (or, with ``combinator="or"``) the underlayer weight there is
    below ``weight_threshold``.  Every other sample belongs to the underlayers.
    """
    check_unit_interval(weight_threshold, "weight_threshold")
    return _combine(combined.weights < weight_threshold, cloth.sigma > combined.sigma, combinator)


class CompositeRender:
    """Composite of the clothing layer over the combined underlayer track."""

    def __init__(self, underlayers, cloth, weight_threshold=DEFAULT_THRESHOLD, combinator=AND, combined=None):
        self.underlayers = underlayers
        self.cloth = cloth
        self.combined = combined_density(underlayers) if combined is None else combined
        self.in_cloth = composite_partition(cloth, self.combined, weight_threshold, combinator)
        self.sigma = np.where(self.in_cloth, cloth.sigma, self.combined.sigma)
        self.colors = np.where(self.in_cloth[..., None], cloth.rgb, self.combined.rgb)
        self.weights, self._trans = composite_weights(self.sigma, self.combined.delta)
        self.color = np.sum(self.weights[..., None] * self.colors, axis=1)
        self.opacity = np.sum(self.weights, axis=1)

    def cotangents(self, d_color=None, d_opacity=None):
        """Cotangents ``(d_sigma, d_rgb)`` for each underlayer and the clothing."""
        d_w = np.zeros_like(self.weights)
        d_c = np.zeros_like(self.colors)
        if d_color is not None:
            d_w += np.einsum("rc,rsc->rs", d_color, self.colors)
            d_c = self.weights[..., None] * d_color[:, None, :]
        if d_opacity is not None:
            d_w += d_opacity[:, None]
        d_sigma = composite_weights_backward(self.sigma, self.combined.delta, self.weights,
                                             self._trans, d_w)
        inc = self.in_cloth
        cloth_cot = (np.where(inc, d_sigma, 0.0), np.where(inc[..., None], d_c, 0.0))
        under_cots = []
        for j in range(len(self.underlayers)):
            m = (~inc) & (self.combined.source == j)
            under_cots.append((np.where(m, d_sigma, 0.0), np.where(m[..., None], d_c, 0.0)))
        return under_cots, cloth_cot

    def backward(self, d_color=None, d_opacity=None):
        """Parameter gradients ``(underlayer_grads, cloth_grad)``."""
        under_cots, (ds, dr) = self.cotangents(d_color, d_opacity)
        under = [lay.backward(s, r) for lay, (s, r) in zip(self.underlayers, under_cots)]
        return under, self.cloth.backward(ds, dr)


def composite_render(underlayers, cloth, rays, n_samples=DEFAULT_SAMPLES, *, weight_threshold=DEFAULT_THRESHOLD,
                     combinator=AND, stratified=False, rng=None, samples=None):
    """Composite the clothing field over underlayer fields along ``rays``."""
    if samples is None:
        samples = RaySamples.from_rays(rays, n_samples, stratified, rng)
    under = [LayerSamples(f, samples) for f in underlayers]
    return CompositeRender(under, LayerSamples(cloth, samples), weight_threshold, combinator)


# --------------------------------------------------------------------------
# density sparsity outside the proxy


def sparsity_region(proxy_bounds=None, scene_bound=1.0, margin=PROXY_MARGIN):
    """Axis-aligned box outside of which density is penalised.

    The proxy box is dilated by ``margin`` times its diagonal; without a
    proxy the scene box shrunk by 10% is used.
    """
    if proxy_bounds is None:
        half = 0.9 * scene_bound
        return np.full(3, -half), np.full(3, half)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in proxy_bounds)
    pad = margin * np.linalg.norm(hi - lo)
    return lo - pad, hi + pad


def sample_outside(region, scene_bound, n_points, rng):
    x = rng.uniform(-scene_bound, scene_bound, size=(n_points, 3))
    lo, hi = region
    inside = np.all((x >= lo) & (x <= hi), axis=1)
    return x[~inside]


def density_sparsity_loss(fields, proxy_bounds=None, *, scene_bound=1.0, n_points=4096, rng=None,
                          points=None):
    """Mean density over uniform points outside the dilated proxy box (L1 sparsity).

    Returns ``(value, grads)`` with one gradient array per field.
    """
    if not isinstance(fields, (list, tuple)):
        fields = [fields]
    if points is None:
        rng = np.random.default_rng() if rng is None else rng
        points = sample_outside(sparsity_region(proxy_bounds, scene_bound), scene_bound, n_points, rng)
    value, grads = 0.0, []
    m = len(points)
    for f in fields:
        if m == 0:
            grads.append(np.zeros(f.n_params))
            continue
        out, cache = f.forward(points)
        value += float(np.mean(out.sigma))
        grads.append(f.backward(cache, d_sigma=np.full(m, 1.0 / m)))
    return value, grads


def clothing_stage_loss(sds_cloth, sds_comp, reg_ds, density_reg, weights=CLOTHING_WEIGHTS):
    """Weighted clothing-stage objective."""
    lc, lp, lo, lr = weights
    return lc * sds_cloth + lp * sds_comp + lo * reg_ds + lr * density_reg


def alternation_kind(iteration, ratio=ALTERNATION):
    """``"cloth"`` or ``"composite"`` for a 0-based iteration of the cycle."""
    n_cloth, n_comp = ratio
    if n_cloth < 1 or n_comp < 1:
        raise ConfigError("alternation ratio entries must be positive integers")
    return "cloth" if iteration % (n_cloth + n_comp) < n_cloth else "composite"


class ClothingStep:
    """All clothing-stage terms evaluated on one shared set of samples.

    ``gradient`` folds the cotangents of the clothing-only image, the
    composite image and the overlap regulariser into a single backward pass
    through the clothing field.
    """

    def __init__(self, underlayers, cloth, samples, weight_threshold=DEFAULT_THRESHOLD, combinator=AND):
        self.under = [LayerSamples(f, samples) for f in underlayers]
        self.cloth = LayerSamples(cloth, samples)
        self.combined = combined_density(self.under)
        self.cloth_render = LayerRender(self.cloth)
        self.composite = CompositeRender(self.under, self.cloth, weight_threshold, combinator, self.combined)
        self.weight_threshold = weight_threshold
        self.combinator = combinator

    def overlap_reg(self):
        return overlap_reg_loss(self.cloth, self.combined, self.weight_threshold, self.combinator)

    def overlap_mass(self):
        return overlap_mass(self.cloth, self.combined, self.weight_threshold, self.combinator)

    def gradient(self, d_cloth_color=None, d_comp_color=None, d_cloth_weights=None):
        d_w = np.zeros_like(self.cloth.weights)
        d_rgb = np.zeros_like(self.cloth.rgb)
        if d_cloth_color is not None:
            d_w += np.einsum("rc,rsc->rs", d_cloth_color, self.cloth.rgb)
            d_rgb += self.cloth.weights[..., None] * d_cloth_color[:, None, :]
        if d_cloth_weights is not None:
            d_w += d_cloth_weights
        d_sigma = self.cloth.sigma_cotangent(d_w)
        if d_comp_color is not None:
            _, (ds, dr) = self.composite.cotangents(d_comp_color)
            d_sigma = d_sigma + ds
            d_rgb = d_rgb + dr
        return self.cloth.backward(d_sigma, d_rgb)
