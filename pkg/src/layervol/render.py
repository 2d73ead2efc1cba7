"""Cameras, ray sampling, emission-absorption compositing and layer fusion.

Array conventions: ``R`` rays, ``S`` samples per ray.  Sample-level arrays
are (R, S) or (R, S, 3).  Every render result carries a ``backward`` method
that maps cotangents of its outputs onto the parameters of the fields (and
SH lighting) that produced it.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fields import NORMAL_FLOOR

DEFAULT_SAMPLES = 64
PER_LAYER = "per_layer"
FUSED = "fused"


# --------------------------------------------------------------------------
# cameras and rays


@dataclass
class CameraPose:
    """Pinhole camera.  Camera frame: x right, y down, z forward.

    ``rotation`` maps camera-frame directions to world directions; its columns
    are the camera axes expressed in world coordinates.
    """

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(self.focal) or self.focal <= 0:
            raise ConfigError(f"focal length must be positive, got {self.focal}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ConfigError("image size must be positive")
        self.width, self.height = int(self.width), int(self.height)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9 or np.linalg.det(self.rotation) < 0:
            raise ConfigError("camera rotation must be a proper orthonormal matrix")

    def world_to_camera(self, points):
        return (np.asarray(points) - self.position) @ self.rotation

    def project(self, points):
        """Pixel coordinates (u, v) and camera depth of world points."""
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[..., 0] / z + 0.5 * self.width
            v = self.focal * pc[..., 1] / z + 0.5 * self.height
        return np.stack([u, v], axis=-1), z


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, focal, width, height):
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return CameraPose(position, rotation, focal, width, height)


def orbit_camera(azimuth_deg, elevation_deg, radius, *, width, height, fov_deg=40.0,
                 target=(0.0, 0.0, 0.0)):
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    position = np.asarray(target, dtype=np.float64) + radius * np.array(
        [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    return look_at(position, target, focal=focal, width=width, height=height)


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, index):
        return Rays(self.origins[index], self.directions[index], self.near[index], self.far[index])


def pixel_grid(width, height):
    """All (row, col) pixel indices in row-major order."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def generate_rays(camera, pixels=None, *, near=None, far=None, bound=1.0):
    """One ray per pixel through the pixel centre.

    ``pixels`` is an (n, 2) array of (row, col); ``None`` means the whole
    image.  ``near``/``far`` default to the camera distance to the origin
    minus/plus ``bound``.
    """
    if pixels is None:
        pixels = pixel_grid(camera.width, camera.height)
    pixels = np.asarray(pixels)
    if pixels.size and (pixels.min() < 0 or np.any(pixels[:, 0] >= camera.height)
                        or np.any(pixels[:, 1] >= camera.width)):
        raise ConfigError("pixel outside image bounds")
    u = pixels[:, 1] + 0.5
    v = pixels[:, 0] + 0.5
    d_cam = np.stack([(u - 0.5 * camera.width) / camera.focal,
                      (v - 0.5 * camera.height) / camera.focal,
                      np.ones(len(pixels))], axis=1)
    dirs = d_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dist = np.linalg.norm(camera.position)
    near = max(dist - bound, 1e-3) if near is None else near
    far = dist + bound if far is None else far
    if not far > near:
        raise ConfigError("ray far bound must exceed near bound")
    n = len(pixels)
    return Rays(np.tile(camera.position, (n, 1)), dirs, np.full(n, float(near)), np.full(n, float(far)))


def sample_along_rays(rays, n_samples=DEFAULT_SAMPLES, stratified=False, rng=None):
    """Sample distances, one per equal bin: bin midpoints or uniform jitter."""
    if n_samples < 1:
        raise ConfigError("need at least one sample per ray")
    u = np.linspace(0.0, 1.0, n_samples + 1)
    edges = rays.near[:, None] + (rays.far - rays.near)[:, None] * u[None, :]
    lo, hi = edges[:, :-1], edges[:, 1:]
    if stratified:
        rng = np.random.default_rng() if rng is None else rng
        jitter = rng.random(lo.shape)
    else:
        jitter = 0.5
    return lo + (hi - lo) * jitter


def sample_ray(ray, n_samples=DEFAULT_SAMPLES, stratified=False, rng=None):
    """Single-ray version of :func:`sample_along_rays`."""
    return sample_along_rays(ray, n_samples, stratified, rng)[0]


def intervals(t, far):
    """Distances between consecutive samples; the last one runs to ``far``."""
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), t.shape[:1])
    return np.concatenate([np.diff(t, axis=-1), (far - t[:, -1])[:, None]], axis=-1)


@dataclass
class RaySamples:
    rays: Rays
    t: np.ndarray
    delta: np.ndarray
    points: np.ndarray

    @classmethod
    def from_rays(cls, rays, n_samples=DEFAULT_SAMPLES, stratified=False, rng=None):
        t = sample_along_rays(rays, n_samples, stratified, rng)
        points = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        return cls(rays, t, intervals(t, rays.far), points)


# --------------------------------------------------------------------------
# compositing


def composite_weights(sigma, delta):
    """Per-sample weights ``alpha_i * prod_{j<i}(1 - alpha_j)`` and transmittance."""
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1))
    return alpha * trans, trans


def composite_weights_backward(sigma, delta, weights, trans, d_weights):
    """Cotangent on density given cotangent on the compositing weights."""
    trans_next = trans * np.exp(-sigma * delta)
    wg = weights * d_weights
    after = np.cumsum(wg[..., ::-1], axis=-1)[..., ::-1] - wg
    return delta * (trans_next * d_weights - after)


class LayerSamples:
    """One field evaluated on a shared set of ray samples."""

    def __init__(self, field, samples, spatial=False):
        self.field = field
        self.samples = samples
        shape = samples.t.shape
        out, self._cache = field.forward(samples.points.reshape(-1, 3), spatial=spatial)
        self.sigma = out.sigma.reshape(shape)
        self.rgb = out.rgb.reshape(*shape, 3)
        self.normal = out.normal.reshape(*shape, 3)
        self.grad_sigma = None if out.grad_sigma is None else out.grad_sigma.reshape(*shape, 3)
        self.weights, self.trans = composite_weights(self.sigma, samples.delta)

    def sigma_cotangent(self, d_weights):
        return composite_weights_backward(self.sigma, self.samples.delta, self.weights,
                                          self.trans, d_weights)

    def backward(self, d_sigma=None, d_rgb=None, d_normal=None, d_grad_sigma=None):
        def flat(a, width):
            return None if a is None else a.reshape(-1, width) if width else a.reshape(-1)
        return self.field.backward(self._cache, flat(d_sigma, 0), flat(d_rgb, 3),
                                   flat(d_normal, 3), flat(d_grad_sigma, 3))


# --------------------------------------------------------------------------
# SH lighting

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = 1.0925484305920792
SH_C3 = 0.31539156525252005
SH_C4 = 0.5462742152960396


def sh_basis(n):
    """Second-order real SH basis at unit normals ``n`` (..., 3) -> (..., 9)."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2 * x * y, SH_C2 * y * z, SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z, SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_jacobian(n):
    """d(basis)/d(normal), shape (..., 9, 3)."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, np.full_like(x, SH_C1), zero),
        (zero, zero, np.full_like(x, SH_C1)),
        (np.full_like(x, SH_C1), zero, zero),
        (SH_C2 * y, SH_C2 * x, zero),
        (zero, SH_C2 * z, SH_C2 * y),
        (zero, zero, 6.0 * SH_C3 * z),
        (SH_C2 * z, zero, SH_C2 * x),
        (2.0 * SH_C4 * x, -2.0 * SH_C4 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


class SHLighting:
    """Nine SH irradiance coefficients per colour channel, stored as (9, 3)."""

    def __init__(self, coeffs=None):
        self.coeffs = SHLighting.identity_coeffs() if coeffs is None else np.array(coeffs, dtype=np.float64).reshape(9, 3)

    @staticmethod
    def identity_coeffs():
        c = np.zeros((9, 3))
        c[0] = 1.0 / SH_C0
        return c

    @classmethod
    def zeros(cls):
        return cls(np.zeros((9, 3)))

    @property
    def params(self):
        return self.coeffs.reshape(-1)

    @params.setter
    def params(self, value):
        self.coeffs = np.asarray(value, dtype=np.float64).reshape(9, 3)

    def irradiance(self, normal):
        return sh_basis(normal) @ self.coeffs


def shade(albedo, normal, sh):
    """``clip(albedo * irradiance(normal), 0, 1)``, channel-wise."""
    return np.clip(albedo * sh.irradiance(normal), 0.0, 1.0)


def shade_backward(albedo, normal, sh, d_out):
    """Cotangents (d_albedo, d_normal, d_coeffs) of :func:`shade`."""
    basis = sh_basis(normal)
    irr = basis @ sh.coeffs
    raw = albedo * irr
    d_raw = np.where((raw > 0.0) & (raw < 1.0), d_out, 0.0)
    d_albedo = d_raw * irr
    d_irr = d_raw * albedo
    flat_b = basis.reshape(-1, 9)
    d_coeffs = flat_b.T @ d_irr.reshape(-1, 3)
    jac = sh_basis_jacobian(normal)
    d_normal = np.einsum("...c,...kj,kc->...j", d_irr, jac, sh.coeffs)
    return d_albedo, d_normal, d_coeffs


# --------------------------------------------------------------------------
# single-layer and fused rendering


class LayerRender:
    """Result of :func:`render_single_layer`."""

    def __init__(self, layer, sh=None):
        self.layer = layer
        self.sh = sh
        self.weights = layer.weights
        albedo = layer.rgb
        self.colors = albedo if sh is None else shade(albedo, layer.normal, sh)
        self.color = np.sum(self.weights[..., None] * self.colors, axis=1)
        self.opacity = np.sum(self.weights, axis=1)
        self.depth = np.sum(self.weights * layer.samples.t, axis=1)

    @property
    def t(self):
        return self.layer.samples.t

    def backward(self, d_color=None, d_opacity=None, d_depth=None, d_weights=None,
                 d_normal=None, d_grad_sigma=None, d_sigma=None):
        """Returns ``{"field": grad, "sh": grad or None}``."""
        w = self.weights
        d_w = np.zeros_like(w) if d_weights is None else np.array(d_weights, dtype=np.float64)
        d_c = None
        if d_color is not None:
            d_w += np.einsum("rc,rsc->rs", d_color, self.colors)
            d_c = w[..., None] * d_color[:, None, :]
        if d_opacity is not None:
            d_w += d_opacity[:, None]
        if d_depth is not None:
            d_w += d_depth[:, None] * self.t
        sig = self.layer.sigma_cotangent(d_w)
        if d_sigma is not None:
            sig = sig + d_sigma
        d_sh = None
        d_rgb = d_c
        if self.sh is not None and d_c is not None:
            d_rgb, d_n_shade, d_coeffs = shade_backward(self.layer.rgb, self.layer.normal, self.sh, d_c)
            d_sh = d_coeffs.reshape(-1)
            d_normal = d_n_shade if d_normal is None else d_normal + d_n_shade
        elif self.sh is not None:
            d_sh = np.zeros(27)
        grad = self.layer.backward(sig, d_rgb, d_normal, d_grad_sigma)
        return {"field": grad, "sh": d_sh}


def render_single_layer(field, rays, n_samples=DEFAULT_SAMPLES, *, stratified=False, rng=None,
                        sh=None, spatial=False, samples=None):
    """Emission-absorption rendering of one field along ``rays``."""
    if samples is None:
        samples = RaySamples.from_rays(rays, n_samples, stratified, rng)
    return LayerRender(LayerSamples(field, samples, spatial=spatial), sh)


class FusedRender:
    """Result of :func:`render_fused`.

    ``selection`` holds the winning layer index per sample and
    ``layer_weights`` the per-layer compositing weights, shape (L, R, S).
    """

    def __init__(self, layers, mode):
        self.layers = layers
        self.mode = mode
        self.layer_weights = np.stack([lay.weights for lay in layers])
        if mode == PER_LAYER:
            self.selection = np.argmax(self.layer_weights, axis=0)
        elif mode == FUSED:
            self.selection = np.argmax(np.stack([lay.sigma for lay in layers]), axis=0)
        else:
            raise ConfigError(f"unknown fusion mode {mode!r}")
        sel = self.selection[None]
        self.colors = np.take_along_axis(np.stack([lay.rgb for lay in layers]), sel[..., None], axis=0)[0]
        if mode == PER_LAYER:
            self.weights = np.take_along_axis(self.layer_weights, sel, axis=0)[0]
        else:
            samples = layers[0].samples
            self.sigma = np.take_along_axis(np.stack([lay.sigma for lay in layers]), sel, axis=0)[0]
            self.weights, self._trans = composite_weights(self.sigma, samples.delta)
        self.color = np.sum(self.weights[..., None] * self.colors, axis=1)
        self.opacity = np.sum(self.weights, axis=1)

    def backward(self, d_color=None, d_opacity=None):
        """Parameter gradients, one array per layer."""
        r, s = self.selection.shape
        d_w = np.zeros((r, s))
        d_c = np.zeros((r, s, 3))
        if d_color is not None:
            d_w += np.einsum("rc,rsc->rs", d_color, self.colors)
            d_c = self.weights[..., None] * d_color[:, None, :]
        if d_opacity is not None:
            d_w += d_opacity[:, None]
        if self.mode == FUSED:
            delta = self.layers[0].samples.delta
            d_sel_sigma = composite_weights_backward(self.sigma, delta, self.weights, self._trans, d_w)
        grads = []
        for j, lay in enumerate(self.layers):
            mask = self.selection == j
            if self.mode == PER_LAYER:
                d_sigma = lay.sigma_cotangent(np.where(mask, d_w, 0.0))
            else:
                d_sigma = np.where(mask, d_sel_sigma, 0.0)
            grads.append(lay.backward(d_sigma, np.where(mask[..., None], d_c, 0.0)))
        return grads


def render_fused(fields, rays, n_samples=DEFAULT_SAMPLES, *, mode=PER_LAYER, stratified=False,
                 rng=None, samples=None):
    """Multi-layer fusion rendering.

    Per sample the layer with the largest compositing weight wins (ties go to
    the lowest layer index) and contributes its own weight and colour.  With
    ``mode="fused"`` the winner is chosen by density instead and the winners'
    densities are composited along one shared transmittance track.
    """
    if len(fields) < 1:
        raise ConfigError("render_fused needs at least one layer")
    if samples is None:
        samples = RaySamples.from_rays(rays, n_samples, stratified, rng)
    return FusedRender([LayerSamples(f, samples) for f in fields], mode)


# --------------------------------------------------------------------------
# surface normals and normal losses


def normals_from_density_grad(grad_sigma):
    """``n = -grad/|grad|`` with a validity mask where ``|grad| > 1e-8``."""
    mag = np.linalg.norm(grad_sigma, axis=-1)
    valid = mag > NORMAL_FLOOR
    safe = np.where(valid, mag, 1.0)
    n = np.where(valid[..., None], -grad_sigma / safe[..., None], 0.0)
    return n, valid, safe


def normals_backward(n, valid, mag, d_n):
    radial = np.sum(n * d_n, axis=-1, keepdims=True)
    d_grad = -(d_n - n * radial) / mag[..., None]
    return np.where(valid[..., None], d_grad, 0.0)


UNDEFINED_NORMAL = None


def surface_normal(field, x):
    """Outward surface normal at ``x``, or ``UNDEFINED_NORMAL`` (None) when the
    density gradient vanishes.  Batched inputs return ``(normals, valid)``."""
    x = np.asarray(x, dtype=np.float64)
    grad = field.density_spatial_grad(x)
    n, valid, _ = normals_from_density_grad(grad)
    if x.ndim == 1:
        return n[0] if valid[0] else UNDEFINED_NORMAL
    return n, valid


def normal_loss(weights, n_pred, n_surf, valid=None):
    """``mean_rays sum_i w_i |n'_i - n_i|``.  Returns (value, cotangents)."""
    weights = np.atleast_2d(weights)
    n_pred = np.asarray(n_pred, dtype=np.float64).reshape(*weights.shape, 3)
    n_surf = np.asarray(n_surf, dtype=np.float64).reshape(*weights.shape, 3)
    valid = np.ones(weights.shape, bool) if valid is None else np.asarray(valid).reshape(weights.shape)
    diff = n_pred - n_surf
    dist = np.linalg.norm(diff, axis=-1)
    r = weights.shape[0]
    value = np.sum(np.where(valid, weights * dist, 0.0)) / r
    unit = np.where((dist > 0)[..., None], diff / np.where(dist > 0, dist, 1.0)[..., None], 0.0)
    coef = np.where(valid, weights, 0.0)[..., None] / r
    grads = {
        "weights": np.where(valid, dist, 0.0) / r,
        "n_pred": coef * unit,
        "n_surf": -coef * unit,
    }
    return value, grads


def normal_reg_loss(weights, n_pred, n_surf, valid=None):
    """``mean_rays sum_i w_i (1 - n'_i . n_i)``.  Returns (value, cotangents)."""
    weights = np.atleast_2d(weights)
    n_pred = np.asarray(n_pred, dtype=np.float64).reshape(*weights.shape, 3)
    n_surf = np.asarray(n_surf, dtype=np.float64).reshape(*weights.shape, 3)
    valid = np.ones(weights.shape, bool) if valid is None else np.asarray(valid).reshape(weights.shape)
    cos = np.sum(n_pred * n_surf, axis=-1)
    r = weights.shape[0]
    value = np.sum(np.where(valid, weights * (1.0 - cos), 0.0)) / r
    coef = np.where(valid, weights, 0.0)[..., None] / r
    grads = {
        "weights": np.where(valid, 1.0 - cos, 0.0) / r,
        "n_pred": -coef * n_surf,
        "n_surf": -coef * n_pred,
    }
    return value, grads


@dataclass
class NormalTerms:
    """Both normal losses of a render plus the cotangents to feed its backward."""

    normal: float
    normal_reg: float
    cotangents: dict = field(default_factory=dict)


def normal_terms(render, weight_n=1.0, weight_reg=1.0):
    """Evaluate both normal losses on a render made with ``spatial=True``.

    The returned cotangents are already scaled by the two weights.
    """
    layer = render.layer
    if layer.grad_sigma is None:
        raise ValueError("normal losses need a render with spatial=True")
    n_surf, valid, mag = normals_from_density_grad(layer.grad_sigma)
    ln, gn = normal_loss(layer.weights, layer.normal, n_surf, valid)
    lr, gr = normal_reg_loss(layer.weights, layer.normal, n_surf, valid)
    d_n_surf = weight_n * gn["n_surf"] + weight_reg * gr["n_surf"]
    cot = {
        "d_weights": weight_n * gn["weights"] + weight_reg * gr["weights"],
        "d_normal": weight_n * gn["n_pred"] + weight_reg * gr["n_pred"],
        "d_grad_sigma": normals_backward(n_surf, valid, mag, d_n_surf),
    }
    return NormalTerms(ln, lr, cot)


# --------------------------------------------------------------------------
# image helpers


def render_image(fields, camera, n_samples=DEFAULT_SAMPLES, *, mode=PER_LAYER, sh=None,
                 chunk=4096, bound=1.0):
    """Render a full (H, W, 3) colour image and (H, W) opacity, no gradients."""
    if not isinstance(fields, (list, tuple)):
        fields = [fields]
    rays = generate_rays(camera, bound=bound)
    colors, alphas = [], []
    for start in range(0, len(rays), chunk):
        sub = rays.subset(slice(start, start + chunk))
        if len(fields) == 1:
            res = render_single_layer(fields[0], sub, n_samples, sh=sh)
        else:
            res = render_fused(fields, sub, n_samples, mode=mode)
        colors.append(res.color)
        alphas.append(res.opacity)
    shape = (camera.height, camera.width)
    return np.concatenate(colors).reshape(*shape, 3), np.concatenate(alphas).reshape(shape)
