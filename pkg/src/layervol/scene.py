"""Synthetic analytic scenes used as photometric ground truth."""

from dataclasses import dataclass, field

import numpy as np

from .errors import SceneSpecError
from .fields import BODY, CLOTHING, AnalyticField

SPHERE_IN_SHELL = "sphere_in_shell"
HUMANOID = "humanoid"
ANALYTIC_SHAPES = ("ellipsoid", "shell", "capsules", "capsule_shell")


def smoothstep(u):
    """C1 ramp 0 -> 1 on [0, 1] and its derivative."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u)


def _radius(x, center):
    d = x - center
    r = np.linalg.norm(d, axis=1)
    grad = d / np.maximum(r, 1e-12)[:, None]
    return r, grad


def _segment_distance(x, a, b):
    ab = b - a
    s = np.clip(((x - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    diff = x - (a + s[:, None] * ab)
    d = np.linalg.norm(diff, axis=1)
    return d, diff / np.maximum(d, 1e-12)[:, None]


def _soft_union(values, grads):
    """``1 - prod(1 - v_k)`` and its gradient."""
    comp = [1.0 - v for v in values]
    total = np.ones_like(values[0])
    for c in comp:
        total = total * c
    grad = np.zeros_like(grads[0])
    for k, g in enumerate(grads):
        others = np.ones_like(values[0])
        for j, c in enumerate(comp):
            if j != k:
                others = others * c
        grad += others[:, None] * g
    return 1.0 - total, grad


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float
    region: str = "torso"


@dataclass
class AnalyticLayer:
    """Closed-form density layer.

    ``shape`` is one of ``"ellipsoid"`` (a sphere when all radii agree),
    ``"shell"``, ``"capsules"`` (soft union of capsule blobs) or
    ``"capsule_shell"`` (soft union of shells offset from capsules).  Density
    ramps over ``falloff`` world units, so supports are compact.
    """

    shape: str
    amplitude: float = 40.0
    falloff: float = 0.02
    center: tuple = (0.0, 0.0, 0.0)
    radii: tuple = (0.3, 0.3, 0.3)
    inner: float = 0.35
    outer: float = 0.45
    capsules: list = field(default_factory=list)
    gap: float = 0.02
    thickness: float = 0.04
    y_range: tuple = None
    albedo: tuple = (0.8, 0.6, 0.5)
    albedo_lower: tuple = None
    split_y: float = 0.0

    def __post_init__(self):
        if self.shape not in ANALYTIC_SHAPES:
            raise SceneSpecError(f"unknown analytic shape {self.shape!r}")
        if self.amplitude < 0 or self.falloff <= 0:
            raise SceneSpecError("amplitude must be nonnegative and falloff positive")

    def profile(self, x):
        """Unit-amplitude density profile in [0, 1] and its spatial gradient."""
        x = np.asarray(x, dtype=np.float64)
        w = self.falloff
        c = np.asarray(self.center, dtype=np.float64)
        if self.shape == "ellipsoid":
            radii = np.asarray(self.radii, dtype=np.float64)
            q = (x - c) / radii
            r = np.linalg.norm(q, axis=1)
            dr = (q / radii) / np.maximum(r, 1e-12)[:, None]
            scale = radii.min()
            v, dv = smoothstep((1.0 - r) * scale / w)
            return v, (-dv * scale / w)[:, None] * dr
        if self.shape == "shell":
            r, dr = _radius(x, c)
            v1, d1 = smoothstep((r - self.inner) / w)
            v2, d2 = smoothstep((self.outer - r) / w)
            return v1 * v2, ((d1 * v2 - v1 * d2) / w)[:, None] * dr
        if self.shape in ("capsules", "capsule_shell"):
            values, grads = [], []
            for cap in self.capsules:
                d, dd = _segment_distance(x, np.asarray(cap.a), np.asarray(cap.b))
                if self.shape == "capsules":
                    v, dv = smoothstep((cap.radius - d) / w)
                    values.append(v)
                    grads.append((-dv / w)[:, None] * dd)
                else:
                    lo = cap.radius + self.gap
                    v1, d1 = smoothstep((d - lo) / w)
                    v2, d2 = smoothstep((lo + self.thickness - d) / w)
                    values.append(v1 * v2)
                    grads.append(((d1 * v2 - v1 * d2) / w)[:, None] * dd)
            v, g = _soft_union(values, grads)
            if self.y_range is not None:
                lo, hi = self.y_range
                c1, e1 = smoothstep((x[:, 1] - lo) / w)
                c2, e2 = smoothstep((hi - x[:, 1]) / w)
                cut = c1 * c2
                g = g * cut[:, None]
                g[:, 1] += v * (e1 * c2 - c1 * e2) / w
                v = v * cut
            return v, g
        raise AssertionError(self.shape)

    def density(self, x):
        return self.amplitude * self.profile(x)[0]

    def density_grad(self, x):
        return self.amplitude * self.profile(x)[1]

    def albedo_fn(self, x):
        top = np.tile(np.asarray(self.albedo, dtype=np.float64), (len(x), 1))
        if self.albedo_lower is None:
            return top
        lower = np.asarray(self.albedo_lower, dtype=np.float64)
        return np.where((x[:, 1] < self.split_y)[:, None], lower, top)

    def to_field(self, role=BODY, layer_index=0):
        return AnalyticField(self.density, self.density_grad, self.albedo_fn, role=role,
                             layer_index=layer_index, name=self.shape)


@dataclass
class SceneSpec:
    kind: str = SPHERE_IN_SHELL
    inner_radius: float = 0.3
    shell_inner: float = 0.35
    shell_outer: float = 0.45
    body_amplitude: float = 40.0
    cloth_amplitude: float = 80.0
    falloff: float = 0.02
    body_shape: tuple = (1.0, 1.0, 1.0)
    disjoint: bool = True
    bound: float = 1.0
    camera_radius: float = 3.0
    fov_deg: float = 30.0
    body_albedo: tuple = (0.85, 0.55, 0.45)
    cloth_albedo: tuple = (0.2, 0.45, 0.8)
    cloth_albedo_lower: tuple = (0.9, 0.85, 0.3)
    seed: int = 0

    @classmethod
    def from_dict(cls, values):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise SceneSpecError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class Scene:
    spec: SceneSpec
    analytic: list
    layers: list
    proxy: object = None
    skeleton: object = None
    disjoint: bool = False

    @property
    def body(self):
        return self.layers[0]

    @property
    def clothing(self):
        return self.layers[1:]

    def proxy_bounds(self):
        if self.proxy is None:
            return None
        v = self.proxy.vertices
        return v.min(axis=0), v.max(axis=0)


def supports_disjoint(layers, bound, n_points=100_000, seed=0):
    """Monte-Carlo check that no sampled point has positive density in two layers."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-bound, bound, size=(n_points, 3))
    positive = np.stack([lay.density(x) > 0 for lay in layers])
    return not np.any(positive.sum(axis=0) > 1)


def humanoid_layers(body_shape=(1.0, 1.0, 1.0), amplitude=40.0, cloth_amplitude=80.0, falloff=0.02,
                    body_albedo=(0.85, 0.55, 0.45), cloth_albedo=(0.2, 0.45, 0.8),
                    cloth_albedo_lower=(0.9, 0.85, 0.3)):
    """Analytic body blob and a shirt-like garment around the torso of the
    synthetic humanoid with shape ``body_shape``."""
    from .proxy import humanoid_parts

    parts = humanoid_parts(body_shape)
    caps = [Capsule(p.a, p.b, p.radius, p.region) for p in parts]
    body = AnalyticLayer("capsules", amplitude=amplitude, falloff=falloff, capsules=caps,
                         albedo=body_albedo)
    torso = [c for c in caps if c.region == "torso"]
    torso_y = [min(c.a[1], c.b[1]) for c in torso], [max(c.a[1], c.b[1]) for c in torso]
    y_lo, y_hi = min(torso_y[0]), max(torso_y[1])
    cloth = AnalyticLayer("capsule_shell", amplitude=cloth_amplitude, falloff=falloff,
                          capsules=torso, gap=0.02, thickness=0.04,
                          y_range=(y_lo, y_lo + 0.8 * (y_hi - y_lo)),
                          albedo=cloth_albedo, albedo_lower=cloth_albedo_lower,
                          split_y=0.5 * (y_lo + y_hi))
    return body, cloth


def build_scene(spec=None):
    """Layered analytic scene plus proxy mesh and skeleton."""
    from .proxy import sphere_mesh, synth_humanoid, humanoid_skeleton

    spec = SceneSpec() if spec is None else spec
    if spec.kind == SPHERE_IN_SHELL:
        if not 0 < spec.inner_radius < spec.shell_inner < spec.shell_outer:
            raise SceneSpecError("need 0 < inner_radius < shell_inner < shell_outer")
        body = AnalyticLayer("ellipsoid", amplitude=spec.body_amplitude, falloff=spec.falloff,
                             radii=(spec.inner_radius,) * 3, albedo=spec.body_albedo)
        cloth = AnalyticLayer("shell", amplitude=spec.cloth_amplitude, falloff=spec.falloff,
                              inner=spec.shell_inner, outer=spec.shell_outer,
                              albedo=spec.cloth_albedo, albedo_lower=spec.cloth_albedo_lower)
        proxy = sphere_mesh(spec.shell_outer)
        skeleton = None
    elif spec.kind == HUMANOID:
        body, cloth = humanoid_layers(spec.body_shape, spec.body_amplitude, spec.cloth_amplitude,
                                      spec.falloff, spec.body_albedo, spec.cloth_albedo,
                                      spec.cloth_albedo_lower)
        proxy = synth_humanoid(spec.body_shape)
        skeleton = humanoid_skeleton(spec.body_shape)
    else:
        raise SceneSpecError(f"unknown scene kind {spec.kind!r}")
    analytic = [body, cloth]
    disjoint = supports_disjoint(analytic, spec.bound, seed=spec.seed)
    if spec.disjoint and not disjoint:
        raise SceneSpecError("layer supports overlap but a disjoint scene was requested")
    layers = [body.to_field(BODY), cloth.to_field(CLOTHING, 1)]
    return Scene(spec, analytic, layers, proxy, skeleton, disjoint)


def mismatch_scenario(source_shape=(1.0, 1.0, 1.0), target_scale=(1.3, 1.0, 1.3), **spec_values):
    """Humanoid scene whose garment fits ``source_shape`` plus a wider target proxy.

    Returns ``(scene, target_proxy)``; the target shape is the source shape
    scaled per axis by ``target_scale``.
    """
    from .proxy import synth_humanoid

    spec = SceneSpec(kind=HUMANOID, body_shape=tuple(source_shape), **spec_values)
    scene = build_scene(spec)
    target_shape = tuple(np.asarray(source_shape, dtype=np.float64) * np.asarray(target_scale))
    return scene, synth_humanoid(target_shape)


def scene_cameras(spec, n_views, resolution, elevation=0.0):
    from .render import orbit_camera

    return [orbit_camera(360.0 * k / n_views, elevation, spec.camera_radius, width=resolution,
                         height=resolution, fov_deg=spec.fov_deg) for k in range(n_views)]


def render_reference(scene, cameras, *, n_samples=64, weight_threshold=0.01):
    """Reference images for every camera: body alone, clothing alone, composite.

    Returns a list of dicts with keys ``body``, ``clothing``, ``composite``
    (colour, (H, W, 3)) and ``opacity`` (composite opacity, (H, W)).
    """
    from .decouple import composite_render
    from .render import generate_rays, render_single_layer

    out = []
    for cam in cameras:
        rays = generate_rays(cam, bound=scene.spec.bound)
        shape = (cam.height, cam.width)
        body = render_single_layer(scene.body, rays, n_samples)
        cloth = render_single_layer(scene.clothing[-1], rays, n_samples)
        comp = composite_render(scene.layers[:-1], scene.layers[-1], rays, n_samples, weight_threshold=weight_threshold)
        out.append({
            "body": body.color.reshape(*shape, 3),
            "clothing": cloth.color.reshape(*shape, 3),
            "composite": comp.color.reshape(*shape, 3),
            "opacity": comp.opacity.reshape(shape),
        })
    return out
