"""Optimiser, stage configuration and the three training stages.

Stages run in order body -> clothing -> matching.  Each stage trains only
its own parameters; earlier layers are frozen inputs.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .decouple import (ALTERNATION, AND, CLOTHING_WEIGHTS, DEFAULT_THRESHOLD, ClothingStep,
                       alternation_kind, clothing_stage_loss, composite_render,
                       density_sparsity_loss, overlap_mass)
from .errors import ConfigError, GuidanceError, MissingPrerequisiteError
from .fields import BODY, CLOTHING, LayerField
from .guidance import (BODY_GRADIENT_SCALE, BODY_WEIGHTS, CLOTHING_GRADIENT_SCALE, BodyStep,
                       GuidancePrompt, body_stage_loss, sds_image_gradient)
from .io import Checkpoint, field_checkpoint
from .proxy import (MATCHING_WEIGHTS, MeshTopology, VertexOffsetModel, match_loss,
                    matching_stage_loss, nerf_cloth_mask, offset_reg_loss, rasterize_silhouette,
                    uncovered_body_mass)
from .render import (RaySamples, Rays, SHLighting, generate_rays, orbit_camera,
                     render_single_layer)

log = logging.getLogger(__name__)

STAGES = ("body", "clothing", "matching")
PREREQUISITES = {"body": (), "clothing": ("body",), "matching": ("body", "clothing")}
LOG_COLUMNS = (
    "iteration", "stage", "step_kind", "skipped",
    "sds_body", "normal", "normal_reg", "loss_body",
    "sds_cloth", "sds_comp", "overlap_reg", "density_reg", "loss_clothing",
    "match", "offset_reg", "loss_matching", "loss_total",
)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params, lr, **kwargs):
        n = np.size(params)
        return cls(lr, np.zeros(n), np.zeros(n), **kwargs)


def adam_step(state, params, grads):
    """One bias-corrected Adam update; returns the new parameter vector.

    Non-finite gradients leave parameters and moments untouched and bump
    ``state.skipped``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ConfigError(f"Adam shapes disagree: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        log.warning("non-finite gradient, step skipped (%d so far)", state.skipped)
        return params
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --------------------------------------------------------------------------
# configuration


@dataclass
class StageConfig:
    stage: str
    iterations: int
    lr: float
    weights: tuple
    resolution: int = 64
    batch_size: int = 2
    seed: int = 0
    alternation: tuple = ALTERNATION
    rays_per_view: int = 512
    n_samples: int = 48
    guidance_scale: float = 1.0
    elevation_range: tuple = (-15.0, 30.0)
    hidden: tuple = (64, 64, 64)
    num_bands: int = 6
    density_gain: float = 1.0
    use_sh: bool = False
    sh_lr: float = 1e-2
    weight_threshold: float = DEFAULT_THRESHOLD
    combinator: str = AND
    sparsity_points: int = 1024
    one_sided: bool = False
    sharpness: float = 50.0
    n_views: int = 8
    offset_cap_fraction: float = 0.2
    eval_every: int = 100
    eval_views: int = 4
    eval_stride: int = 2
    prompt: str = "a person"
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        self.weights = tuple(float(w) for w in self.weights)
        self.alternation = tuple(int(a) for a in self.alternation)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.elevation_range = tuple(float(e) for e in self.elevation_range)
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if any(w < 0 for w in self.weights):
            raise ConfigError("loss weights must be nonnegative")
        if len(self.alternation) != 2 or min(self.alternation) < 1:
            raise ConfigError("alternation ratio entries must be positive integers")
        expected = {"body": 3, "clothing": 4, "matching": 2}[self.stage]
        if len(self.weights) != expected:
            raise ConfigError(f"{self.stage} stage takes {expected} loss weights")
        for name in ("lr", "resolution", "batch_size", "rays_per_view", "n_samples", "sharpness",
                     "threads"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def desk(cls, stage, **overrides):
        """CPU-scale preset: 64x64 renders and short schedules."""
        presets = {
            "body": dict(iterations=2000, lr=5e-3, weights=BODY_WEIGHTS, guidance_scale=BODY_GRADIENT_SCALE,
                         rays_per_view=256, n_samples=32),
            "clothing": dict(iterations=1500, lr=5e-3, weights=CLOTHING_WEIGHTS,
                             guidance_scale=CLOTHING_GRADIENT_SCALE),
            "matching": dict(iterations=500, lr=1e-3, weights=MATCHING_WEIGHTS),
        }
        if stage not in presets:
            raise ConfigError(f"unknown stage {stage!r}")
        return cls(stage=stage, **{**presets[stage], **overrides})

    @classmethod
    def full(cls, stage, **overrides):
        """Full-scale schedule: 512x512 renders, long runs, small learning rates."""
        presets = {
            "body": dict(iterations=12000, lr=5e-5, weights=BODY_WEIGHTS, guidance_scale=BODY_GRADIENT_SCALE),
            "clothing": dict(iterations=8000, lr=5e-5, weights=CLOTHING_WEIGHTS,
                             guidance_scale=CLOTHING_GRADIENT_SCALE),
            "matching": dict(iterations=3000, lr=1e-3, weights=MATCHING_WEIGHTS),
        }
        if stage not in presets:
            raise ConfigError(f"unknown stage {stage!r}")
        base = dict(resolution=512, rays_per_view=512 * 512)
        return cls(stage=stage, **{**base, **presets[stage], **overrides})

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown stage settings: {sorted(unknown)}")
        return cls(**values)

    def updated(self, **changes):
        return replace(self, **changes)


# --------------------------------------------------------------------------
# helpers


def concat_rays(parts):
    return Rays(*(np.concatenate([getattr(r, k) for r in parts]) for k in ("origins", "directions", "near", "far")))


def sample_view_rays(scene, config, rng):
    """Random batch of orbit cameras, each contributing a random pixel subset."""
    spec = scene.spec
    parts = []
    n_pix = config.resolution ** 2
    for _ in range(config.batch_size):
        az = rng.uniform(0.0, 360.0)
        el = rng.uniform(*config.elevation_range)
        cam = orbit_camera(az, el, spec.camera_radius, width=config.resolution,
                           height=config.resolution, fov_deg=spec.fov_deg)
        if config.rays_per_view >= n_pix:
            pixels = None
        else:
            flat = np.sort(rng.choice(n_pix, config.rays_per_view, replace=False))
            pixels = np.stack([flat // config.resolution, flat % config.resolution], axis=1)
        parts.append(generate_rays(cam, pixels, bound=spec.bound))
    return concat_rays(parts)


def eval_rays(scene, config):
    """Fixed evaluation rays: ``eval_views`` azimuths, every ``eval_stride``-th pixel."""
    spec = scene.spec
    r = config.resolution
    rows, cols = np.meshgrid(np.arange(0, r, config.eval_stride), np.arange(0, r, config.eval_stride),
                             indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    parts = [generate_rays(orbit_camera(360.0 * k / config.eval_views, 0.0, spec.camera_radius,
                                        width=r, height=r, fov_deg=spec.fov_deg), pixels, bound=spec.bound)
             for k in range(config.eval_views)]
    return concat_rays(parts)


def measure_overlap_mass(underlayers, cloth, rays, n_samples=64, weight_threshold=DEFAULT_THRESHOLD,
                         combinator=AND, chunk=2048):
    """Mean per-ray clothing weight on the overlap set, midpoint samples."""
    total = 0.0
    for lo in range(0, len(rays), chunk):
        sub = rays.subset(slice(lo, lo + chunk))
        comp = composite_render(underlayers, cloth, sub, n_samples, weight_threshold=weight_threshold, combinator=combinator)
        total += overlap_mass(comp.cloth, comp.combined, weight_threshold, combinator) * len(sub)
    return total / len(rays)


def _row(iteration, stage, kind="", skipped=0, **terms):
    row = {c: math.nan for c in LOG_COLUMNS}
    row.update(iteration=iteration, stage=stage, step_kind=kind, skipped=skipped)
    row.update(terms)
    return row


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c]
                             for c in LOG_COLUMNS])


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class StageResult:
    stage: str
    checkpoints: dict
    log: list
    metrics: dict = field(default_factory=dict)
    trained: dict = field(default_factory=dict)


def _check_prerequisites(stage, available):
    for need in PREREQUISITES[stage]:
        if available.get(need) is None:
            raise MissingPrerequisiteError(need)


def _prompt(config, inputs, key, default):
    token = inputs.get("prompts", {}).get(key, default)
    return GuidancePrompt(token)


# --------------------------------------------------------------------------
# stages


def run_stage(config, scene, inputs=None, backend=None, log_path=None):
    """Train one stage and return its checkpoints, log rows and metrics.

    ``inputs`` maps ``"body"``/``"clothing"`` to frozen fields from earlier
    stages (analytic or learned), plus optionally ``"init"`` (starting
    parameters for this stage), ``"target_proxy"`` and ``"prompts"``.
    """
    inputs = dict(inputs or {})
    _check_prerequisites(config.stage, inputs)
    if backend is None:
        from .guidance import PhotometricBackend
        backend = PhotometricBackend()
    runner = {"body": _run_body, "clothing": _run_clothing, "matching": _run_matching}[config.stage]
    limit = 1 if config.deterministic else config.threads
    with threadpool_limits(limits=limit):
        result = runner(config, scene, inputs, backend)
    if log_path is not None:
        write_log(log_path, result.log)
    return result


def _run_body(config, scene, inputs, backend):
    rng = np.random.default_rng(config.seed)
    init = inputs.get("init")
    body = init.copy() if init is not None else LayerField(
        config.hidden, config.num_bands, role=BODY, seed=config.seed, density_gain=config.density_gain)
    sh = SHLighting() if config.use_sh else None
    reference_field = scene.layers[0]
    prompt = _prompt(config, inputs, "body", config.prompt)
    adam = AdamState.for_params(body.params, config.lr)
    sh_adam = AdamState.for_params(np.zeros(27), config.sh_lr) if sh is not None else None
    spatial = config.weights[1] > 0 or config.weights[2] > 0 or sh is not None
    rows, skipped = [], 0
    for it in range(config.iterations):
        rays = sample_view_rays(scene, config, rng)
        ref = render_single_layer(reference_field, rays, config.n_samples).color
        render = render_single_layer(body, rays, config.n_samples, stratified=True, rng=rng, sh=sh,
                                     spatial=spatial)
        try:
            g = sds_image_gradient(backend, render.color, prompt, rng=rng, scale=config.guidance_scale,
                                   reference=ref)
        except GuidanceError as exc:
            skipped += 1
            log.warning("body iteration %d skipped: %s", it, exc)
            rows.append(_row(it, "body", "body", skipped))
            continue
        sds = backend.loss_value(render.color, g / config.guidance_scale, reference=ref)
        if spatial:
            step = BodyStep(render, config.weights)
            grads = step.gradient(g)
            ln, lr_ = step.terms.normal, step.terms.normal_reg
        else:
            grads = render.backward(d_color=config.weights[0] * g)
            ln = lr_ = 0.0
        body.params = adam_step(adam, body.params, grads["field"])
        if sh is not None:
            sh.params = adam_step(sh_adam, sh.params, grads["sh"])
        total = body_stage_loss(sds, ln, lr_, config.weights)
        rows.append(_row(it, "body", "body", skipped + adam.skipped, sds_body=sds, normal=ln,
                         normal_reg=lr_, loss_body=total, loss_total=total))
    ckpts = {"body": field_checkpoint(body, {"stage": "body"})}
    if sh is not None:
        ckpts["sh"] = Checkpoint("sh", 0, {"kind": "sh_lighting", "order": 2}, sh.params)
    return StageResult("body", ckpts, rows, {"skipped": skipped + adam.skipped},
                       {"body": body, "sh": sh})


def _run_clothing(config, scene, inputs, backend):
    rng = np.random.default_rng(config.seed)
    under = [inputs["body"], *inputs.get("underlayers", [])]
    index = len(under)
    init = inputs.get("init")
    cloth = init.copy() if init is not None else LayerField(
        config.hidden, config.num_bands, role=CLOTHING, layer_index=index, seed=config.seed + 1,
        density_gain=config.density_gain)
    ref_under, ref_cloth = scene.layers[:-1], scene.layers[-1]
    prompts = {"cloth": _prompt(config, inputs, "clothing", config.prompt),
               "composite": _prompt(config, inputs, "composite", config.prompt)}
    wc, wp, wo, wr = config.weights
    adam = AdamState.for_params(cloth.params, config.lr)
    bounds = scene.proxy_bounds()
    evaluation = eval_rays(scene, config)
    masses = []
    rows, skipped = [], 0
    for it in range(config.iterations):
        if config.eval_every and it % config.eval_every == 0:
            masses.append((it, measure_overlap_mass(under, cloth, evaluation, weight_threshold=config.weight_threshold,
                                                    combinator=config.combinator)))
        kind = alternation_kind(it, config.alternation)
        rays = sample_view_rays(scene, config, rng)
        samples = RaySamples.from_rays(rays, config.n_samples, True, rng)
        step = ClothingStep(under, cloth, samples, config.weight_threshold, config.combinator)
        if kind == "cloth":
            image = step.cloth_render.color
            ref = render_single_layer(ref_cloth, rays, config.n_samples).color
        else:
            image = step.composite.color
            ref = composite_render(ref_under, ref_cloth, rays, config.n_samples, weight_threshold=config.weight_threshold).color
        try:
            g = sds_image_gradient(backend, image, prompts[kind], rng=rng, scale=config.guidance_scale,
                                   reference=ref)
        except GuidanceError as exc:
            skipped += 1
            log.warning("clothing iteration %d skipped: %s", it, exc)
            rows.append(_row(it, "clothing", kind, skipped))
            continue
        sds = backend.loss_value(image, g / config.guidance_scale, reference=ref)
        reg, d_w = step.overlap_reg()
        dens, dens_grads = density_sparsity_loss([cloth], bounds, scene_bound=scene.spec.bound,
                                                 n_points=config.sparsity_points, rng=rng)
        if kind == "cloth":
            grads = step.gradient(d_cloth_color=wc * g, d_cloth_weights=wo * d_w)
            terms = {"sds_cloth": sds}
            total = clothing_stage_loss(sds, 0.0, reg, dens, config.weights)
        else:
            grads = step.gradient(d_comp_color=wp * g, d_cloth_weights=wo * d_w)
            terms = {"sds_comp": sds}
            total = clothing_stage_loss(0.0, sds, reg, dens, config.weights)
        grads = grads + wr * dens_grads[0]
        cloth.params = adam_step(adam, cloth.params, grads)
        rows.append(_row(it, "clothing", kind, skipped + adam.skipped, overlap_reg=reg, density_reg=dens,
                         loss_clothing=total, loss_total=total, **terms))
    masses.append((config.iterations, measure_overlap_mass(under, cloth, evaluation, weight_threshold=config.weight_threshold,
                                                           combinator=config.combinator)))
    ckpts = {"clothing": field_checkpoint(cloth, {"stage": "clothing"})}
    return StageResult("clothing", ckpts, rows, {"overlap_mass": masses, "skipped": skipped + adam.skipped},
                       {"clothing": cloth})


class MatchingProblem:
    """Fixed views, cached clothing masks and body silhouettes for matching.

    The clothing proxy is the source proxy restricted to its clothed regions;
    offsets live on its vertices.  Body silhouettes come from the target
    proxy restricted the same way.
    """

    def __init__(self, source, target, cloth_field, scene, config):
        if source.n_vertices != target.n_vertices or not np.array_equal(source.faces, target.faces):
            raise ConfigError("source and target proxies must share topology")
        if not np.array_equal(source.labels, target.labels):
            raise ConfigError("source and target proxies must share region labels")
        spec = scene.spec
        self.config = config
        self.index = source.cloth_vertex_index()
        remap = np.full(source.n_vertices, -1)
        remap[self.index] = np.arange(len(self.index))
        self.faces = remap[source.cloth_faces()]
        self.canonical = source.vertices[self.index]
        self.topology = MeshTopology(self.faces, len(self.index))
        self.cameras = [orbit_camera(360.0 * k / config.n_views,
                                     config.elevation_range[k % 2] * 0.5, spec.camera_radius,
                                     width=config.resolution, height=config.resolution, fov_deg=spec.fov_deg)
                        for k in range(config.n_views)]
        self.masks = [nerf_cloth_mask(cloth_field, cam, 64, spec.bound) for cam in self.cameras]
        body_faces = target.cloth_faces()
        body_topology = MeshTopology(body_faces, target.n_vertices)
        self.bodies = [rasterize_silhouette(target.vertices, body_faces, cam, sharpness=config.sharpness,
                                            topology=body_topology).image for cam in self.cameras]

    def silhouette(self, offsets, view):
        return rasterize_silhouette(self.canonical + offsets, self.faces, self.cameras[view],
                                    sharpness=self.config.sharpness, topology=self.topology)

    def evaluate(self, offsets, views, one_sided=False):
        """Mean match loss over ``views`` and its gradient on the offsets."""
        value, grad = 0.0, np.zeros_like(self.canonical)
        for k in views:
            sil = self.silhouette(offsets, k)
            v, g = match_loss(self.masks[k], sil.image, self.bodies[k], one_sided)
            value += v / len(views)
            grad += sil.backward(g["proxy_cloth"]) / len(views)
        return value, grad

    def uncovered_mass(self, offsets):
        return float(np.mean([uncovered_body_mass(self.masks[k], self.silhouette(offsets, k).image,
                                                  self.bodies[k]) for k in range(len(self.cameras))]))


def _run_matching(config, scene, inputs, backend):
    rng = np.random.default_rng(config.seed)
    source = scene.proxy
    target = inputs.get("target_proxy") or source
    problem = MatchingProblem(source, target, inputs["clothing"], scene, config)
    init = inputs.get("init")
    model = init if init is not None else VertexOffsetModel(
        cap=config.offset_cap_fraction * source.height(), seed=config.seed)
    wm, wr = config.weights
    adam = AdamState.for_params(model.params, config.lr)
    zero = np.zeros_like(problem.canonical)
    start_mass = problem.uncovered_mass(model(problem.canonical))
    rows = []
    batch = min(config.batch_size, config.n_views)
    for it in range(config.iterations):
        views = rng.choice(config.n_views, batch, replace=False)
        offsets, cache = model.forward(problem.canonical)
        lm, d_off = problem.evaluate(offsets, views, config.one_sided)
        lreg, d_reg = offset_reg_loss(offsets)
        grads = model.backward(cache, wm * d_off + wr * d_reg)
        model.params = adam_step(adam, model.params, grads)
        total = matching_stage_loss(lm, lreg, config.weights)
        rows.append(_row(it, "matching", "match", adam.skipped, match=lm, offset_reg=lreg,
                         loss_matching=total, loss_total=total))
    offsets = model(problem.canonical)
    metrics = {"uncovered_mass": (start_mass, problem.uncovered_mass(offsets)),
               "mean_offset": float(np.mean(np.linalg.norm(offsets, axis=1))),
               "unwarped_mass": problem.uncovered_mass(zero), "skipped": adam.skipped}
    desc = dict(model.descriptor(), stage="matching", n_vertices=int(len(problem.index)))
    ckpts = {"offsets": Checkpoint("offsets", 0, desc, model.params)}
    return StageResult("matching", ckpts, rows, metrics,
                       {"offsets": model, "problem": problem, "offset_values": offsets})


def transfer_report(problem, cloth_field, offsets, bound=1.0, n_samples=64):
    """Clothing/body silhouette IoU over the matching views, before and after warping."""
    from .proxy import ProxyWarp, WarpedField, silhouette_iou

    warped = WarpedField(cloth_field, ProxyWarp(problem.canonical, offsets))
    before, after = [], []
    for k, cam in enumerate(problem.cameras):
        before.append(silhouette_iou(problem.masks[k], problem.bodies[k]))
        after.append(silhouette_iou(nerf_cloth_mask(warped, cam, n_samples, bound), problem.bodies[k]))
    return {"iou_unwarped": float(np.mean(before)), "iou_warped": float(np.mean(after)),
            "per_view": list(zip(before, after))}
