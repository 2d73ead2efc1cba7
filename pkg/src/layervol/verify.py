"""Invariant suite behind ``layervol verify``.

Each check has a stable ID, runs in well under a second or two, and returns
``(passed, detail)``.  ``run_suite(mutation="flip_transmittance")`` swaps in
a deliberately broken compositor to prove the oracle checks can fail.
"""

import contextlib
import math
import time

import numpy as np

from . import decouple, render
from .fields import AnalyticField, LayerField
from .gradcheck import central_difference, relative_error

MUTATIONS = ("flip_transmittance",)


def scalar_composite(sigmas, deltas, colors):
    """Loop-form emission-absorption sum for one ray."""
    trans, out, opacity = 1.0, [0.0, 0.0, 0.0], 0.0
    for s, d, c in zip(sigmas, deltas, colors):
        alpha = 1.0 - math.exp(-s * d)
        w = trans * alpha
        out = [o + w * ci for o, ci in zip(out, c)]
        opacity += w
        trans *= 1.0 - alpha
    return out, opacity


def _flipped_weights(sigma, delta):
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    acc = np.cumsum(tau[..., ::-1], axis=-1)[..., ::-1]
    trans = np.exp(-np.concatenate([acc[..., 1:], np.zeros_like(acc[..., :1])], axis=-1))
    return alpha * trans, trans


@contextlib.contextmanager
def mutated(mutation):
    if mutation is None:
        yield
        return
    if mutation != "flip_transmittance":
        raise ValueError(f"unknown mutation {mutation!r}")
    saved = render.composite_weights, decouple.composite_weights
    render.composite_weights = decouple.composite_weights = _flipped_weights
    try:
        yield
    finally:
        render.composite_weights, decouple.composite_weights = saved


def _random_rays(rng, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return render.Rays(np.zeros((n, 3)) - 2.0 * d, d, np.full(n, 1.0), np.full(n, 3.0))


def _blob_field():
    def density(x):
        return 30.0 * np.exp(-np.sum(x * x, axis=1) / 0.1)

    def grad(x):
        return (-2.0 / 0.1) * density(x)[:, None] * x

    def albedo(x):
        return 0.5 + 0.4 * np.tanh(x)

    return AnalyticField(density, grad, albedo, name="blob")


def check_compositing_oracle(rng):
    field = _blob_field()
    rays = _random_rays(rng, 200)
    res = render.render_single_layer(field, rays, 16, stratified=True, rng=rng)
    err = 0.0
    samples = res.layer.samples
    for r in range(len(rays)):
        c, a = scalar_composite(res.layer.sigma[r], samples.delta[r], res.layer.rgb[r])
        err = max(err, np.max(np.abs(res.color[r] - c)), abs(res.opacity[r] - a))
    return err < 1e-12, f"max abs error {err:.3e}"


def check_opacity_bound(rng):
    field = _blob_field()
    res = render.render_single_layer(field, _random_rays(rng, 200), 32)
    top = float(res.opacity.max())
    return bool(np.all(res.opacity <= 1.0 + 1e-12) and np.all(res.weights >= 0)), f"max opacity {top:.6f}"


def check_single_layer_fusion(rng):
    field = _blob_field()
    rays = _random_rays(rng, 100)
    a = render.render_single_layer(field, rays, 32)
    ok = True
    for mode in (render.PER_LAYER, render.FUSED):
        b = render.render_fused([field], rays, 32, mode=mode)
        ok &= np.array_equal(a.color, b.color)
    return bool(ok), "single-layer fusion bit-identical"


def check_disjoint_union(rng):
    from .scene import build_scene

    scene = build_scene()
    rays = _random_rays(rng, 200)
    body, cloth = scene.analytic

    def union_density(x):
        return body.density(x) + cloth.density(x)

    def union_albedo(x):
        return np.where((body.density(x) > 0)[:, None], body.albedo_fn(x), cloth.albedo_fn(x))

    union = AnalyticField(union_density, lambda x: body.density_grad(x) + cloth.density_grad(x), union_albedo)
    a = render.render_fused(scene.layers, rays, 64, mode=render.FUSED)
    b = render.render_single_layer(union, rays, 64)
    err = float(np.max(np.abs(a.color - b.color)))
    return err < 1e-6, f"max abs difference {err:.3e}"


def _field_grad_check(rng):
    f = LayerField(hidden=(8, 8), num_bands=2, seed=3)
    rays = _random_rays(rng, 6)
    samples = render.RaySamples.from_rays(rays, 8)
    g = rng.normal(size=(6, 3))

    def loss(p):
        h = f.copy()
        h.params = p
        return float(np.sum(render.render_single_layer(h, rays, samples=samples).color * g))

    analytic = render.render_single_layer(f, rays, samples=samples).backward(d_color=g)["field"]
    idx = rng.choice(f.n_params, 30, replace=False)
    num = central_difference(loss, f.params, 1e-6, idx)
    err = relative_error(analytic[idx], num)
    return err < 1e-3, f"relative error {err:.2e}"


def check_render_gradient(rng):
    return _field_grad_check(rng)


def check_perfect_denoiser(rng):
    from .guidance import MockScoreBackend, sds_image_gradient

    x = rng.random((8, 8, 3))
    g = sds_image_gradient(MockScoreBackend(), x, "p", rng=rng)
    return bool(np.all(g == 0.0)), "residual exactly zero"


def check_warp_identity(rng):
    from .proxy import ProxyWarp

    v = rng.normal(size=(30, 3))
    x = rng.normal(size=(50, 3))
    ok = np.array_equal(ProxyWarp(v, np.zeros_like(v)).canonical(x), x)
    o0 = np.array([0.1, -0.2, 0.05])
    shifted = ProxyWarp(v, np.tile(o0, (30, 1))).canonical(x)
    ok &= np.allclose(shifted, x - o0, atol=1e-12)
    return bool(ok), "zero offsets identity, uniform offsets translate"


def check_region_partition(rng):
    from .proxy import REGIONS, synth_humanoid

    mesh = synth_humanoid()
    masks = mesh.region_masks()
    total = sum(m.astype(int) for m in masks.values())
    ok = np.all(total == 1) and set(masks) <= set(REGIONS)
    return bool(ok), f"{len(masks)} regions over {mesh.n_vertices} vertices"


def check_checkpoint_roundtrip(rng):
    from .io import Checkpoint, field_checkpoint

    f = LayerField(hidden=(8, 8), num_bands=2, seed=int(rng.integers(1 << 30)))
    data = field_checkpoint(f).to_bytes()
    return Checkpoint.from_bytes(data).to_bytes() == data, "save/load/save byte-identical"


def check_sh_identity(rng):
    field = _blob_field()
    rays = _random_rays(rng, 50)
    a = render.render_single_layer(field, rays, 32)
    b = render.render_single_layer(field, rays, 32, sh=render.SHLighting())
    return bool(np.array_equal(a.color, b.color)), "identity SH leaves colour unchanged"


CHECKS = [
    ("render.compositing_oracle", "oracle", check_compositing_oracle),
    ("render.opacity_bound", "oracle", check_opacity_bound),
    ("render.single_layer_fusion", "oracle", check_single_layer_fusion),
    ("render.disjoint_union", "oracle", check_disjoint_union),
    ("render.gradient", "gradients", check_render_gradient),
    ("render.sh_identity", "sh", check_sh_identity),
    ("guidance.perfect_denoiser", "guidance", check_perfect_denoiser),
    ("proxy.warp_identity", "proxy", check_warp_identity),
    ("proxy.region_partition", "proxy", check_region_partition),
    ("io.checkpoint_roundtrip", "io", check_checkpoint_roundtrip),
]


def run_suite(mutation=None, seed=0):
    """Run every check; returns a JSON-ready report."""
    results = []
    with mutated(mutation):
        for check_id, suite, fn in CHECKS:
            rng = np.random.default_rng(seed)
            start = time.perf_counter()
            try:
                passed, detail = fn(rng)
            except Exception as exc:  # a crashing check is a failing check
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append({"id": check_id, "suite": suite, "passed": bool(passed), "detail": detail,
                            "seconds": round(time.perf_counter() - start, 3)})
    suites = {}
    for r in results:
        suites[r["suite"]] = suites.get(r["suite"], True) and r["passed"]
    return {"mutation": mutation, "passed": all(r["passed"] for r in results), "suites": suites,
            "checks": results}
