import numpy as np
import pytest

from layervol.errors import SceneSpecError
from layervol.render import generate_rays, orbit_camera, render_fused, render_single_layer
from layervol.scene import (HUMANOID, AnalyticLayer, SceneSpec, build_scene, mismatch_scenario,
                            render_reference, scene_cameras, supports_disjoint)


def test_sphere_in_shell_supports_are_disjoint(sphere_scene):
    assert sphere_scene.disjoint
    assert supports_disjoint(sphere_scene.analytic, 1.0, n_points=100_000, seed=5)


def test_overlapping_request_rejected():
    with pytest.raises(SceneSpecError):
        build_scene(SceneSpec(inner_radius=0.4, shell_inner=0.35))
    with pytest.raises(SceneSpecError):
        SceneSpec.from_dict({"kind": "sphere_in_shell", "colour": 1})


def test_densities_vanish_outside_their_shells(sphere_scene):
    body, cloth = sphere_scene.analytic
    r = np.linspace(0.0, 0.95, 400)
    x = np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=1)
    assert np.all(body.density(x)[r > 0.3] == 0)
    assert np.all(cloth.density(x)[(r < 0.35) | (r > 0.45)] == 0)
    assert body.density(x)[0] > 0 and cloth.density(x)[np.argmin(abs(r - 0.4))] > 0


def test_analytic_density_gradient_matches_differences(sphere_scene, rng):
    x = rng.uniform(-0.5, 0.5, size=(50, 3))
    for layer in sphere_scene.analytic:
        g = layer.density_grad(x)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            num = (layer.density(x + e) - layer.density(x - e)) / (2 * h)
            np.testing.assert_allclose(g[:, k], num, rtol=1e-4, atol=1e-3)


def test_zero_density_scene_is_black():
    spec = SceneSpec(body_amplitude=0.0, cloth_amplitude=0.0)
    scene = build_scene(spec)
    ref = render_reference(scene, scene_cameras(spec, 1, 16))[0]
    assert np.all(ref["composite"] == 0) and np.all(ref["opacity"] == 0)


def test_fused_scene_equals_union_render(sphere_scene):
    cam = orbit_camera(30.0, 10.0, 3.0, width=24, height=24, fov_deg=30.0)
    rays = generate_rays(cam, bound=1.0)
    fused = render_fused(sphere_scene.layers, rays, 64, mode="fused")
    from layervol.fields import AnalyticField

    body, cloth = sphere_scene.analytic
    union = AnalyticField(lambda x: body.density(x) + cloth.density(x),
                          lambda x: body.density_grad(x) + cloth.density_grad(x),
                          lambda x: np.where((body.density(x) > 0)[:, None], body.albedo_fn(x), cloth.albedo_fn(x)))
    single = render_single_layer(union, rays, 64)
    assert np.max(np.abs(fused.color - single.color)) < 1e-6


def test_reference_renders_are_deterministic(sphere_scene):
    cams = scene_cameras(sphere_scene.spec, 2, 16)
    a, b = render_reference(sphere_scene, cams), render_reference(sphere_scene, cams)
    for u, v in zip(a, b):
        for key in u:
            assert np.array_equal(u[key], v[key])


def test_humanoid_scene_aligns_with_its_proxy():
    scene = build_scene(SceneSpec(kind=HUMANOID))
    assert scene.disjoint
    v = scene.proxy.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    body, cloth = scene.analytic
    # garment density sits inside the proxy's bounding box, around the torso
    x = np.random.default_rng(0).uniform(lo - 0.2, hi + 0.2, size=(20000, 3))
    inside = cloth.density(x) > 0
    assert inside.any()
    assert np.all((x[inside] >= lo - 0.1) & (x[inside] <= hi + 0.1))
    assert scene.skeleton is not None


def test_mismatch_target_is_scaled_source():
    scene, target = mismatch_scenario()
    np.testing.assert_allclose(target.vertices[:, 0], 1.3 * scene.proxy.vertices[:, 0], rtol=1e-12)
    np.testing.assert_array_equal(target.faces, scene.proxy.faces)


def test_custom_layer_shapes():
    layer = AnalyticLayer("ellipsoid", amplitude=10.0, falloff=0.01, radii=(0.2, 0.4, 0.2))
    assert layer.density(np.array([[0.0, 0.35, 0.0]]))[0] > 0
    assert layer.density(np.array([[0.35, 0.0, 0.0]]))[0] == 0
    with pytest.raises(SceneSpecError):
        AnalyticLayer("torus", amplitude=1.0)
    with pytest.raises(SceneSpecError):
        AnalyticLayer("shell", falloff=0.0)
