import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import fd_gradient, rel_err
from layervol.errors import ConfigError
from layervol.fields import AnalyticField, LayerField
from layervol.proxy import (CLOTH_EXCLUDED, MATCHING_WEIGHTS, REGIONS, MeshProxy, ProxyWarp,
                            VertexOffsetModel, WarpedField, huber, match_loss, matching_stage_loss,
                            nerf_cloth_mask, offset_reg_loss, rasterize_silhouette, read_obj,
                            silhouette_iou, sphere_mesh, synth_humanoid, total_loss,
                            uncovered_body_mass, warp_query, write_obj)
from layervol.render import generate_rays, orbit_camera, render_single_layer
from oracles import huber_scalar, norm_scalar


def front_camera(res=64, fov=40.0, radius=3.0):
    return orbit_camera(0.0, 0.0, radius, width=res, height=res, fov_deg=fov)


# ---------------------------------------------------------------- humanoid


def test_canonical_humanoid_deterministic():
    a, b = synth_humanoid(), synth_humanoid()
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
    assert a.n_vertices == synth_humanoid((1.2, 0.8, 1.1)).n_vertices


def test_shape_scales_axis():
    base, tall = synth_humanoid(), synth_humanoid((1.0, 1.5, 1.0))
    np.testing.assert_allclose(tall.vertices[:, 1], 1.5 * base.vertices[:, 1], rtol=1e-14)
    np.testing.assert_array_equal(tall.vertices[:, [0, 2]], base.vertices[:, [0, 2]])


def test_region_masks_partition_vertices():
    mesh = synth_humanoid()
    masks = mesh.region_masks()
    assert set(masks) == set(REGIONS)
    assert np.all(sum(m.astype(int) for m in masks.values()) == 1)


def test_humanoid_is_watertight():
    mesh = synth_humanoid()
    edges = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_cloth_subset_excludes_extremities():
    mesh = synth_humanoid()
    used = np.unique(mesh.cloth_faces())
    assert not np.any(np.isin(mesh.labels[used], CLOTH_EXCLUDED))
    assert set(mesh.labels[mesh.cloth_vertex_index()]) == {"torso", "arm", "leg"}


@pytest.mark.parametrize("body_shape", [(0.4, 1, 1), (1, 2.5, 1), (1, 1, np.nan)])
def test_out_of_range_shape_rejected(body_shape):
    with pytest.raises(ConfigError):
        synth_humanoid(body_shape)


def test_pose_moves_only_the_posed_limb():
    rest = synth_humanoid()
    posed = synth_humanoid(pose={"l_shoulder": [0.0, 0.0, 0.8]})
    moved = np.any(rest.vertices != posed.vertices, axis=1)
    assert moved.any() and np.all(np.isfinite(posed.vertices))
    assert not np.any(moved & (rest.labels == "leg"))
    with pytest.raises(ConfigError):
        synth_humanoid(pose={"tail": [0, 0, 1]})


def test_obj_roundtrip_with_labels(tmp_path):
    mesh = synth_humanoid((1.1, 0.9, 1.0))
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.array_equal(back.labels, mesh.labels)


def test_invalid_faces_rejected():
    with pytest.raises(ConfigError):
        MeshProxy(np.zeros((3, 3)), [[0, 1, 3]], ["torso"] * 3)


# ---------------------------------------------------------------- rasterizer


def test_empty_mesh_gives_zeros():
    sil = rasterize_silhouette(np.zeros((0, 3)), np.zeros((0, 3), int), front_camera(16))
    assert sil.image.shape == (16, 16) and np.all(sil.image == 0)


def test_large_quad_covers_frustum():
    s = 10.0
    quad = np.array([[-s, -s, 0], [s, -s, 0], [s, s, 0], [-s, s, 0]], dtype=float)
    sil = rasterize_silhouette(quad, [[0, 1, 2], [0, 2, 3]], front_camera(32))
    assert sil.image.min() > 0.999


def test_sphere_area_matches_projected_disk():
    r, dist, res, fov = 0.5, 3.0, 256, 40.0
    cam = front_camera(res, fov, dist)
    mesh = sphere_mesh(r, rings=32, segments=96)
    sil = rasterize_silhouette(mesh.vertices, mesh.faces, cam, sharpness=50.0)
    # the tangent cone from the eye projects to a disk of radius f r / sqrt(d^2 - r^2)
    rho = cam.focal * r / np.sqrt(dist ** 2 - r ** 2)
    assert abs(sil.image.sum() - np.pi * rho ** 2) / (np.pi * rho ** 2) < 0.02


def test_mesh_behind_camera_is_empty(caplog):
    mesh = sphere_mesh(0.3, center=(0.0, 0.0, 5.0), rings=4, segments=8)
    with caplog.at_level(logging.WARNING):
        sil = rasterize_silhouette(mesh.vertices, mesh.faces, front_camera(16))
    assert np.all(sil.image == 0) and "behind the camera" in caplog.text


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.1, 0.6), st.floats(5.0, 100.0))
def test_silhouette_values_in_unit_interval(cx, cy, radius, sharp):
    mesh = sphere_mesh(radius, center=(cx, cy, 0.0), rings=3, segments=8)
    img = rasterize_silhouette(mesh.vertices, mesh.faces, front_camera(16), sharpness=sharp).image
    assert np.all((img >= 0) & (img <= 1))


def test_rejects_nonpositive_sharpness():
    with pytest.raises(ConfigError):
        rasterize_silhouette(np.zeros((3, 3)), [[0, 1, 2]], front_camera(8), sharpness=0.0)


def test_match_loss_vertex_gradient_on_small_mesh(rng):
    mesh = sphere_mesh(0.5, rings=2, segments=6)
    assert mesh.n_vertices == 20
    verts = mesh.vertices + rng.normal(scale=0.02, size=mesh.vertices.shape)
    cam = orbit_camera(20.0, 10.0, 3.0, width=64, height=64, fov_deg=40.0)
    mask_cloth = np.clip(rng.random((64, 64)) * 0.3, 0, 1)
    body = rasterize_silhouette(1.1 * mesh.vertices, mesh.faces, cam).image

    def loss(v):
        sil = rasterize_silhouette(v.reshape(-1, 3), mesh.faces, cam)
        return match_loss(mask_cloth, sil.image, body)[0]

    sil = rasterize_silhouette(verts, mesh.faces, cam)
    _, g = match_loss(mask_cloth, sil.image, body)
    analytic = sil.backward(g["proxy_cloth"])
    num = fd_gradient(loss, verts.ravel(), 1e-3)
    assert rel_err(analytic.ravel(), num) < 5e-3


def test_excluded_regions_receive_no_gradient():
    mesh = synth_humanoid()
    cam = front_camera(48, 30.0)
    sil = rasterize_silhouette(mesh.vertices, mesh.cloth_faces(), cam)
    grad = sil.backward(np.ones_like(sil.image))
    excluded = np.isin(mesh.labels, CLOTH_EXCLUDED)
    assert np.all(grad[excluded] == 0)
    assert np.abs(grad[~excluded]).sum() > 0


# ---------------------------------------------------------------- field masks


def test_nerf_mask_of_empty_field():
    assert np.all(nerf_cloth_mask(AnalyticField.constant(0.0), front_camera(16)) == 0)


def test_nerf_mask_of_opaque_ball():
    ball = AnalyticField(lambda x: np.where(np.linalg.norm(x, axis=1) < 0.4, 200.0, 0.0),
                         lambda x: np.zeros((len(x), 3)), lambda x: np.full((len(x), 3), 0.5))
    mask = nerf_cloth_mask(ball, front_camera(32))
    assert mask[14:18, 14:18].min() > 0.99


def test_nerf_mask_is_render_opacity():
    f = LayerField(hidden=(8,), num_bands=2, seed=3, density_gain=3.0)
    cam = front_camera(12)
    ref = render_single_layer(f, generate_rays(cam), 64).opacity.reshape(12, 12)
    assert np.array_equal(nerf_cloth_mask(f, cam), ref)


# ---------------------------------------------------------------- matching losses


def test_match_loss_examples(rng):
    body = rng.integers(0, 5, (8, 8)) / 4.0
    cloth = body * (rng.random((8, 8)) < 0.5) / 2.0
    assert match_loss(cloth, body - cloth, body)[0] == 0
    assert match_loss(np.full((4, 4), 0.5), np.zeros((4, 4)), np.zeros((4, 4)))[0] == pytest.approx(0.125)
    with pytest.raises(ConfigError):
        match_loss(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((5, 5)))


@given(arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)), st.booleans())
def test_match_loss_matches_scalar(images, one_sided):
    a, b, c = images * np.array([2.0, 1.0, 1.0])[:, None, None]
    value, _ = match_loss(a, b, c, one_sided=one_sided)
    if one_sided:
        res = [max(0.0, z - min(1.0, x + y)) for x, y, z in zip(a.ravel(), b.ravel(), c.ravel())]
    else:
        res = [x + y - z for x, y, z in zip(a.ravel(), b.ravel(), c.ravel())]
    assert value == pytest.approx(sum(huber_scalar(r) for r in res) / a.size, abs=1e-14)


@pytest.mark.parametrize("one_sided", [False, True])
def test_match_loss_input_gradients(rng, one_sided):
    a, b, c = rng.random((3, 5, 5)) * np.array([1.5, 1.0, 1.2])[:, None, None]
    _, g = match_loss(a, b, c, one_sided)
    for key, arr, wrap in (("mask_cloth", a, lambda x: (x, b, c)), ("proxy_cloth", b, lambda x: (a, x, c)),
                           ("proxy_body", c, lambda x: (a, b, x))):
        num = fd_gradient(lambda p: match_loss(*wrap(p.reshape(5, 5)), one_sided)[0], arr.ravel(), 1e-6)
        np.testing.assert_allclose(g[key].ravel(), num, atol=1e-8)


def test_huber_branches():
    v, g = huber(np.array([0.5, 2.0, -3.0]))
    np.testing.assert_allclose(v, [0.125, 1.5, 2.5])
    np.testing.assert_allclose(g, [0.5, 1.0, -1.0])


def test_offset_reg_examples(rng):
    assert offset_reg_loss(np.zeros((5, 3)))[0] == 0
    assert offset_reg_loss([[3.0, 4.0, 0.0]])[0] == pytest.approx(5.0)
    o = rng.normal(size=(7, 3))
    assert offset_reg_loss(o)[0] == pytest.approx(norm_scalar(o.ravel()) / 7, rel=1e-14)
    _, g = offset_reg_loss(o)
    num = fd_gradient(lambda p: offset_reg_loss(p.reshape(7, 3))[0], o.ravel(), 1e-6)
    np.testing.assert_allclose(g.ravel(), num, atol=1e-9)


def test_stage_and_total_losses():
    assert MATCHING_WEIGHTS == (10.0, 1.0)
    assert matching_stage_loss(0.0, 0.0) == 0
    assert matching_stage_loss(0.5, 2.0) == pytest.approx(7.0)
    assert total_loss(0.0, 0.0, 0.0) == 0
    assert total_loss(1.0, 2.0, 3.5) == 6.5


def test_uncovered_mass_and_iou():
    body = np.array([[1.0, 1.0], [0.0, 0.0]])
    cloth = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert uncovered_body_mass(cloth, np.zeros((2, 2)), body) == 1.0
    assert silhouette_iou(cloth, body) == pytest.approx(1 / 3)


def test_matching_objective_gradient_through_offset_model(rng):
    mesh = sphere_mesh(0.5, rings=2, segments=6)
    cam = orbit_camera(20.0, 10.0, 3.0, width=64, height=64, fov_deg=40.0)
    body = rasterize_silhouette(1.2 * mesh.vertices, mesh.faces, cam).image
    mask = np.zeros((64, 64))
    model = VertexOffsetModel(cap=0.3, hidden=(6,), num_bands=1, seed=0)
    model.params = model.params + rng.normal(scale=0.1, size=model.n_params)

    def objective(p):
        m = VertexOffsetModel.from_descriptor(model.descriptor(), p)
        o = m(mesh.vertices)
        sil = rasterize_silhouette(mesh.vertices + o, mesh.faces, cam)
        return matching_stage_loss(match_loss(mask, sil.image, body)[0], offset_reg_loss(o)[0])

    o, cache = model.forward(mesh.vertices)
    sil = rasterize_silhouette(mesh.vertices + o, mesh.faces, cam)
    _, g = match_loss(mask, sil.image, body)
    d_o = MATCHING_WEIGHTS[0] * sil.backward(g["proxy_cloth"]) + MATCHING_WEIGHTS[1] * offset_reg_loss(o)[1]
    analytic = model.backward(cache, d_o)
    assert rel_err(analytic, fd_gradient(objective, model.params, 1e-4)) < 5e-3


# ---------------------------------------------------------------- offset model


def test_offset_model_starts_at_zero(rng):
    assert np.all(VertexOffsetModel(seed=3)(rng.normal(size=(20, 3))) == 0)


@given(st.floats(0.01, 1.0), st.floats(0.1, 100.0), st.integers(0, 1000))
def test_offsets_respect_cap(cap, scale, seed):
    model = VertexOffsetModel(cap=cap, hidden=(8,), num_bands=2, seed=seed)
    model.params = np.random.default_rng(seed).normal(scale=scale, size=model.n_params)
    o = model(np.random.default_rng(seed + 1).normal(size=(30, 3)))
    assert np.all(np.isfinite(o)) and np.all(np.linalg.norm(o, axis=1) < cap)


# ---------------------------------------------------------------- warp


def _field():
    return LayerField(hidden=(8,), num_bands=2, seed=5, role="clothing", layer_index=1)


def test_zero_offsets_are_identity(rng):
    v = rng.normal(size=(40, 3))
    x = rng.normal(size=(25, 3))
    f = _field()
    for a, b in zip(warp_query(f, v, np.zeros_like(v), x), f.query(x)):
        assert np.array_equal(a, b)


def test_uniform_offset_is_rigid_translation(rng):
    v = rng.normal(size=(40, 3))
    x = rng.normal(size=(25, 3))
    o0 = np.array([0.05, -0.1, 0.2])
    f = _field()
    for a, b in zip(warp_query(f, v, np.tile(o0, (40, 1)), x), f.query(x - o0)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@given(arrays(np.float64, (12, 3), elements=st.floats(-0.5, 0.5)), st.integers(0, 1000))
def test_warp_displacement_bounded_by_largest_offset(offsets, seed):
    r = np.random.default_rng(seed)
    warp = ProxyWarp(r.normal(size=(12, 3)), offsets)
    x = r.normal(size=(30, 3))
    moved = np.linalg.norm(warp.canonical(x) - x, axis=1)
    assert np.all(moved <= np.linalg.norm(offsets, axis=1).max() + 1e-12)


def test_warp_jacobian_matches_differences(rng):
    warp = ProxyWarp(rng.normal(size=(30, 3)), rng.normal(scale=0.1, size=(30, 3)))
    x = rng.normal(size=(6, 3))
    jac = warp.jacobian(x)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        num = (warp.canonical(x + e) - warp.canonical(x - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], num, atol=1e-5)


def test_warped_field_gradients_flow_to_canonical_field(rng):
    v = rng.normal(size=(20, 3))
    warped = WarpedField(_field(), ProxyWarp(v, rng.normal(scale=0.1, size=(20, 3))))
    x = rng.normal(size=(5, 3))
    out, cache = warped.forward(x)
    g = warped.backward(cache, d_sigma=np.ones(5))
    expected = warped.field.query_with_param_grad(warped.warp.canonical(x), d_sigma=np.ones(5))
    np.testing.assert_allclose(g, expected)


def test_warp_requires_one_offset_per_vertex(rng):
    with pytest.raises(ConfigError):
        ProxyWarp(rng.normal(size=(5, 3)), np.zeros((4, 3)))
