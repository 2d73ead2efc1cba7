import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layervol.errors import ConfigError, MissingPrerequisiteError
from layervol.fields import LayerField
from layervol.guidance import BODY_WEIGHTS, MockScoreBackend
from layervol.io import Checkpoint
from layervol.train import (LOG_COLUMNS, PREREQUISITES, AdamState, StageConfig, adam_step, read_log,
                            run_stage, write_log)
from oracles import adam_scalar

TINY = dict(hidden=(8,), num_bands=2, resolution=16, rays_per_view=32, n_samples=12, batch_size=1)


def tiny(stage, **kw):
    extra = dict(sparsity_points=64, eval_every=0, eval_views=1, eval_stride=4) if stage == "clothing" else {}
    return StageConfig.desk(stage, **{**TINY, **extra, **kw})


# ---------------------------------------------------------------- Adam


def test_adam_matches_scalar_reference(rng):
    theta = rng.normal(size=4)
    grads = rng.normal(size=(25, 4))
    state = AdamState.for_params(theta, 0.01)
    p = theta.copy()
    for g in grads:
        p = adam_step(state, p, g)
    for i in range(4):
        ref = adam_scalar(theta[i], grads[:, i], 0.01, 0.9, 0.99, 1e-8)
        assert p[i] == pytest.approx(ref, rel=1e-13, abs=1e-15)


def test_adam_defaults():
    s = AdamState.for_params(np.zeros(3), 1e-3)
    assert (s.beta1, s.beta2, s.eps) == (0.9, 0.99, 1e-8)


def test_zero_gradient_leaves_parameters(rng):
    p = rng.normal(size=6)
    state = AdamState.for_params(p, 0.1)
    assert np.array_equal(adam_step(state, p, np.zeros(6)), p)


def test_first_step_moves_each_coordinate_by_lr(rng):
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    out = adam_step(AdamState.for_params(p, 0.01), p, g)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(out, p - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-14)


def test_non_finite_gradient_is_skipped(rng):
    p = rng.normal(size=3)
    state = AdamState.for_params(p, 0.1)
    out = adam_step(state, p, np.array([1.0, np.nan, 0.0]))
    assert np.array_equal(out, p)
    assert state.skipped == 1 and state.step == 0 and np.all(state.m == 0)


def test_adam_shape_mismatch():
    with pytest.raises(ConfigError):
        adam_step(AdamState.for_params(np.zeros(3), 0.1), np.zeros(3), np.zeros(4))


def test_adam_minimises_quadratic():
    p = np.array([3.0, -2.0])
    state = AdamState.for_params(p, 0.05)
    for _ in range(2000):
        p = adam_step(state, p, 2 * p)
    assert np.linalg.norm(p) < 1e-2


def test_adam_is_deterministic(rng):
    grads = rng.normal(size=(100, 8))
    runs = []
    for _ in range(2):
        p = np.ones(8)
        s = AdamState.for_params(p, 1e-2)
        for g in grads:
            p = adam_step(s, p, g)
        runs.append(p)
    assert np.array_equal(*runs)


# ---------------------------------------------------------------- configuration


def test_desk_presets_carry_the_stage_weights():
    assert StageConfig.desk("body").weights == BODY_WEIGHTS
    assert StageConfig.desk("clothing").weights == (1.0, 1.0, 0.05, 2.0)
    assert StageConfig.desk("clothing").alternation == (1, 6)
    m = StageConfig.desk("matching")
    assert (m.weights, m.iterations, m.lr) == ((10.0, 1.0), 500, 1e-3)


def test_full_presets():
    for stage, its in (("body", 12000), ("clothing", 8000), ("matching", 3000)):
        c = StageConfig.full(stage)
        assert c.iterations == its and c.resolution == 512
    assert StageConfig.full("body").lr == 5e-5


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(iterations=-1), dict(weights=(1, 1)),
                                 dict(weights=(1, -1, 0)), dict(alternation=(0, 6)),
                                 dict(resolution=0)])
def test_invalid_stage_settings(bad):
    with pytest.raises(ConfigError):
        StageConfig.desk("body", **bad)


def test_unknown_stage():
    with pytest.raises(ConfigError):
        StageConfig.desk("hair")


def test_config_dict_roundtrip():
    c = StageConfig.desk("clothing", seed=4)
    assert StageConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        StageConfig.from_dict({**c.to_dict(), "bogus": 1})


# ---------------------------------------------------------------- stages


def test_prerequisites_are_named(sphere_scene):
    assert PREREQUISITES["clothing"] == ("body",)
    with pytest.raises(MissingPrerequisiteError) as err:
        run_stage(tiny("clothing", iterations=1), sphere_scene, {})
    assert err.value.stage == "body" and "body" in str(err.value)
    with pytest.raises(MissingPrerequisiteError) as err:
        run_stage(tiny("matching", iterations=1), sphere_scene, {"body": sphere_scene.body})
    assert err.value.stage == "clothing"


def test_zero_iterations_return_the_initial_field(sphere_scene):
    init = LayerField(hidden=(8,), num_bands=2, seed=11)
    result = run_stage(tiny("body", iterations=0), sphere_scene, {"init": init})
    assert result.log == []
    assert np.array_equal(result.trained["body"].params, init.params)


def test_clothing_cycle_is_one_cloth_then_six_composite(sphere_scene):
    result = run_stage(tiny("clothing", iterations=14), sphere_scene, {"body": sphere_scene.body})
    kinds = [row["step_kind"] for row in result.log]
    assert kinds == (["cloth"] + ["composite"] * 6) * 2


def test_clothing_stage_leaves_underlayers_untouched(sphere_scene):
    body = LayerField(hidden=(8,), num_bands=2, seed=2)
    before = body.params.copy()
    result = run_stage(tiny("clothing", iterations=3), sphere_scene, {"body": body})
    assert np.array_equal(body.params, before)
    assert set(result.checkpoints) == {"clothing"}
    assert result.checkpoints["clothing"].layer_index == 1


def test_body_stage_only_writes_the_body(sphere_scene):
    result = run_stage(tiny("body", iterations=2, use_sh=True), sphere_scene)
    assert set(result.checkpoints) == {"body", "sh"}
    assert result.checkpoints["body"].role == "body"


def test_log_rows_carry_every_column(sphere_scene, tmp_path):
    result = run_stage(tiny("clothing", iterations=7), sphere_scene, {"body": sphere_scene.body},
                       log_path=tmp_path / "log.csv")
    rows = read_log(tmp_path / "log.csv")
    assert len(rows) == 7 and tuple(rows[0]) == LOG_COLUMNS
    cloth, comp = rows[0], rows[1]
    assert math.isnan(float(cloth["sds_comp"])) and not math.isnan(float(cloth["sds_cloth"]))
    assert math.isnan(float(comp["sds_cloth"])) and not math.isnan(float(comp["sds_comp"]))
    assert math.isnan(float(cloth["match"]))
    assert float(rows[3]["loss_total"]) == pytest.approx(result.log[3]["loss_total"], rel=1e-15)


def test_write_log_is_exact(tmp_path):
    rows = [{c: 0.1 + i for i, c in enumerate(LOG_COLUMNS)}]
    write_log(tmp_path / "a.csv", rows)
    back = read_log(tmp_path / "a.csv")[0]
    assert all(float(back[c]) == rows[0][c] for c in LOG_COLUMNS)


def test_failing_guidance_skips_but_continues(sphere_scene):
    class Flaky(MockScoreBackend):
        calls = 0

        def predict_noise(self, *args, **kwargs):
            Flaky.calls += 1
            if Flaky.calls % 2:
                from layervol.errors import GuidanceError
                raise GuidanceError("timeout")
            return super().predict_noise(*args, **kwargs)

    result = run_stage(tiny("body", iterations=4), sphere_scene, backend=Flaky())
    assert len(result.log) == 4 and result.metrics["skipped"] == 2


@pytest.mark.parametrize("stage", ["body", "clothing"])
def test_identical_seed_gives_identical_checkpoint(sphere_scene, stage, tmp_path):
    inputs = {"body": sphere_scene.body} if stage == "clothing" else {}
    blobs, logs = [], []
    for k in range(2):
        r = run_stage(tiny(stage, iterations=5, seed=3), sphere_scene, inputs, log_path=tmp_path / f"{k}.csv")
        blobs.append(r.checkpoints[stage].to_bytes())
        logs.append((tmp_path / f"{k}.csv").read_bytes())
    assert blobs[0] == blobs[1] and logs[0] == logs[1]
    other = run_stage(tiny(stage, iterations=5, seed=4), sphere_scene, inputs)
    assert other.checkpoints[stage].to_bytes() != blobs[0]


def test_body_desk_run_reduces_photometric_loss(sphere_scene):
    result = run_stage(tiny("body", iterations=60, hidden=(16, 16), num_bands=3, rays_per_view=128,
                            n_samples=24, lr=1e-2, weights=(1.0, 0.0, 0.0)), sphere_scene)
    losses = np.array([row["sds_body"] for row in result.log])
    assert losses[-10:].mean() < 0.5 * losses[:10].mean()


@given(st.integers(0, 30))
def test_checkpoint_of_stage_roundtrips(seed):
    f = LayerField(hidden=(4,), num_bands=1, seed=seed)
    from layervol.io import field_checkpoint
    ck = field_checkpoint(f)
    assert Checkpoint.from_bytes(ck.to_bytes()).to_bytes() == ck.to_bytes()
