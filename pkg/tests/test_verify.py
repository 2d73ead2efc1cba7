import numpy as np
import pytest

from layervol import render
from layervol.verify import CHECKS, mutated, run_suite


def test_suite_passes():
    report = run_suite()
    failed = [c for c in report["checks"] if not c["passed"]]
    assert not failed, failed
    assert len(report["checks"]) == len(CHECKS)
    assert len({c["id"] for c in report["checks"]}) == len(CHECKS)


def test_flipped_transmittance_is_caught():
    report = run_suite("flip_transmittance")
    assert not report["passed"]
    bad = {c["id"] for c in report["checks"] if not c["passed"]}
    assert "render.compositing_oracle" in bad


def test_mutation_is_undone():
    original = render.composite_weights
    with mutated("flip_transmittance"):
        assert render.composite_weights is not original
    assert render.composite_weights is original
    with pytest.raises(ValueError):
        with mutated("swap_colours"):
            pass


def test_flipped_weights_really_differ():
    sigma, delta = np.array([[1.0, 2.0, 3.0]]), np.ones((1, 3))
    good, _ = render.composite_weights(sigma, delta)
    with mutated("flip_transmittance"):
        bad, _ = render.composite_weights(sigma, delta)
    assert not np.allclose(good, bad)
