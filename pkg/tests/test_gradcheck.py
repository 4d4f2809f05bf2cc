import numpy as np
import pytest

from edgeseg import tensor as T
from edgeseg.gradcheck import (
    GradCheckReport,
    GroupResult,
    gradient_check,
    model_case,
    relative_error,
    run_gradcheck,
)
from edgeseg.models import ModelConfig
from edgeseg.tensor import ConvParams
from edgeseg.train import cross_entropy_loss

from oracles import central_difference


def test_quadratic():
    f = lambda p: (float(np.sum(p["x"] ** 2)), {"x": 2 * p["x"]})
    rep = gradient_check(f, {"x": np.array([1.0])}, n_coords=None)
    assert rep.passed and rep.coords == 1 and rep.max_rel_err < 1e-7
    assert central_difference(lambda v: v * v, 1.0) == pytest.approx(2.0, abs=1e-7)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


def test_conv_and_cross_entropy(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    target = rng.integers(0, 3, size=(1, 6, 6))
    p = ConvParams((3, 3), 1, 1)

    def f(params):
        y = T.conv2d(x, params["w"], p=p)
        loss, dy = cross_entropy_loss(y, target)
        (_, dw, _) = T.vjp(T.conv2d, [x, params["w"], None], dy, p=p)
        return loss, {"w": dw}

    rep = gradient_check(f, {"w": rng.standard_normal((3, 2, 3, 3))}, n_coords=None)
    assert rep.passed and rep.coords == 54


def test_wrong_gradient_fails(rng):
    f = lambda p: (float(np.sum(np.sin(p["x"]))), {"x": np.cos(p["x"]) * 1.01})
    rep = gradient_check(f, {"x": rng.standard_normal(10)}, n_coords=None)
    assert not rep.passed and rep.groups[0].skipped == 0
    assert rep.lines()[0].startswith("FAIL")


def test_wrong_gradient_in_one_group(rng):
    def f(p):
        return float(np.sum(p["a"] ** 2) + np.sum(p["b"] ** 3)), {"a": 2 * p["a"], "b": 2 * p["b"] ** 2}

    rep = gradient_check(f, {"a": rng.standard_normal(4), "b": rng.standard_normal(4) + 2}, n_coords=8)
    assert [g.passed for g in rep.groups] == [True, False]


def test_kink_is_resampled_not_failed():
    # x[0] sits within one step of the |x| kink, so both stencils straddle it
    x = np.array([3e-6, 1.0, -2.0, 0.5])
    f = lambda p: (float(np.sum(np.abs(p["x"]))), {"x": np.sign(p["x"])})
    rep = gradient_check(f, {"x": x}, n_coords=4)
    assert rep.groups[0].skipped == 1 and rep.groups[0].coords == 3
    assert not rep.passed  # one fewer coordinate than requested
    assert any("only 3 of 4" in line for line in rep.lines())


def test_every_group_visited(rng):
    params = {f"p{i}": rng.standard_normal(3) for i in range(6)}
    f = lambda p: (float(sum(np.sum(v**2) for v in p.values())), {k: 2 * v for k, v in p.items()})
    rep = gradient_check(f, params, n_coords=2)
    assert len(rep.groups) == 6 and all(g.coords >= 1 for g in rep.groups)


def test_report_dict():
    rep = GradCheckReport("x", 1e-4, [GroupResult("w", 5, 1e-6, 1e-9, True)], required=5)
    d = rep.to_dict()
    assert d["passed"] and d["coords"] == 5 and d["groups"][0]["group"] == "w"


def test_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        gradient_check(lambda p: (0.0, {}), {"x": np.zeros(1)}, tolerance=0)


@pytest.mark.parametrize("target", ["ops", "blocks"])
def test_builtin_targets_pass(target):
    for rep in run_gradcheck(target, seed=1):
        assert rep.passed, "\n".join(rep.lines())


def test_unknown_target():
    with pytest.raises(ValueError, match="unknown gradcheck target"):
        run_gradcheck("everything")


def test_small_model_all_coordinates():
    # tiny baseline, every coordinate checked
    f, p = model_case(ModelConfig("unet", 2, base_channels=2, depth=1), seed=0, size=4, batch=2)
    rep = gradient_check(f, p, n_coords=None)
    assert rep.passed, "\n".join(rep.lines())
