import numpy as np

from taillight import autodiff as ad
from taillight.autodiff import Tensor
from taillight.gradcheck import check_gradients, rel_error, run_suite


def test_rel_error_floor():
    assert rel_error(1.0, 1.0) == 0
    assert rel_error(2.0, 1.0) == 0.5
    assert rel_error(0.0, 1e-9) == 1e-9 / 1e-6


def test_detects_a_wrong_gradient():
    # an op with a deliberately broken backward must fail the check
    def bad_square(a):
        return ad._finish(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")

    t = {"x": Tensor(np.array([1.0, 2.0, -3.0]), requires_grad=True, dtype=np.float64)}
    res = check_gradients("bad", lambda p: ad.sum_(bad_square(p["x"])), t, 20, np.random.default_rng(0))
    assert not res.passed


def test_suite_covers_every_layer_type(tiny_cfg):
    results = run_suite(tiny_cfg, probes=20, seed=3)
    names = " ".join(r.name for r in results)
    for kind in ("conv2d", "fc", "lstm", "spatial", "temporal", "cross-entropy", "bootstrapped", "full model"):
        assert kind in names
    assert all(r.probes >= 20 for r in results)
    assert all(r.passed for r in results), [(r.name, r.max_rel_err) for r in results]
