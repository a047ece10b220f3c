import numpy as np
import pytest

from evolute import nn
from evolute.errors import ConfigError, TrainingError


def finite_difference_grads(mlp, x, loss_fn, h=1e-4):
    """Central-difference gradient of loss_fn(mlp.forward(x)) w.r.t. params and x."""
    grads = []
    for p in mlp.params():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn(mlp.forward(x)[0])
            flat[i] = orig - h
            lo = loss_fn(mlp.forward(x)[0])
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    gx = np.zeros_like(x)
    xflat = x.reshape(-1)
    gxflat = gx.reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + h
        hi = loss_fn(mlp.forward(x)[0])
        xflat[i] = orig - h
        lo = loss_fn(mlp.forward(x)[0])
        xflat[i] = orig
        gxflat[i] = (hi - lo) / (2 * h)
    return grads, gx


def relative_error(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


@pytest.mark.parametrize("widths,activation", [
    ([3, 5, 2], "identity"),
    ([3, 5, 2], "sigmoid"),
    ([4, 7, 6, 1], "identity"),
])
def test_backward_matches_finite_differences(widths, activation):
    rng = np.random.default_rng(0)
    mlp = nn.Mlp(widths, activation, rng=rng)
    x = rng.normal(size=(6, widths[0]))
    target = rng.normal(size=(6, widths[-1]))

    def loss_fn(y):
        return float(np.sum((y - target) ** 2))

    y, cache = mlp.forward(x)
    analytic, gx = mlp.backward(cache, 2.0 * (y - target))
    numeric, ngx = finite_difference_grads(mlp, x, loss_fn)
    for a, b in zip(analytic, numeric):
        assert relative_error(a, b) < 1e-4
    assert relative_error(gx, ngx) < 1e-4


def test_init_deterministic_and_bounded():
    a = nn.Mlp([4, 8, 1], rng=np.random.default_rng(3))
    b = nn.Mlp([4, 8, 1], rng=np.random.default_rng(3))
    for wa, wb in zip(a.params(), b.params()):
        assert np.array_equal(wa, wb)
    for w, fan_in in zip(a.weights, a.widths[:-1]):
        bound = np.sqrt(6.0 / fan_in)
        assert np.all(np.isfinite(w))
        assert np.abs(w).max() <= bound


def test_init_rejects_too_few_or_zero_width_layers():
    with pytest.raises(ConfigError):
        nn.Mlp([4], rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        nn.Mlp([4, 0, 2], rng=np.random.default_rng(0))


def test_forward_zero_parameters_gives_zero():
    mlp = nn.Mlp([3, 4, 2], rng=np.random.default_rng(0))
    for p in mlp.params():
        p[:] = 0.0
    y, _ = mlp.forward(np.ones((5, 3)))
    assert np.all(y == 0.0)


def test_forward_single_linear_layer_is_affine():
    rng = np.random.default_rng(1)
    mlp = nn.Mlp([3, 2], rng=rng)
    mlp.biases[0][:] = rng.normal(size=2)
    x = rng.normal(size=(4, 3))
    y, _ = mlp.forward(x)
    assert np.allclose(y, x @ mlp.weights[0] + mlp.biases[0])


def test_forward_rows_are_independent():
    rng = np.random.default_rng(2)
    mlp = nn.Mlp([4, 6, 3], rng=rng)
    x = rng.normal(size=(8, 4))
    full, _ = mlp.forward(x)
    for i in range(8):
        row, _ = mlp.forward(x[i])
        assert np.allclose(full[i], row[0])


def test_forward_shape_mismatch_raises():
    mlp = nn.Mlp([4, 2], rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mlp.forward(np.ones((3, 5)))


def test_backward_zero_output_gradient():
    rng = np.random.default_rng(3)
    mlp = nn.Mlp([3, 5, 2], rng=rng)
    _, cache = mlp.forward(rng.normal(size=(4, 3)))
    grads, gx = mlp.backward(cache, np.zeros((4, 2)))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(gx == 0.0)


def test_backward_is_linear_over_batch():
    rng = np.random.default_rng(4)
    mlp = nn.Mlp([3, 5, 2], rng=rng)
    x = rng.normal(size=(6, 3))
    dy = rng.normal(size=(6, 2))
    _, cache = mlp.forward(x)
    full, _ = mlp.backward(cache, dy)
    summed = [np.zeros_like(g) for g in full]
    for i in range(6):
        _, ci = mlp.forward(x[i])
        gi, _ = mlp.backward(ci, dy[i])
        for acc, g in zip(summed, gi):
            acc += g
    for a, b in zip(full, summed):
        assert np.allclose(a, b)


def test_backward_stale_cache_raises():
    rng = np.random.default_rng(5)
    mlp = nn.Mlp([3, 5, 2], rng=rng)
    _, cache = mlp.forward(rng.normal(size=(4, 3)))
    with pytest.raises(ConfigError):
        mlp.backward(cache[:-1], np.zeros((4, 2)))


def test_adam_zero_gradients_leave_parameters_unchanged():
    mlp = nn.Mlp([3, 4, 2], rng=np.random.default_rng(6))
    before = [p.copy() for p in mlp.params()]
    opt = nn.Adam(mlp.params())
    opt.step([np.zeros_like(p) for p in mlp.params()])
    for b, p in zip(before, mlp.params()):
        assert np.array_equal(b, p)


def test_adam_descends_on_scalar_quadratic():
    w = np.array([1.0])
    opt = nn.Adam([w], lr=1e-2)
    for _ in range(50):
        opt.step([2.0 * w])
    assert w[0] < 1.0


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(7)
        mlp = nn.Mlp([3, 4, 1], rng=rng)
        opt = nn.Adam(mlp.params())
        x = rng.normal(size=(8, 3))
        for _ in range(10):
            y, cache = mlp.forward(x)
            grads, _ = mlp.backward(cache, y)
            opt.step(grads)
        return [p.copy() for p in mlp.params()]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_adam_rejects_non_finite_gradients():
    w = np.array([1.0])
    opt = nn.Adam([w])
    with pytest.raises(TrainingError):
        opt.step([np.array([np.nan])])


def test_checkpoint_round_trip_exact(tmp_path):
    rng = np.random.default_rng(8)
    mlp = nn.Mlp([5, 7, 2], "sigmoid", rng=rng)
    opt = nn.Adam(mlp.params(), lr=3e-4)
    x = rng.normal(size=(4, 5))
    y, cache = mlp.forward(x)
    grads, _ = mlp.backward(cache, y)
    opt.step(grads)

    arrays = nn.mlp_state("net", mlp)
    opt_meta, opt_arrays = nn.adam_state("opt", opt)
    arrays.update(opt_arrays)
    meta = {"widths": mlp.widths, "activation": mlp.output_activation, "opt": opt_meta}
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, meta, arrays)

    meta2, arrays2 = nn.load_checkpoint(path)
    mlp2 = nn.restore_mlp("net", meta2["widths"], meta2["activation"], arrays2)
    opt2 = nn.restore_adam("opt", meta2["opt"], mlp2.params(), arrays2)
    for a, b in zip(mlp.params(), mlp2.params()):
        assert np.array_equal(a, b)
    assert opt2.step_count == opt.step_count
    for a, b in zip(opt.m + opt.v, opt2.m + opt2.v):
        assert np.array_equal(a, b)
    ya, _ = mlp.forward(x)
    yb, _ = mlp2.forward(x)
    assert np.array_equal(ya, yb)
