import numpy as np
import pytest

from helpers import net_probes, perturbed_params, rel_err
from numstr.net import (
    Conv,
    Head,
    MaxPool,
    NetSpec,
    NumericError,
    SgdConfig,
    ShapeError,
    UsageError,
    backward,
    default_spec,
    forward,
    init_params,
    load_params,
    params_from_bytes,
    params_to_bytes,
    save_params,
    sgd_step,
)

LAYER_SPECS = {
    "conv": NetSpec((Conv(3),), in_channels=2),
    "pool": NetSpec((MaxPool(),), in_channels=2),
    "head": NetSpec((Head(4),), in_channels=2),
    "conv+pool": NetSpec((Conv(3), MaxPool()), in_channels=2),
    "two-layer": NetSpec((Conv(4), MaxPool(), Conv(3), Head(5)), in_channels=1),
}


def test_default_spec_shape():
    spec = default_spec()
    assert spec.stride == 32
    assert sum(isinstance(l, (Conv, Head)) for l in spec.layers) == 7
    assert sum(isinstance(l, MaxPool) for l in spec.layers) == 5
    params = init_params(spec, 0)
    out, _ = forward(spec, params, np.zeros((1, 128, 256), np.float32))
    assert out.shape == (45, 4, 8)


def test_zero_weights_give_zero_output():
    spec = default_spec()
    params = [np.zeros_like(p) for p in init_params(spec, 0)]
    x = np.random.default_rng(0).random((1, 64, 64)).astype(np.float32)
    out, _ = forward(spec, params, x)
    assert not out.any()


def test_shape_errors():
    spec = default_spec()
    params = init_params(spec, 0)
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros((1, 127, 256), np.float32))
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros((2, 128, 256), np.float32))
    with pytest.raises(ShapeError):
        forward(spec, params[:-1], np.zeros((1, 128, 256), np.float32))


@pytest.mark.parametrize("name", list(LAYER_SPECS))
def test_gradients_match_finite_differences(name):
    spec = LAYER_SPECS[name]
    x = np.random.default_rng(1).normal(size=(2, spec.in_channels, 4, 6))
    for label, analytic, numeric in net_probes(spec, x, 40, seed=0):
        assert rel_err(analytic, numeric) <= 1e-4, (name, label, analytic, numeric)


def test_zero_output_gradient_gives_zero_gradients():
    spec = LAYER_SPECS["two-layer"]
    params = perturbed_params(spec, 0)
    out, cache = forward(spec, params, np.random.default_rng(0).normal(size=(1, 4, 4)))
    grads, gx = backward(cache, np.zeros_like(out))
    assert all(not g.any() for g in grads)
    assert not gx.any()


def test_leaky_negative_side_slope():
    spec = NetSpec((Conv(1),), in_channels=1)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    x = np.array([[[-2.0, 3.0]]])
    out, cache = forward(spec, [w, np.zeros(1)], x)
    np.testing.assert_allclose(out, [[[-0.2, 3.0]]])
    _, gx = backward(cache, np.ones_like(out))
    np.testing.assert_allclose(gx, [[[0.1, 1.0]]])


def test_maxpool_routes_to_lowest_index_on_ties():
    spec = NetSpec((MaxPool(),), in_channels=1)
    x = np.array([[[1.0, 1.0], [1.0, 1.0]]])
    out, cache = forward(spec, [], x)
    _, gx = backward(cache, np.ones_like(out))
    np.testing.assert_array_equal(gx, [[[1.0, 0.0], [0.0, 0.0]]])
    x = np.array([[[0.0, 2.0], [2.0, 1.0]]])
    out, cache = forward(spec, [], x)
    _, gx = backward(cache, np.ones_like(out))
    np.testing.assert_array_equal(gx, [[[0.0, 1.0], [0.0, 0.0]]])


def test_backward_cache_misuse():
    spec = LAYER_SPECS["two-layer"]
    params = perturbed_params(spec, 0)
    out, cache = forward(spec, params, np.zeros((1, 4, 4)))
    with pytest.raises(UsageError):
        backward(cache, np.zeros((1,) + out.shape))
    backward(cache, np.zeros_like(out))
    with pytest.raises(UsageError):
        backward(cache, np.zeros_like(out))
    with pytest.raises(UsageError):
        backward(None, np.zeros_like(out))


def test_batch_order_independent():
    spec = default_spec()
    params = init_params(spec, 3)
    x = np.random.default_rng(0).random((5, 1, 64, 96)).astype(np.float32)
    out, _ = forward(spec, params, x)
    rev, _ = forward(spec, params, x[::-1])
    np.testing.assert_allclose(out, rev[::-1], rtol=1e-5, atol=1e-6)
    single, _ = forward(spec, params, x[2])
    np.testing.assert_allclose(out[2], single, rtol=1e-5, atol=1e-6)
    again, _ = forward(spec, params, x)
    np.testing.assert_array_equal(out, again)


def _one(v):
    return [np.array([v], dtype=np.float64)]


def test_sgd_vanilla_step():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    p, v = sgd_step(_one(1.0), _one(1.0), _one(0.0), cfg)
    assert p[0][0] == pytest.approx(0.9)


def test_sgd_momentum_recurrence():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    p, v = sgd_step(_one(1.0), _one(1.0), _one(0.0), cfg)
    assert (v[0][0], p[0][0]) == (pytest.approx(-0.1), pytest.approx(0.9))
    p, v = sgd_step(p, _one(1.0), v, cfg)
    assert (v[0][0], p[0][0]) == (pytest.approx(-0.19), pytest.approx(0.71))


def test_sgd_decay_only():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=5e-4)
    p, _ = sgd_step(_one(1.0), _one(0.0), _one(0.0), cfg)
    assert p[0][0] == pytest.approx(0.99995)


def test_sgd_rejects_non_finite():
    cfg = SgdConfig()
    with pytest.raises(NumericError):
        sgd_step(_one(1.0), _one(np.nan), _one(0.0), cfg)
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)


def test_param_count_is_function_of_spec():
    spec = default_spec()
    expected = 0
    ch = 1
    for w in (16, 32, 64, 64, 128, 128):
        expected += w * ch * 9 + w
        ch = w
    expected += 45 * 128 + 45
    assert spec.param_count() == expected
    assert sum(p.size for p in init_params(spec, 0)) == expected


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec = default_spec()
    params = init_params(spec, 11)
    save_params(tmp_path / "m.nsrm", spec, params)
    spec2, params2 = load_params(tmp_path / "m.nsrm")
    assert spec2 == spec
    x = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(forward(spec, params, x)[0], forward(spec2, params2, x)[0])
    raw = (tmp_path / "m.nsrm").read_bytes()
    assert raw[:4] == b"NSRM"
    assert params_to_bytes(spec2, params2) == raw


def test_checkpoint_rejects_garbage():
    from numstr.core import FormatError

    with pytest.raises(FormatError):
        params_from_bytes(b"XXXX")
    spec = default_spec()
    raw = params_to_bytes(spec, init_params(spec, 0))
    with pytest.raises(FormatError):
        params_from_bytes(raw[:-4])
