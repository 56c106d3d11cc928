import numpy as np
import pytest

from gradobf.core import gen_shapes_dataset, prng_new
from gradobf.model import (
    REFERENCE_ARCH,
    MaxPool2,
    ReLU,
    accuracy,
    finite_diff_check,
    forward,
    load_model,
    loss_and_input_grad,
    mean_loss,
    model_init,
    save_model,
    train,
    zoom_out,
)


def _linear(seed=0, shape=(4, 4, 3), k=3):
    return model_init("dense-softmax", prng_new(seed, "lin"), shape, k)


def test_dense_softmax_gradient_matches_hand_derivation():
    model = _linear()
    x = prng_new(1, "x").uniform_f64((4, 4, 3))
    w, b = model.layers[0].params()
    z = x.ravel() @ w + b
    p = np.exp(z - z.max())
    p /= p.sum()
    onehot = np.eye(3)[2]
    expected = (w @ (p - onehot)).reshape(x.shape)
    res = loss_and_input_grad(model, x, 2)
    assert np.allclose(res.input_grad, expected, atol=1e-14)
    assert np.isclose(res.loss, -np.log(p[2]))


def test_zero_weights_zero_gradient():
    model = _linear()
    model.layers[0].set_params([np.zeros((48, 3)), np.zeros(3)])
    res = loss_and_input_grad(model, np.zeros((4, 4, 3)), 1)
    assert np.all(res.input_grad == 0)


def test_softmax_normalised():
    model = model_init(REFERENCE_ARCH, prng_new(0, "m"))
    x = prng_new(2, "x").uniform_f64((5, 32, 32, 3))
    p = model.probs(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(forward(model, x[0]).sum(), 1.0)


def test_linear_model_finite_difference_exact():
    model = _linear()
    x = prng_new(3, "x").uniform_f64((4, 4, 3))
    assert finite_diff_check(model, x, 0, 1e-5, 30, prng_new(0, "fd")) <= 1e-8


def test_finite_difference_truncation_grows_with_step(reference):
    x = gen_shapes_dataset(1, 4, 32, prng_new(4, "fdx")).images[0]
    small = finite_diff_check(reference, x, 0, 1e-5, 20, prng_new(0, "fd"))
    large = finite_diff_check(_linear(shape=(32, 32, 3), k=4), x, 0, 1e-1, 20, prng_new(0, "fd"))
    assert small <= 1e-4
    # a linear-softmax model is smooth, so its error at h = 0.1 is pure truncation
    lin_small = finite_diff_check(_linear(shape=(32, 32, 3), k=4), x, 0, 1e-5, 20, prng_new(0, "fd"))
    assert large > lin_small


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(_linear(), np.zeros((4, 4, 3)), 0, 0.0, 5, prng_new(0, "fd"))


def test_input_shape_mismatch():
    model = model_init(REFERENCE_ARCH, prng_new(0, "m"))
    with pytest.raises(ValueError):
        loss_and_input_grad(model, np.zeros((16, 16, 3)), 0)


def test_relu_subgradient_zero_at_kink():
    relu = ReLU()
    y, cache = relu.forward(np.array([[-1.0, 0.0, 2.0]]))
    dx, _ = relu.backward(cache, np.ones((1, 3)))
    assert list(dx[0]) == [0.0, 0.0, 1.0]


def test_maxpool_routes_ties_to_first():
    pool = MaxPool2()
    x = np.full((1, 2, 2, 1), 0.5)
    y, cache = pool.forward(x)
    dx, _ = pool.backward(cache, np.ones((1, 1, 1, 1)))
    assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


@pytest.mark.parametrize("arch", ["conv8-relu", "conv8-relu-pool-softmax", "conv8-blur-dense-softmax",
                                  "dense10-relu-dense3-softmax"])
def test_bad_architectures(arch):
    with pytest.raises(ValueError):
        model_init(arch, prng_new(0, "m"), (8, 8, 3), 4)


def test_training_decreases_loss_and_is_deterministic():
    data = gen_shapes_dataset(1000, 4, 32, prng_new(1, "small"))
    m0 = model_init(REFERENCE_ARCH, prng_new(1, "init"))
    a = train(m0, data, 1, 0.01, prng_new(1, "sgd"))
    b = train(m0, data, 1, 0.01, prng_new(1, "sgd"))
    assert mean_loss(a, data) < mean_loss(m0, data)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa, pb)
    # the starting model is left untouched
    assert mean_loss(m0, data) == mean_loss(model_init(REFERENCE_ARCH, prng_new(1, "init")), data)


def test_train_rejects_empty():
    data = gen_shapes_dataset(4, 4, 32, prng_new(1, "small")).subset([])
    with pytest.raises(ValueError):
        train(model_init(REFERENCE_ARCH, prng_new(1, "init")), data, 1, 0.01, prng_new(1, "sgd"))


def test_reference_model_beats_initial_by_thirty_points(reference):
    data = gen_shapes_dataset(300, 4, 32, prng_new(2, "held"))
    init = model_init(REFERENCE_ARCH, prng_new(7, "init"))
    assert accuracy(reference, data) >= accuracy(init, data) + 0.30


def test_zoom_out_keeps_range_and_shape():
    x = gen_shapes_dataset(16, 4, 32, prng_new(3, "z")).images
    out = zoom_out(x, prng_new(0, "aug"), prob=1.0)
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(zoom_out(x, prng_new(0, "aug"), prob=0.0), x)


def test_save_load_round_trip(tmp_path, reference):
    path = tmp_path / "m.tmdl"
    save_model(reference, path)
    back = load_model(path)
    assert back.arch == reference.arch and back.input_shape == reference.input_shape
    for pa, pb in zip(reference.parameters(), back.parameters()):
        assert np.array_equal(pa, pb)
    assert path.read_bytes().startswith(b"TMDL1")


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.tmdl"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_model(bad)
    good = tmp_path / "good.tmdl"
    save_model(_linear(), good)
    trunc = tmp_path / "trunc.tmdl"
    trunc.write_bytes(good.read_bytes()[:-9])
    with pytest.raises(ValueError):
        load_model(trunc)
