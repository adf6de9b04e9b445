import numpy as np
import pytest

from ezv2 import autodiff as ad
from ezv2.autodiff import (
    Linear,
    NonFiniteGradientError,
    Optimizer,
    OptimizerConfig,
    ShapeError,
    Tensor,
    check_gradients,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_forward_examples():
    np.testing.assert_array_equal(ad.relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.tanh(ad.mul(ad.add(t(0.0), 0.0), 3.0)).data == 0.0
    np.testing.assert_allclose(ad.layer_norm(t([[1.0, 3.0]]), eps=0.0).data, [[-1.0, 1.0]])


def test_square_and_mean_grads():
    x = ad.parameter([3.0])
    ad.backward(ad.sum(ad.square(x)))
    np.testing.assert_allclose(x.grad, [6.0])
    y = ad.parameter(np.ones(7))
    ad.backward(ad.mean(y))
    np.testing.assert_allclose(y.grad, np.full(7, 1 / 7))


def test_backward_rejects_non_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, 2.0))


def test_unreachable_params_get_zero_grad():
    a, b = ad.parameter([1.0]), ad.parameter([2.0])
    ad.backward(ad.sum(ad.square(a)), params=[a, b])
    np.testing.assert_array_equal(b.grad, [0.0])


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(t(np.ones(3)), t(np.ones(4)))
    with pytest.raises(ShapeError, match="cosine_similarity"):
        ad.cosine_similarity(t(np.ones((2, 3))), t(np.ones((2, 4))))


def test_two_layer_net_against_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 1))

    def build(ts):
        h = ad.tanh(ad.matmul(ad.as_tensor(x), ts[0]))
        return ad.mean(ad.square(ad.matmul(h, ts[1])))

    assert check_gradients(build, [w1, w2]) < 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))

    def grad_of(fn):
        x = Tensor(x0.copy(), requires_grad=True)
        ad.backward(fn(x))
        return x.grad

    f = lambda x: ad.sum(ad.tanh(x))  # noqa: E731
    g = lambda x: ad.mean(ad.square(x))  # noqa: E731
    a, b = 0.7, -1.3
    both = grad_of(lambda x: ad.add(ad.mul(f(x), a), ad.mul(g(x), b)))
    np.testing.assert_allclose(both, a * grad_of(f) + b * grad_of(g), rtol=1e-12)


def test_stop_gradient_blocks_flow():
    x = ad.parameter([2.0])
    y = ad.mul(ad.stop_gradient(x), x)
    ad.backward(ad.sum(y))
    np.testing.assert_allclose(x.grad, [2.0])


def test_batch_norm_inference_uses_running_stats():
    x = t([[1.0, 2.0], [3.0, 6.0]])
    out = ad.batch_norm(x, running_mean=np.array([1.0, 2.0]), running_var=np.array([4.0, 16.0]), training=False, eps=0.0)
    np.testing.assert_allclose(out.data, [[0.0, 0.0], [1.0, 1.0]])


def test_sgd_momentum_zero_example():
    cfg = OptimizerConfig(kind="sgd-momentum", learning_rate=0.1, weight_decay=0.0, momentum=0.0)
    new, _ = optimizer_step([np.array([0.0])], [np.array([1.0])], cfg, step=1)
    np.testing.assert_allclose(new[0], [-0.1])


def test_adam_zero_grad_only_decays():
    cfg = OptimizerConfig(learning_rate=3e-4, weight_decay=2e-5)
    p = np.array([1.5])
    new, _ = optimizer_step([p], [np.zeros(1)], cfg, step=1)
    np.testing.assert_allclose(new[0], p - 3e-4 * 2e-5 * p)


def test_adam_first_step_magnitude_is_lr():
    cfg = OptimizerConfig(learning_rate=3e-4, weight_decay=0.0)
    new, _ = optimizer_step([np.array([0.0])], [np.array([1.0])], cfg, step=1)
    # m_hat = 1, v_hat = 1 => update = 1 / (1 + eps)
    np.testing.assert_allclose(new[0], [-3e-4 / (1 + 1e-8)], rtol=1e-12)


@pytest.mark.parametrize("kind", ["adam", "sgd-momentum"])
def test_zero_learning_rate_is_identity(kind):
    cfg = OptimizerConfig(kind=kind, learning_rate=0.0, weight_decay=1e-3)
    p = np.array([0.3, -2.0])
    new, _ = optimizer_step([p], [np.array([5.0, -1.0])], cfg, step=3)
    np.testing.assert_array_equal(new[0], p)


def test_nan_gradient_aborts_step():
    lin = Linear(2, 2, np.random.default_rng(0))
    opt = Optimizer(lin.named_parameters(), OptimizerConfig())
    before = lin.weight.data.copy()
    lin.weight.grad = np.full_like(lin.weight.data, np.nan)
    with pytest.raises(NonFiniteGradientError):
        opt.step()
    np.testing.assert_array_equal(lin.weight.data, before)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(kind="rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(weight_decay=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(momentum=1.0)
    sgd = OptimizerConfig.sgd_full_scale()
    assert (sgd.learning_rate, sgd.weight_decay, sgd.momentum) == (0.2, 1e-4, 0.9)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors, {"note": "hi"})
    back, meta = load_checkpoint(path)
    assert meta["note"] == "hi"
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].dtype == tensors[k].dtype


def test_no_grad_is_per_thread():
    import threading

    inside, release = threading.Event(), threading.Event()

    def worker():
        with ad.no_grad():
            inside.set()
            release.wait(5)

    t = threading.Thread(target=worker)
    t.start()
    inside.wait(5)
    assert ad.grad_enabled()
    x = ad.Tensor(np.ones(3), requires_grad=True)
    assert ad.mul(x, 2.0).requires_grad
    release.set()
    t.join()
    assert ad.grad_enabled()
