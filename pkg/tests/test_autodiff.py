"""Finite-difference checks for every autodiff op."""

import numpy as np
import numpy.testing as npt

from clickseg import autodiff as ad

from fd import finite_diff, rel_error

RNG = np.random.default_rng(123)
TOL = 1e-6


def check_op(build, *shapes, step=1e-5, tol=TOL):
    """Compare analytic grads of scalar build(*tensors) against central FD."""
    arrays = [RNG.normal(size=s) for s in shapes]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for i, (a, t) in enumerate(zip(arrays, tensors)):
        def f(x, i=i):
            args = [ad.Tensor(arr.copy()) for arr in arrays]
            args[i] = ad.Tensor(x)
            return float(build(*args).data)

        fd_grad = finite_diff(f, a, step)
        assert rel_error(t.grad, fd_grad) < tol, f"operand {i}"


def test_add_broadcast():
    check_op(lambda a, b: ad.tsum(ad.mul(ad.add(a, b), ad.add(a, b))), (4, 3), (3,))


def test_sub_mul():
    check_op(lambda a, b: ad.tsum(ad.mul(ad.sub(a, b), a)), (5, 2), (5, 2))


def test_matmul_2d():
    check_op(lambda a, b: ad.tsum(ad.matmul(a, b)), (4, 3), (3, 5))


def test_matmul_batched():
    check_op(
        lambda a, b: ad.tsum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))),
        (2, 4, 3),
        (2, 3, 5),
    )


def test_reshape_transpose():
    check_op(
        lambda a: ad.tsum(
            ad.mul(ad.transpose(ad.reshape(a, (2, 3, 4)), (1, 0, 2)), 1.5)
        ),
        (6, 4),
    )


def test_concat():
    check_op(
        lambda a, b: ad.tsum(ad.mul(ad.concat(a, b, axis=1), ad.concat(a, b, axis=1))),
        (3, 2),
        (3, 4),
    )


def test_gather_rows():
    idx = np.array([0, 2, 2, 1])
    check_op(lambda a: ad.tsum(ad.mul(ad.gather_rows(a, idx), 2.0)), (3, 4))


def test_segment_mean():
    seg = np.array([0, 0, 1, 2, 2, 2])
    check_op(
        lambda a: ad.tsum(ad.mul(ad.segment_mean(a, seg, 3), ad.segment_mean(a, seg, 3))),
        (6, 3),
    )


def test_relu():
    # keep values away from the kink
    a = RNG.normal(size=(5, 4))
    a[np.abs(a) < 0.1] += 0.2
    t = ad.Tensor(a.copy(), requires_grad=True)
    out = ad.tsum(ad.relu(t))
    out.backward()
    fd_grad = finite_diff(lambda x: float(ad.tsum(ad.relu(ad.Tensor(x))).data), a)
    assert rel_error(t.grad, fd_grad) < TOL


def test_sigmoid_log():
    check_op(lambda a: ad.tsum(ad.log(ad.sigmoid(a))), (4, 4))


def test_clamp_interior_and_exterior():
    a = np.array([[-2.0, 0.3, 0.9, 2.0]])
    t = ad.Tensor(a.copy(), requires_grad=True)
    ad.tsum(ad.clamp(t, 0.0, 1.0)).backward()
    npt.assert_array_equal(t.grad, [[0.0, 1.0, 1.0, 0.0]])


def test_softmax():
    check_op(lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=-1), ad.relu(a))), (3, 5))


def test_softmax_rows_sum_to_one():
    x = RNG.normal(size=(4, 7)) * 10
    y = ad.softmax(ad.Tensor(x), axis=-1)
    npt.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm():
    check_op(
        lambda a, g, b: ad.tsum(ad.mul(ad.layer_norm(a, g, b), ad.layer_norm(a, g, b))),
        (6, 8),
        (8,),
        (8,),
        tol=1e-5,
    )


def test_tmean_axis():
    check_op(lambda a: ad.tsum(ad.mul(ad.tmean(a, axis=1), ad.tmean(a, axis=1))), (3, 5, 2))


def test_diamond_accumulation():
    # gradient through two paths must sum
    a = ad.Tensor(np.array([[2.0]]), requires_grad=True)
    out = ad.add(ad.mul(a, a), ad.scale(a, 3.0))  # a^2 + 3a -> da = 2a + 3 = 7
    out.backward()
    npt.assert_allclose(a.grad, [[7.0]])


def test_no_grad_skips_tape():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.no_grad():
        out = ad.matmul(a, a)
    assert out._backward is None and out._parents == ()


def test_constant_graph_retains_nothing():
    a = ad.Tensor(np.ones((2, 2)))
    out = ad.matmul(a, a)
    assert out._backward is None
