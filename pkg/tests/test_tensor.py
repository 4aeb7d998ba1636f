import numpy as np
import pytest

from m2i2.errors import ContractError, NumericsError, ShapeError
from m2i2.tensor import (
    Tensor,
    concat,
    cross_entropy,
    gather_rows,
    layer_norm,
    log_softmax,
    softmax,
)

from fdcheck import check_grad, fd_grad, rel_err

RNG = np.random.default_rng(0)


def rand(*shape):
    return RNG.uniform(-2, 2, size=shape)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = a @ Tensor(np.eye(2))
        assert np.array_equal(out.data, a.data)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_grad_vs_finite_differences(self):
        b = rand(3, 4)
        check_grad(lambda a: (a @ Tensor(b)).sum(), rand(2, 3))
        a = rand(2, 3)
        check_grad(lambda t: (Tensor(a) @ t).sum(), rand(3, 4))

    def test_batched_grad(self):
        b = rand(5, 3, 4)
        check_grad(lambda a: ((a @ Tensor(b)) ** 2).sum(), rand(5, 2, 3))

    def test_batched_broadcast_grad(self):
        # unbatched rhs broadcast over batch dim
        b = rand(3, 4)
        check_grad(lambda a: ((a @ Tensor(b)) ** 2).sum(), rand(5, 2, 3))
        a = rand(5, 2, 3)
        check_grad(lambda t: ((Tensor(a) @ t) ** 2).sum(), rand(3, 4))


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_large_inputs_no_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_shift_invariance(self):
        x = rand(4, 7)
        a = softmax(Tensor(x), axis=-1).data
        b = softmax(Tensor(x + 17.3), axis=-1).data
        assert np.abs(a - b).max() < 1e-12

    def test_sums_to_one(self):
        p = softmax(Tensor(rand(3, 5)), axis=-1).data
        assert np.abs(p.sum(axis=-1) - 1.0).max() < 1e-12
        assert (p >= 0).all()

    def test_empty_axis_errors(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((3, 0))))

    def test_grad(self):
        w = rand(4, 5)
        check_grad(lambda t: (softmax(t, axis=-1) * Tensor(w)).sum(), rand(4, 5))

    def test_log_softmax_grad(self):
        w = rand(3, 6)
        check_grad(lambda t: (log_softmax(t, axis=-1) * Tensor(w)).sum(), rand(3, 6))


class TestLayerNorm:
    def test_constant_row_is_zeroed(self):
        out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.abs(out.data).max() < 1e-2  # eps-dominated, finite

    def test_hand_values(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_row_stats(self):
        x = rand(6, 8)
        out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-9
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_grad_x(self):
        g = rand(5)
        b = rand(5)
        w = rand(4, 5)
        check_grad(
            lambda t: (layer_norm(t, Tensor(g), Tensor(b)) * Tensor(w)).sum(), rand(4, 5)
        )

    def test_grad_gain_bias(self):
        x = rand(4, 5)
        w = rand(4, 5)
        b = rand(5)
        check_grad(
            lambda t: (layer_norm(Tensor(x), t, Tensor(b)) * Tensor(w)).sum(), rand(5)
        )
        g = rand(5)
        check_grad(
            lambda t: (layer_norm(Tensor(x), Tensor(g), t) * Tensor(w)).sum(), rand(5)
        )


class TestCrossEntropy:
    def test_uniform_logits(self):
        out = cross_entropy(Tensor(np.zeros((3, 100))), [0, 42, 99])
        assert abs(out.item() - np.log(100)) < 1e-9

    def test_peaked_logits_approach_zero(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 2] = 50.0
        assert cross_entropy(Tensor(logits), [1, 2]).item() < 1e-9

    def test_hand_value(self):
        out = cross_entropy(Tensor([[2.0, 0.0], [0.0, 2.0]]), [0, 1])
        expected = -np.log(np.exp(2) / (np.exp(2) + 1))
        assert abs(out.item() - expected) < 1e-9
        assert abs(out.item() - 0.1269) < 1e-3

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_grad(self):
        t = np.array([2, 0, 1])
        check_grad(lambda x: cross_entropy(x, t) * 3.0, rand(3, 4))


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_constant_has_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = Tensor([5.0, 5.0]).sum() + x.sum() * 0.0
        out.backward()
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_root_grad_is_one(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * 4.0
        y.backward()
        assert y.grad == 1.0

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_linearity(self):
        x0 = rand(4)
        for _ in range(3):
            a, b = RNG.uniform(-2, 2, size=2)
            x = Tensor(x0.copy(), requires_grad=True)
            f = (x**3.0).sum()
            g = (x.tanh() * x).sum()
            (a * f + b * g).backward()
            combined = x.grad.copy()
            x1 = Tensor(x0.copy(), requires_grad=True)
            (x1**3.0).sum().backward()
            x2 = Tensor(x0.copy(), requires_grad=True)
            (x2.tanh() * x2).sum().backward()
            assert np.abs(combined - (a * x1.grad + b * x2.grad)).max() < 1e-9

    def test_reuse_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        assert abs(x.grad - 7.0) < 1e-12


C34 = rand(3, 4)
C43 = rand(4, 3)
C31 = rand(3, 1)
C534 = rand(5, 3, 4)


class TestElementwiseGrads:
    @pytest.mark.parametrize(
        "build",
        [
            lambda t: (t + Tensor(C34)).sum(),
            lambda t: (t * Tensor(C34)).sum(),
            lambda t: (t / Tensor(C34 + 3.0)).sum(),
            lambda t: (t**2.0).sum(),
            lambda t: ((t * 0.1).exp()).sum(),
            lambda t: ((t * t + 1.0).log()).sum(),
            lambda t: t.tanh().sum(),
            lambda t: t.relu().mean(),
            lambda t: t.gelu().sum(),
            lambda t: (t + 2.5).sqrt().sum(),
            lambda t: (t.reshape(4, 3) ** 2.0).mean(),
            lambda t: (t.transpose((1, 0)) * Tensor(C43)).sum(),
            lambda t: t[1:, ::2].sum(),
            lambda t: t[np.array([0, 0, 2]), :].sum(),
            lambda t: (t.sum(axis=0) ** 2.0).sum(),
            lambda t: (t.mean(axis=1, keepdims=True) * Tensor(C31)).sum(),
            lambda t: (t.broadcast_to((5, 3, 4)) * Tensor(C534)).sum(),
            lambda t: concat([t, t * 2.0], axis=1).sum(),
        ],
    )
    def test_against_finite_differences(self, build):
        check_grad(build, rand(3, 4))

    def test_gather_rows_grad(self):
        idx = np.array([[0, 2, 2], [1, 0, 1]])
        w = rand(2, 3, 4)
        check_grad(lambda t: (gather_rows(t, idx) * Tensor(w)).sum(), rand(2, 3, 4))


class TestNumerics:
    def test_overflow_is_an_error(self):
        with pytest.raises(NumericsError):
            Tensor(1e300) * Tensor(1e300)

    def test_log_zero_is_an_error(self):
        with pytest.raises(NumericsError):
            Tensor(0.0).log()


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-1, 1, size=(4, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, size=(4, 4)), requires_grad=True)
        out = cross_entropy(softmax(x @ w, axis=-1).log(), [0, 1, 2, 3])
        out.backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
