import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mosenhance.errors import ContractError, ShapeError
from mosenhance.layers import (
    BlstmLayer,
    Linear,
    LstmCell,
    PblstmStack,
    blstm_forward,
    linear,
    lstm_sequence,
    lstm_sequence_reference,
    lstm_step,
    pblstm_forward,
    pyramid_length,
)
from mosenhance.numerics import Tape, Tensor, backward, grad_check
from oracles import central_diff, rel_error


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def numpy_lstm(Wx, Wh, b, xs, reverse=False):
    """Textbook LSTM recurrence, gate blocks ordered i, f, o, g."""
    n = Wh.shape[0]
    h, c = np.zeros(n), np.zeros(n)
    out = np.zeros((len(xs), n))
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        z = xs[t] @ Wx + h @ Wh + b
        i, f, o, g = _sig(z[:n]), _sig(z[n : 2 * n]), _sig(z[2 * n : 3 * n]), np.tanh(z[3 * n :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[t] = h
    return out


def _zero_cell(d, n):
    return LstmCell(Tensor(np.zeros((d, 4 * n))), Tensor(np.zeros((n, 4 * n))), Tensor(np.zeros(4 * n)))


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=4)
        assert np.array_equal(linear(Linear(Tensor(np.eye(4)), Tensor(np.zeros(4))), Tensor(x)).data, x)

    def test_zero_weights_give_bias(self, rng):
        b = rng.normal(size=3)
        out = linear(Linear(Tensor(np.zeros((4, 3))), Tensor(b)), Tensor(rng.normal(size=(2, 4)))).data
        assert np.array_equal(out, np.tile(b, (2, 1)))

    def test_gradient_exact(self, rng):
        lin = Linear.init(rng, 4, 3)
        assert grad_check(lambda x: linear(lin, x).sum(), Tensor(rng.normal(size=(2, 4)))).max_error <= 1e-6

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            linear(Linear.init(rng, 4, 3), Tensor(np.ones(5)))


class TestLstmStep:
    def test_zero_parameters(self, rng):
        h, c = lstm_step(_zero_cell(4, 3), Tensor(rng.normal(size=4)), Tensor(np.zeros(3)), Tensor(np.zeros(3)))
        assert not h.data.any() and not c.data.any()

    def test_matches_numpy(self, rng):
        cell = LstmCell.init(rng, 4, 3)
        x = rng.normal(size=4)
        h, _ = lstm_step(cell, Tensor(x), Tensor(np.zeros(3)), Tensor(np.zeros(3)))
        ref = numpy_lstm(cell.w_input.data, cell.w_hidden.data, cell.bias.data, x[None])[0]
        assert np.allclose(h.data, ref, atol=1e-14)

    def test_parameter_gradients(self, rng):
        cell = LstmCell.init(rng, 4, 3)
        x, h0, c0 = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)
        for name in ("w_input", "w_hidden", "bias"):
            p = getattr(cell, name)

            def f(v, name=name):
                setattr(cell, name, v)
                h, _ = lstm_step(cell, Tensor(x), Tensor(h0), Tensor(c0))
                return h.sum()

            res = grad_check(f, Tensor(p.data.copy()))
            setattr(cell, name, p)
            assert res.max_error <= 1e-4, name

    def test_saturated_forget_gate_is_monotone(self, rng):
        """With f ~ 1 and no recurrence, c moves by the same increment every step."""
        n = 3
        cell = LstmCell.init(rng, 2, n)
        cell.w_hidden.data[:] = 0.0
        cell.bias.data[n : 2 * n] = 40.0
        x = Tensor(rng.normal(size=2))
        h, c = Tensor(np.zeros(n)), Tensor(np.zeros(n))
        cs = []
        for _ in range(10):
            h, c = lstm_step(cell, x, h, c)
            cs.append(c.data.copy())
        d = np.diff(np.array(cs), axis=0)
        step = cs[0]
        assert ((d * np.sign(step)) > 0).all()

    def test_shape_checks(self, rng):
        cell = LstmCell.init(rng, 4, 3)
        with pytest.raises(ShapeError):
            lstm_step(cell, Tensor(np.zeros(5)), Tensor(np.zeros(3)), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            lstm_step(cell, Tensor(np.zeros(4)), Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestLstmSequence:
    @pytest.mark.parametrize("reverse", [False, True])
    def test_matches_numpy(self, rng, reverse):
        cell = LstmCell.init(rng, 3, 4)
        xs = rng.normal(size=(6, 3))
        out = lstm_sequence(cell, Tensor(xs), reverse=reverse).data
        ref = numpy_lstm(cell.w_input.data, cell.w_hidden.data, cell.bias.data, xs, reverse)
        assert np.allclose(out, ref, atol=1e-14)

    @pytest.mark.parametrize("reverse", [False, True])
    def test_fused_gradients_equal_composed(self, rng, reverse):
        cell = LstmCell.init(rng, 3, 2)
        xs = rng.normal(size=(5, 3))
        w = rng.normal(size=(5, 2))
        grads = []
        for fn in (lstm_sequence, lstm_sequence_reference):
            x = Tensor(xs.copy(), requires_grad=True)
            with Tape() as tape:
                y = (fn(cell, x, reverse=reverse) * Tensor(w)).sum()
            backward(tape, y)
            grads.append([x.grad.copy(), cell.w_input.grad.copy(), cell.w_hidden.grad.copy(), cell.bias.grad.copy()])
        for a, b in zip(*grads):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_gradient_against_numpy_oracle(self, rng):
        cell = LstmCell.init(rng, 3, 2)
        xs = rng.normal(size=(4, 3))
        Wx, Wh, b = cell.w_input.data, cell.w_hidden.data, cell.bias.data
        x = Tensor(xs.copy(), requires_grad=True)
        with Tape() as tape:
            y = (lstm_sequence(cell, x) ** 2).sum()
        backward(tape, y)
        ref = central_diff(lambda v: float((numpy_lstm(Wx, Wh, b, v) ** 2).sum()), xs)
        assert rel_error(x.grad, ref) <= 1e-6

    def test_empty_sequence(self, rng):
        with pytest.raises(ContractError):
            lstm_sequence(LstmCell.init(rng, 3, 2), Tensor(np.zeros((0, 3))))


class TestBlstm:
    def test_single_frame(self, rng):
        layer = BlstmLayer.init(rng, 3, 2)
        x = rng.normal(size=(1, 3))
        out = blstm_forward(layer, Tensor(x)).data
        f = numpy_lstm(layer.forward.w_input.data, layer.forward.w_hidden.data, layer.forward.bias.data, x)
        b = numpy_lstm(layer.backward.w_input.data, layer.backward.w_hidden.data, layer.backward.bias.data, x)
        assert np.allclose(out, np.concatenate([f, b], axis=1), atol=1e-15)

    def test_time_reversal_swaps_directions(self, rng):
        layer = BlstmLayer.init(rng, 3, 2)
        swapped = BlstmLayer(layer.backward, layer.forward)
        xs = rng.normal(size=(3, 3))
        out = blstm_forward(layer, Tensor(xs)).data
        rev = blstm_forward(swapped, Tensor(xs[::-1].copy())).data[::-1]
        assert np.allclose(out, np.concatenate([rev[:, 2:], rev[:, :2]], axis=1), atol=1e-15)

    def test_gradient(self, rng):
        layer = BlstmLayer.init(rng, 3, 2)
        assert grad_check(lambda x: (blstm_forward(layer, x) ** 2).sum(), Tensor(rng.normal(size=(4, 3)))).ok(1e-4)


class TestPyramid:
    @pytest.mark.parametrize("T,r,L,expected", [(16, 2, 3, 2), (17, 2, 3, 3), (8, 2, 2, 2), (1, 2, 3, 1)])
    def test_lengths(self, T, r, L, expected):
        stack = PblstmStack.init(np.random.default_rng(0), 2, (2,) * L, reduction=r)
        assert pblstm_forward(stack, Tensor(np.ones((T, 2)))).shape == (expected, 4)
        assert pyramid_length(T, r, L) == expected

    @given(st.integers(1, 64), st.sampled_from([2, 3]), st.sampled_from([1, 2, 3]))
    def test_ceiling_rule(self, T, r, L):
        stack = PblstmStack.init(np.random.default_rng(1), 1, (1,) * L, reduction=r)
        out = pblstm_forward(stack, Tensor(np.linspace(0, 1, T)[:, None]))
        assert out.shape[0] == -(-T // r**L)

    def test_padding_repeats_last_frame(self, rng):
        """T=3 with reduction 2 behaves exactly like T=4 with the last frame duplicated."""
        stack = PblstmStack.init(rng, 2, (3,), reduction=2)
        xs = rng.normal(size=(3, 2))
        padded = np.vstack([xs, xs[-1:]])
        assert np.array_equal(pblstm_forward(stack, Tensor(xs)).data, pblstm_forward(stack, Tensor(padded)).data)

    def test_grouping_concatenates_consecutive_frames(self, rng):
        stack = PblstmStack.init(rng, 2, (3,), reduction=2)
        xs = rng.normal(size=(4, 2))
        direct = blstm_forward(stack.layers[0], Tensor(xs.reshape(2, 4))).data
        assert np.array_equal(pblstm_forward(stack, Tensor(xs)).data, direct)

    def test_gradient(self, rng):
        stack = PblstmStack.init(rng, 2, (2, 2), reduction=2)
        assert grad_check(lambda x: (pblstm_forward(stack, x) ** 2).sum(), Tensor(rng.normal(size=(7, 2)))).ok(1e-4)

    def test_invariants(self, rng):
        with pytest.raises(ContractError):
            PblstmStack.init(rng, 2, (2,), reduction=1)
        layers = [BlstmLayer.init(rng, 4, 2), BlstmLayer.init(rng, 5, 2)]
        with pytest.raises(ShapeError):
            PblstmStack(layers, 2)

    def test_strict_reduction(self):
        for T in range(2, 40):
            assert pyramid_length(T, 2, 3) < T
