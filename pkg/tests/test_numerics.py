import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa import numerics as nx
from lpa.numerics import DimensionError, FlopCounter, Tensor


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((T(np.eye(2)) @ T(x)).data, x)

    def test_hand_case(self):
        assert (T([[1.0, 2.0]]) @ T([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose((T(a) @ T(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T(np.zeros((2, 3))) @ T(np.zeros((4, 5)))

    def test_factored_path_associativity(self, rng):
        x, A, B = rng.normal(size=(7, 32)), rng.normal(size=(32, 5)), rng.normal(size=(5, 32))
        left = (T(x) @ T(A)) @ T(B)
        right = T(x) @ (T(A) @ T(B))
        np.testing.assert_allclose(left.data, right.data, atol=1e-10)

    def test_counter_chain(self, rng):
        L, d, r = 6, 10, 3
        x, A, B = T(rng.normal(size=(L, d))), T(rng.normal(size=(d, r))), T(rng.normal(size=(r, d)))
        with FlopCounter() as fc:
            (x @ A) @ B
        assert fc.multiply_accumulate_count == L * r * (d + d)

    def test_batched_count_and_scopes(self, rng):
        a, b = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(4, 5)))
        with FlopCounter() as fc:
            with nx.flop_scope("outer"):
                a @ b
            a @ b
        assert fc.multiply_accumulate_count == 2 * 2 * 3 * 4 * 5
        assert fc.scope_total("outer") == 2 * 3 * 4 * 5

    def test_grad(self, rng):
        a, b = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(4, 2)))
        assert nx.grad_check(lambda a, b: ((a @ b) * (a @ b)).sum(), [a, b]) < 1e-6


class TestSoftmax:
    def test_single_position(self):
        p = nx.masked_softmax(T([[9.0, 1.0], [0.0, 0.0]]))
        assert p.data[0].tolist() == [1.0, 0.0]
        np.testing.assert_allclose(p.data[1], [0.5, 0.5])

    def test_ln2(self):
        p = nx.masked_softmax(T([[0.0, 0.0], [math.log(2), 0.0]]))
        np.testing.assert_allclose(p.data[1], [2 / 3, 1 / 3], rtol=1e-12)

    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_rows_sum_to_one(self, L, seed):
        s = np.random.default_rng(seed).normal(size=(2, L, L)) * 30
        p = nx.masked_softmax(T(s)).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert np.all(np.triu(p[0], 1) == 0) and np.all(np.triu(p[1], 1) == 0)

    def test_grad(self, rng):
        s = T(rng.normal(size=(2, 5, 5)))
        w = rng.normal(size=(2, 5, 5))
        assert nx.grad_check(lambda s: (nx.masked_softmax(s) * Tensor(w)).sum(), s) < 1e-6


class TestNorms:
    def test_layer_norm_constant(self):
        out = nx.layer_norm(T([[2.0, 2.0, 2.0]]), T(np.ones(3)), T(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_two_points(self):
        out = nx.layer_norm(T([[1.0, 3.0]]), T(np.ones(2)), T(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_layer_norm_scalar_loop(self, rng):
        x, g, b = rng.normal(size=7), rng.normal(size=7), rng.normal(size=7)
        mean = sum(x) / 7
        var = sum((v - mean) ** 2 for v in x) / 7
        ref = [(v - mean) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(x, g, b)]
        out = nx.layer_norm(T(x[None]), T(g), T(b))
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12)

    def test_rms_norm_values(self):
        ones = nx.rms_norm(T([[1.0, 1.0]]), T(np.ones(2)), eps=1e-12)
        np.testing.assert_allclose(ones.data, [[1.0, 1.0]], atol=1e-9)
        out = nx.rms_norm(T([[3.0, 4.0]]), T(np.ones(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[3 / math.sqrt(12.5), 4 / math.sqrt(12.5)]], atol=1e-9)
        zero = nx.rms_norm(T([[0.0, 0.0, 0.0]]), T(np.ones(3)), eps=1e-5)
        assert np.all(zero.data == 0)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nx.rms_norm(T([[1.0]]), T([1.0]), eps=0.0)

    @pytest.mark.parametrize("kind", ["layer", "rms"])
    def test_grads(self, kind, rng):
        x, g, b = T(rng.normal(size=(3, 6))), T(rng.normal(size=6)), T(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))
        if kind == "layer":
            err = nx.grad_check(lambda x, g, b: (nx.layer_norm(x, g, b) * w).sum(), [x, g, b])
        else:
            err = nx.grad_check(lambda x, g: (nx.rms_norm(x, g) * w).sum(), [x, g])
        assert err < 1e-6


class TestActivations:
    def test_relu(self):
        assert nx.relu(T([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_subgradient_zero(self):
        x = T([0.0])
        nx.backward(nx.relu(x).sum())
        assert x.grad.tolist() == [0.0]

    def test_silu(self):
        assert nx.silu(T([0.0])).data[0] == 0.0
        np.testing.assert_allclose(nx.silu(T([1.0])).data[0], 1 / (1 + math.exp(-1)), rtol=1e-12)

    def test_silu_extreme_inputs_are_finite(self):
        assert np.all(np.isfinite(nx.silu(T([-1e4, 1e4])).data))

    def test_relu_grad_away_from_kink(self):
        x = T([-1.5, -0.3, 0.4, 2.0])
        assert nx.grad_check(lambda x: (nx.relu(x) * nx.relu(x)).sum(), x) < 1e-6

    def test_silu_grad(self, rng):
        x = T(rng.normal(size=8) * 3)
        assert nx.grad_check(lambda x: nx.silu(x).sum(), x) < 1e-6

    def test_rotary_preserves_norm_and_grad(self, rng):
        from lpa.layers import rotary_tables

        cos, sin = rotary_tables(5, 4)
        x = T(rng.normal(size=(2, 5, 4)))
        y = nx.rotary(x, cos, sin)
        np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1))
        w = Tensor(rng.normal(size=(2, 5, 4)))
        assert nx.grad_check(lambda x: (nx.rotary(x, cos, sin) * w).sum(), x) < 1e-6


class TestCrossEntropy:
    def test_uniform(self):
        loss = nx.cross_entropy(T(np.zeros((3, 11))), np.array([0, 5, 10]))
        assert loss.item() == pytest.approx(math.log(11), abs=1e-12)

    def test_saturated(self):
        assert nx.cross_entropy(T([[10.0, -10.0]]), np.array([0])).item() <= 1e-4

    def test_against_logsumexp(self, rng):
        z, t = rng.normal(size=(3, 5)), np.array([4, 0, 2])
        ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, t)])
        assert nx.cross_entropy(T(z), t).item() == pytest.approx(ref, abs=1e-12)

    def test_bad_target(self):
        with pytest.raises(IndexError):
            nx.cross_entropy(T(np.zeros((1, 3))), np.array([3]))

    def test_grad(self, rng):
        z = T(rng.normal(size=(4, 6)))
        assert nx.grad_check(lambda z: nx.cross_entropy(z, np.array([1, 2, 3, 5])), z) < 1e-6


class TestBackward:
    def test_square(self):
        x = T(3.0)
        nx.backward(x * x)
        assert x.grad == 6.0

    def test_non_scalar_root(self):
        with pytest.raises(ValueError):
            nx.backward(T([1.0, 2.0]) * 2.0)

    def test_shared_subexpression(self):
        x = T(2.0)
        y = x * x
        nx.backward(y * y + y)
        assert x.grad == pytest.approx(4 * 8 + 4)

    def test_broadcast_add_grad(self, rng):
        a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=4))
        assert nx.grad_check(lambda a, b: ((a + b) * (a - b)).sum(), [a, b]) < 1e-6

    def test_embedding(self, rng):
        w = T(rng.normal(size=(5, 3)))
        idx = np.array([[0, 4, 4]])
        assert nx.grad_check(lambda w: (nx.embedding(w, idx) * nx.embedding(w, idx)).sum(), w) < 1e-6
        with pytest.raises(IndexError):
            nx.embedding(w, np.array([5]))

    def test_no_grad_builds_no_graph(self):
        x = T(2.0)
        with nx.no_grad():
            y = x * x
        assert not y.requires_grad

    def test_deep_chain_is_iterative(self):
        x = T(1.0)
        y = x
        for _ in range(5000):
            y = y * 1.0
        nx.backward(y)
        assert x.grad == 1.0

    def test_deterministic(self, rng):
        a = rng.normal(size=(4, 4))
        outs = [nx.masked_softmax(T(a) @ T(a)).data.tobytes() for _ in range(2)]
        assert outs[0] == outs[1]


class TestGradCheck:
    def test_linear_exact(self, rng):
        # no truncation error for a linear map, so a wide step keeps roundoff small too
        w = rng.normal(size=6)
        assert nx.grad_check(lambda x: (x * Tensor(w)).sum(), T(rng.normal(size=6)), step=1e-2) < 1e-10

    def test_detects_wrong_gradient(self):
        def bad(x):
            out = x * x
            orig = out._backward

            def wrong(g):
                grads = orig(g)
                return tuple(v * 2 if v is not None else None for v in grads)

            out._backward = wrong
            return out.sum()

        assert nx.grad_check(bad, T([1.0, 2.0])) > 0.1

    def test_non_contiguous_input(self, rng):
        x = Tensor(rng.normal(size=(4, 3)).T, requires_grad=True)
        assert nx.grad_check(lambda x: (x * x).sum(), x) < 1e-8

    def test_lpa_model_loss(self):
        from lpa.verify import model_grad_error, tiny_config

        assert model_grad_error(tiny_config("setting1", "attn")) < 1e-4
