import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmixup import autodiff as ad
from xmixup.autodiff import (AutodiffError, GradTape, Tensor, backward,
                             finite_diff_grad, max_rel_error)
from xmixup.gradcheck import ALL_CHECKS, TOLERANCE


class TestTensor:
    def test_shape_matches_data(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.size == 4

    def test_rejects_non_finite(self):
        with pytest.raises(AutodiffError, match="non-finite"):
            Tensor([1.0, float("nan")])
        with pytest.raises(AutodiffError, match="non-finite"):
            Tensor([float("inf")])

    def test_detach_blocks_gradients(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = ad.sum_all(ad.mul(x.detach(), x.detach()))
        assert tape.grad(loss, [x])[0].tolist() == [0.0, 0.0]


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0]]))
        assert out.data.tolist() == [[0.5, 0.5]]

    def test_stabilized_against_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_golden_row(self):
        # exp/sum evaluated by hand on a calculator before the build
        golden = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
        out = ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, golden, rtol=0, atol=1e-15)

    def test_non_finite_input_rejected(self):
        t = Tensor.__new__(Tensor)
        t.data = np.array([[1.0, np.inf]])
        t.requires_grad = False
        with pytest.raises(AutodiffError, match="non-finite"):
            ad.softmax_rows(t)

    def test_all_masked_rejected(self):
        with pytest.raises(AutodiffError, match="no attendable"):
            ad.softmax_rows(Tensor([[1.0, 2.0]]), col_mask=np.array([False, False]))

    def test_masked_columns_get_exactly_zero(self):
        mask = np.array([True, False, True])
        out = ad.softmax_rows(Tensor([[5.0, 100.0, 1.0]]), col_mask=mask).data
        assert out[0, 1] == 0.0
        assert out[0].sum() == pytest.approx(1.0, abs=1e-12)

    @given(st.lists(st.lists(st.floats(-300, 300), min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(lambda rows: len({len(r) for r in rows}) == 1))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, rows):
        out = ad.softmax_rows(Tensor(rows)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_extreme_magnitudes_still_sum_to_one(self):
        out = ad.softmax_rows(Tensor([[1e308, 0.0, -1e308]])).data
        assert out.sum() == pytest.approx(1.0, abs=1e-12)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((1, 6), 5.0))
        out = ad.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 6)))

    def test_already_normalized_row_is_fixed_point(self):
        out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=0, atol=1e-15)

    def test_golden_row(self):
        # hand mean/variance arithmetic: mean 2.5, population variance 1.25
        golden = [-1.3416354199689269, -0.447211806656309,
                  0.447211806656309, 1.3416354199689269]
        out = ad.layer_norm(Tensor([[1.0, 2.0, 3.0, 4.0]]),
                            Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data[0], golden, rtol=0, atol=1e-15)

    def test_single_feature_rejected(self):
        with pytest.raises(AutodiffError, match="at least 2"):
            ad.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))

    def test_rows_standardized(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(20, 8)) * 3.0 + 1.0)
        out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
        assert np.abs(out.mean(axis=1)).max() <= 1e-10
        assert np.abs((out * out).mean(axis=1) - 1.0).max() <= 1e-8


class TestBackward:
    def test_sum_gives_ones(self):
        theta = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tape = GradTape()
        with tape:
            loss = ad.sum_all(theta)
        grads = backward(tape, loss, {"theta": theta})
        np.testing.assert_array_equal(grads["theta"].data, np.ones((2, 3)))

    def test_zero_multiplier_gives_zeros(self):
        theta = Tensor([1.0, 2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = ad.sum_all(ad.mul(theta, 0.0))
        grads = backward(tape, loss, {"theta": theta})
        np.testing.assert_array_equal(grads["theta"].data, np.zeros(2))

    def test_off_path_parameter_gets_zero_gradient(self):
        used = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([[3.0]], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = ad.sum_all(ad.mul(used, used))
        grads = backward(tape, loss, {"used": used, "unused": unused})
        np.testing.assert_array_equal(grads["unused"].data, np.zeros((1, 1)))
        np.testing.assert_array_equal(grads["used"].data, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        theta = Tensor([1.0, 2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            out = ad.mul(theta, 2.0)
        with pytest.raises(AutodiffError, match="scalar"):
            backward(tape, out, {"theta": theta})

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        tape = GradTape()
        with tape:
            loss = ad.sum_all(ad.tanh(ad.matmul(ad.softmax_rows(x), w)))
        g1 = backward(tape, loss, {"x": x, "w": w})
        g2 = backward(tape, loss, {"x": x, "w": w})
        assert np.array_equal(g1["x"].data, g2["x"].data)
        assert np.array_equal(g1["w"].data, g2["w"].data)

    def test_fanout_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = ad.sum_all(ad.add(ad.mul(x, x), ad.mul(x, 3.0)))
        grads = backward(tape, loss, {"x": x})
        np.testing.assert_allclose(grads["x"].data, [7.0])  # 2x + 3

    def test_tape_records_are_topological(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        tape = GradTape()
        with tape:
            a = ad.mul(x, 2.0)
            b = ad.add(a, x)
            ad.sum_all(ad.mul(b, a))
        seen = set()
        for rec in tape.records:
            for inp in rec.inputs:
                if inp.requires_grad and inp is not x:
                    assert id(inp) in seen, "input produced after its consumer"
            seen.add(id(rec.output))


class TestFiniteDifference:
    def test_square_function(self):
        grads = finite_diff_grad(lambda p: float(p["x"] ** 2), {"x": np.array(3.0)})
        assert grads["x"] == pytest.approx(6.0, abs=1e-6)

    def test_constant_function(self):
        grads = finite_diff_grad(lambda p: 1.5, {"x": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(grads["x"], np.zeros(2))

    def test_non_finite_evaluation_rejected(self):
        def f(p):
            return float("nan")

        with pytest.raises(AutodiffError, match="non-finite"):
            finite_diff_grad(f, {"x": np.array(1.0)})


def test_gradients_match_finite_differences_everywhere():
    # every differentiable operation on random small tensors, U(-1, 1)
    for round_idx in range(3):
        rng = np.random.default_rng(np.random.SeedSequence((41, round_idx)))
        for name, check in ALL_CHECKS:
            err = check(rng)
            assert err <= TOLERANCE, f"{name} gradient error {err:.3e}"


def test_max_rel_error_guards_near_zero():
    a = {"x": np.array([1e-9, 1.0])}
    b = {"x": np.array([0.0, 1.0001])}
    assert max_rel_error(a, b) < 2e-4


def test_broadcast_add_bias_gradient():
    x = np.random.default_rng(3).normal(size=(4, 3))
    bias = np.array([0.1, -0.2, 0.3])
    weights = np.random.default_rng(4).normal(size=(4, 3))

    def build(p):
        return ad.sum_all(ad.mul(ad.add(p["x"], p["b"]), Tensor(weights)))

    params = {"x": Tensor(x, requires_grad=True), "b": Tensor(bias, requires_grad=True)}
    tape = GradTape()
    with tape:
        loss = build(params)
    grads = backward(tape, loss, params)
    numeric = finite_diff_grad(lambda v: float(
        ((v["x"] + v["b"]) * weights).sum()), {"x": x, "b": bias})
    assert max_rel_error(grads, numeric) <= TOLERANCE


def test_log_floor_keeps_loss_finite():
    out = ad.log_clamped(Tensor([[0.0, 1.0]]))
    assert out.data[0, 0] == pytest.approx(math.log(1e-12))
    assert out.data[0, 1] == 0.0
