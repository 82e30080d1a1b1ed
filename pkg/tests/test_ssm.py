"""Scan kernels: discretization math, scan engines, dual-input routing."""

import math

import numpy as np
import pytest

from conftest import central_fd, reference_scan, rel_err
from ssmfusion import GradTape, ParamStore, Tensor, backward
from ssmfusion import tensor as T
from ssmfusion.ssm import (
    CHUNK,
    DiscretizedSsm,
    ScanState,
    SsmParams,
    _affine_scan_chunked,
    fssm_block,
    generate_and_discretize,
    init_ssm_params,
    scan_parallel,
    scan_sequential,
    ssm_block,
)
from ssmfusion.tensor import NumericError, ShapeError


def make_params(rng, channels, state, dtype=np.float64):
    store = ParamStore()
    return init_ssm_params(store, "p", channels, state, rng, dtype), store


def random_discretized(rng, length, channels, state, dtype=np.float64):
    """A valid random (A_bar in (0,1), arbitrary B_bar/C) instance."""
    a_bar = rng.uniform(0.05, 0.98, size=(length, channels, state)).astype(dtype)
    b_bar = rng.standard_normal((length, channels, state)).astype(dtype)
    c = rng.standard_normal((length, state)).astype(dtype)
    return DiscretizedSsm(Tensor(a_bar), Tensor(b_bar), Tensor(c))


class TestDiscretization:
    def test_closed_form_zoh(self, rng):
        # A = -1, delta = ln 2, B = 3  ->  A_bar = 0.5, B_bar = 3 ln 2
        p, _ = make_params(rng, 1, 1)
        p.a.data[:] = -1.0
        p.w_b.data[:] = 3.0
        p.w_delta.data[:] = 0.0
        p.bias_delta.data[:] = math.log(math.expm1(math.log(2.0)))  # softplus^-1(ln 2)
        d = generate_and_discretize(Tensor([[1.0]], dtype=np.float64), p)
        assert abs(d.a_bar.data[0, 0, 0] - 0.5) < 1e-12
        assert abs(d.b_bar.data[0, 0, 0] - 3.0 * math.log(2.0)) < 1e-12

    def test_zero_delta_limit(self, rng):
        # Injecting delta -> 0 directly: A_bar -> 1, B_bar -> 0.
        p, _ = make_params(rng, 2, 3)
        p.w_delta.data[:] = 0.0
        p.bias_delta.data[:] = -40.0  # softplus(-40) ~ 4e-18
        d = generate_and_discretize(Tensor(rng.standard_normal((4, 2)), dtype=np.float64), p)
        assert np.allclose(d.a_bar.data, 1.0, atol=1e-12)
        assert np.allclose(d.b_bar.data, 0.0, atol=1e-12)

    def test_delta_positive_for_finite_inputs(self, rng):
        p, _ = make_params(rng, 3, 2)
        x = Tensor(rng.standard_normal((50, 3)) * 3, dtype=np.float64)
        d = generate_and_discretize(x, p)
        assert np.all(d.a_bar.data > 0) and np.all(d.a_bar.data < 1)

    def test_extreme_inputs_stay_contractive(self, rng):
        # At the float boundaries exp(delta * A) rounds to exactly 1.0 (delta
        # underflowing to tiny) or 0.0 (huge delta); the recurrence stays
        # non-expanding either way and delta itself stays strictly positive.
        p, _ = make_params(rng, 3, 2)
        x = Tensor(rng.standard_normal((50, 3)) * 500, dtype=np.float64)
        d = generate_and_discretize(x, p)
        assert np.all(d.a_bar.data >= 0) and np.all(d.a_bar.data <= 1)
        v = T.linear(x, p.w_delta, p.bias_delta)
        assert np.all(T.softplus(v).data > 0)

    def test_channel_mismatch(self, rng):
        p, _ = make_params(rng, 3, 2)
        with pytest.raises(ShapeError):
            generate_and_discretize(Tensor(np.zeros((4, 2))), p)

    def test_nonnegative_state_matrix_rejected(self, rng):
        p, _ = make_params(rng, 2, 2)
        p.a.data[0, 0] = 0.0
        with pytest.raises(NumericError):
            generate_and_discretize(Tensor(np.zeros((4, 2))), p)

    def test_non_finite_delta_rejected(self, rng):
        p, _ = make_params(rng, 2, 2)
        with pytest.raises(NumericError):
            generate_and_discretize(Tensor(np.full((4, 2), np.nan)), p)


class TestScan:
    def test_hand_recurrence(self):
        # N=1, C=1, A_bar=0.5, B_bar=1, C=1, x=[1,1,1] -> y = 1, 1.5, 1.75
        d = DiscretizedSsm(
            Tensor(np.full((3, 1, 1), 0.5), dtype=np.float64),
            Tensor(np.ones((3, 1, 1)), dtype=np.float64),
            Tensor(np.ones((3, 1)), dtype=np.float64),
        )
        y = scan_sequential(Tensor([[1.0], [1.0], [1.0]], dtype=np.float64), d)
        assert np.allclose(y.data.reshape(-1), [1.0, 1.5, 1.75])

    def test_memoryless_when_a_bar_zero(self, rng):
        d = random_discretized(rng, 6, 2, 3)
        d.a_bar.data[:] = 0.0
        x = Tensor(rng.standard_normal((6, 2)), dtype=np.float64)
        y = scan_sequential(x, d)
        expect = np.einsum("tn,tcn,tc->tc", d.c_proj.data, d.b_bar.data, x.data)
        assert np.allclose(y.data, expect, atol=1e-12)

    def test_zero_input_zero_output(self, rng):
        d = random_discretized(rng, 5, 2, 2)
        y = scan_sequential(Tensor(np.zeros((5, 2)), dtype=np.float64), d)
        assert np.array_equal(y.data, np.zeros((5, 2)))

    def test_matches_bruteforce_oracle(self, rng):
        d = random_discretized(rng, 40, 3, 4)
        x = rng.standard_normal((40, 3))
        _, expect = reference_scan(d.a_bar.data, d.b_bar.data, d.c_proj.data, x)
        y = scan_sequential(Tensor(x, dtype=np.float64), d)
        assert np.allclose(y.data, expect, atol=1e-12)

    def test_parallel_equals_sequential_l1(self, rng):
        d = random_discretized(rng, 1, 4, 8)
        x = Tensor(rng.standard_normal((1, 4)), dtype=np.float64)
        assert np.allclose(scan_parallel(x, d).data, scan_sequential(x, d).data, atol=1e-14)

    def test_parallel_equals_sequential_l257(self, rng):
        d = random_discretized(rng, 257, 4, 8)
        x = Tensor(rng.standard_normal((257, 4)), dtype=np.float64)
        dev = np.abs(scan_parallel(x, d).data - scan_sequential(x, d).data).max()
        assert dev <= 1e-10

    def test_batched_matches_per_sample(self, rng):
        a = rng.uniform(0.1, 0.9, (2, 9, 3, 4))
        b = rng.standard_normal((2, 9, 3, 4))
        c = rng.standard_normal((2, 9, 4))
        x = rng.standard_normal((2, 9, 3))
        d = DiscretizedSsm(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), Tensor(c, dtype=np.float64))
        y = scan_sequential(Tensor(x, dtype=np.float64), d)
        for i in range(2):
            di = DiscretizedSsm(Tensor(a[i], dtype=np.float64), Tensor(b[i], dtype=np.float64), Tensor(c[i], dtype=np.float64))
            yi = scan_sequential(Tensor(x[i], dtype=np.float64), di)
            assert np.allclose(y.data[i], yi.data, atol=1e-13)

    def test_operator_associativity(self, rng):
        # (a1,b1) o (a2,b2) = (a2*a1, a2*b1 + b2) on random triples, both groupings.
        def compose(m1, m2):
            return (m2[0] * m1[0], m2[0] * m1[1] + m2[1])

        for _ in range(50):
            m1, m2, m3 = [tuple(rng.standard_normal(2)) for _ in range(3)]
            left = compose(compose(m1, m2), m3)
            right = compose(m1, compose(m2, m3))
            assert abs(left[0] - right[0]) <= 1e-12
            assert abs(left[1] - right[1]) <= 1e-12

    def test_linearity_in_processed_sequence(self, rng):
        d = random_discretized(rng, 33, 3, 4)
        x1 = rng.standard_normal((33, 3))
        x2 = rng.standard_normal((33, 3))
        alpha, beta = 0.7, -1.3
        lhs = scan_sequential(Tensor(alpha * x1 + beta * x2, dtype=np.float64), d).data
        rhs = alpha * scan_sequential(Tensor(x1, dtype=np.float64), d).data \
            + beta * scan_sequential(Tensor(x2, dtype=np.float64), d).data
        assert np.abs(lhs - rhs).max() <= 1e-9

    def test_stability_bound(self, rng):
        # With A_bar in (0, 1), |h_t| <= sum_{tau<=t} |B_bar x| elementwise.
        p, _ = make_params(rng, 3, 4)
        x = rng.standard_normal((60, 3))
        d = generate_and_discretize(Tensor(x, dtype=np.float64), p)
        assert np.all(d.a_bar.data > 0) and np.all(d.a_bar.data < 1)
        h, _ = reference_scan(d.a_bar.data, d.b_bar.data, d.c_proj.data, x)
        bound = np.cumsum(np.abs(d.b_bar.data * x[:, :, None]), axis=0)
        assert np.all(np.abs(h) <= bound + 1e-12)

    def test_chunk_boundary_lengths(self, rng):
        for length in (CHUNK - 1, CHUNK, CHUNK + 1, 2 * CHUNK + 3):
            d = random_discretized(rng, length, 2, 2)
            x = Tensor(rng.standard_normal((length, 2)), dtype=np.float64)
            dev = np.abs(scan_parallel(x, d).data - scan_sequential(x, d).data).max()
            assert dev <= 1e-10, length

    def test_deep_chunk_recursion(self, rng):
        # Summary count above CHUNK exercises the recursive summary scan.
        g, length = 1, CHUNK * CHUNK + 7
        a = rng.uniform(0.2, 0.95, (g, length, 2))
        b = rng.standard_normal((g, length, 2))
        got = _affine_scan_chunked(a, b)
        expect = np.empty_like(b)
        state = np.zeros(2)
        for t in range(length):
            state = a[0, t] * state + b[0, t]
            expect[0, t] = state
        assert np.abs(got - expect).max() <= 1e-9

    def test_scan_state_zeros(self):
        s = ScanState.zeros(3, 4)
        assert s.h.shape == (3, 4) and not s.h.any()


class TestBlocks:
    def test_ssm_block_equals_composed_path(self, rng):
        p, _ = make_params(rng, 3, 4)
        x = Tensor(rng.standard_normal((37, 3)), dtype=np.float64)
        composed = scan_sequential(x, generate_and_discretize(x, p))
        fused = ssm_block(x, p)
        assert np.abs(composed.data - fused.data).max() <= 1e-12

    def test_zero_input_zero_output(self, rng):
        p, _ = make_params(rng, 2, 3)
        y = ssm_block(Tensor(np.zeros((9, 2)), dtype=np.float64), p)
        assert np.array_equal(y.data, np.zeros((9, 2)))

    def test_fssm_on_equal_inputs_is_ssm_bitwise(self, rng):
        p, _ = make_params(rng, 4, 4)
        x = Tensor(rng.standard_normal((23, 4)), dtype=np.float64)
        assert np.array_equal(fssm_block(x, x, p).data, ssm_block(x, p).data)

    def test_zero_processed_sequence(self, rng):
        p, _ = make_params(rng, 3, 4)
        x_b = Tensor(rng.standard_normal((11, 3)), dtype=np.float64)
        y = fssm_block(Tensor(np.zeros((11, 3)), dtype=np.float64), x_b, p)
        assert np.array_equal(y.data, np.zeros((11, 3)))

    def test_interaction_mode_sweep(self, rng):
        p, _ = make_params(rng, 3, 2)
        x_a = Tensor(rng.standard_normal((8, 3)), dtype=np.float64)
        x_b = Tensor(rng.standard_normal((8, 3)), dtype=np.float64)
        outputs = []
        for use_b in (False, True):
            for use_c in (False, True):
                for use_d in (False, True):
                    y = fssm_block(x_a, x_b, p, interaction=(use_b, use_c, use_d))
                    assert y.shape == (8, 3)
                    outputs.append(y.data)
        assert len(outputs) == 8
        # all-off ignores the partner entirely
        assert np.array_equal(outputs[0], ssm_block(x_a, p).data)

    def test_length_mismatch_rejected(self, rng):
        p, _ = make_params(rng, 3, 2)
        with pytest.raises(ShapeError):
            fssm_block(Tensor(np.zeros((4, 3))), Tensor(np.zeros((5, 3))), p)

    def test_causality(self, rng):
        # Perturbing the processed sequence at position t changes outputs
        # only at positions >= t.
        p, _ = make_params(rng, 3, 4)
        x_a = rng.standard_normal((20, 3))
        x_b = Tensor(rng.standard_normal((20, 3)), dtype=np.float64)
        base = fssm_block(Tensor(x_a, dtype=np.float64), x_b, p).data
        t = 7
        bumped = x_a.copy()
        bumped[t] += rng.standard_normal(3)
        out = fssm_block(Tensor(bumped, dtype=np.float64), x_b, p).data
        assert np.array_equal(out[:t], base[:t])
        assert not np.allclose(out[t:], base[t:])


class TestScanGradients:
    def test_ssm_block_gradcheck(self, rng):
        # L=16, C=2, N=4 per the block contract.
        p, store = make_params(rng, 2, 4)
        x = Tensor(rng.standard_normal((16, 2)), requires_grad=True, dtype=np.float64)
        probe = rng.standard_normal((16, 2))

        def f():
            return float((ssm_block(x, p).data * probe).sum())

        with GradTape() as tape:
            loss = T.sum_all(T.mul(ssm_block(x, p), Tensor(probe, dtype=np.float64)))
        backward(loss, tape, store)
        worst = 0.0
        for t in [x] + store.tensors():
            flat = t.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                worst = max(worst, rel_err(t.grad.reshape(-1)[i], central_fd(f, t.data, i)))
        assert worst <= 1e-4

    def test_fssm_both_inputs_get_gradients(self, rng):
        p, store = make_params(rng, 2, 3)
        x_a = Tensor(rng.standard_normal((10, 2)), requires_grad=True, dtype=np.float64)
        x_b = Tensor(rng.standard_normal((10, 2)), requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            loss = T.sum_all(fssm_block(x_a, x_b, p))
        backward(loss, tape, store)
        assert np.abs(x_a.grad).max() > 0
        assert np.abs(x_b.grad).max() > 0

    def test_scan_op_gradients_vs_fd(self, rng):
        # Gradients through explicit (A_bar, B_bar, C) tensors.
        a = rng.uniform(0.1, 0.9, (12, 2, 3))
        b = rng.standard_normal((12, 2, 3))
        c = rng.standard_normal((12, 3))
        x = rng.standard_normal((12, 2))
        probe = rng.standard_normal((12, 2))
        ts = [Tensor(v, requires_grad=True, dtype=np.float64) for v in (a, b, c, x)]

        def f():
            d = DiscretizedSsm(ts[0], ts[1], ts[2])
            return float((scan_parallel(ts[3], d).data * probe).sum())

        with GradTape() as tape:
            d = DiscretizedSsm(ts[0], ts[1], ts[2])
            loss = T.sum_all(T.mul(scan_parallel(ts[3], d), Tensor(probe, dtype=np.float64)))
        backward(loss, tape)
        worst = 0.0
        for t in ts:
            flat = t.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                worst = max(worst, rel_err(t.grad.reshape(-1)[i], central_fd(f, t.data, i)))
        assert worst <= 1e-4
