"""Optimizer tests against a naive step-by-step reference implementation."""

import math

import numpy as np
import pytest

from sjea.errors import ContractViolation
from sjea.optim import Adam, cosine_lr
from sjea.tensor import Tensor

# ---------------------------------------------------------------------------
# naive reference (explicit bias-corrected moments, scalar loops)
# ---------------------------------------------------------------------------


def naive_adam_trajectory(p0, grads, lr, betas, eps, weight_decay):
    """Apply the update rule one scalar at a time; returns params after each step."""
    b1, b2 = betas
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = []
    for t, g in enumerate(grads, start=1):
        g = g.astype(np.float64)
        for idx in np.ndindex(p.shape):
            m[idx] = b1 * m[idx] + (1 - b1) * g[idx]
            v[idx] = b2 * v[idx] + (1 - b2) * g[idx] ** 2
            mhat = m[idx] / (1 - b1 ** t)
            vhat = v[idx] / (1 - b2 ** t)
            step = mhat / (math.sqrt(vhat) + eps)
            if weight_decay:
                step += weight_decay * p[idx]
            p[idx] -= lr * step
        out.append(p.copy())
    return out


def make_param(rng, shape):
    return Tensor(rng.normal(size=shape).astype(np.float64), requires_grad=True)


class TestAdamOracle:
    @pytest.mark.parametrize("weight_decay", [0.0, 1e-2])
    def test_matches_naive_reference_over_five_steps(self, weight_decay):
        """Vectorized updates equal the scalar-loop reference at every step."""
        rng = np.random.default_rng(7)
        p = make_param(rng, (3, 4))
        grads = [rng.normal(size=(3, 4)) for _ in range(5)]
        expected = naive_adam_trajectory(
            p.data, grads, lr=1e-2, betas=(0.9, 0.999), eps=1e-8,
            weight_decay=weight_decay)

        opt = Adam([("w", p)], lr=1e-2, weight_decay=weight_decay)
        for g, want in zip(grads, expected):
            p.grad = g.copy()
            opt.step()
            np.testing.assert_allclose(p.data, want, rtol=1e-12, atol=1e-14)

    def test_first_step_moves_by_lr_regardless_of_grad_scale(self):
        """Bias correction makes the first unit-decay step approach sign(g) * lr."""
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam([("w", p)], lr=0.1)
        p.grad = np.array([1e-3, 4.0, -250.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.1, -0.1, 0.1], rtol=1e-4)

    def test_param_without_grad_is_skipped(self):
        """A parameter whose grad is None keeps its value and zero moments."""
        rng = np.random.default_rng(0)
        a = make_param(rng, (2,))
        b = make_param(rng, (2,))
        before = b.data.copy()
        opt = Adam([("a", a), ("b", b)], lr=0.1)
        a.grad = np.ones(2)
        opt.step()
        np.testing.assert_array_equal(b.data, before)
        np.testing.assert_array_equal(opt.state_dict()["v"]["b"], np.zeros(2))

    def test_zero_grad_clears_all_params(self):
        p = make_param(np.random.default_rng(1), (2, 2))
        opt = Adam([("w", p)])
        p.grad = np.ones((2, 2))
        opt.zero_grad()
        assert p.grad is None

    def test_float32_params_stay_float32(self):
        """Updates must not silently promote single-precision parameters."""
        p = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        opt = Adam([("w", p)], lr=1e-3, weight_decay=1e-6)
        p.grad = np.full((2, 2), 0.5, dtype=np.float32)
        opt.step()
        assert p.data.dtype == np.float32


class TestAdamValidation:
    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ContractViolation):
            Adam([], lr=0.0)

    def test_beta_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            Adam([], betas=(0.9, 1.0))

    def test_duplicate_names_rejected(self):
        p = Tensor(np.ones(1), requires_grad=True)
        with pytest.raises(ContractViolation):
            Adam([("w", p), ("w", p)])


class TestAdamState:
    def test_state_round_trip_reproduces_next_update(self):
        """Fresh optimizer + restored state takes a bit-identical next step."""
        rng = np.random.default_rng(3)
        p = make_param(rng, (4,))
        opt = Adam([("w", p)], lr=5e-3, weight_decay=1e-4)
        for _ in range(3):
            p.grad = rng.normal(size=4)
            opt.step()
        state = opt.state_dict()
        frozen = p.data.copy()
        next_grad = rng.normal(size=4)

        p.grad = next_grad.copy()
        opt.step()
        reference = p.data.copy()

        q = Tensor(frozen.copy(), requires_grad=True)
        opt2 = Adam([("w", q)], lr=5e-3, weight_decay=1e-4)
        opt2.load_state_dict(state)
        q.grad = next_grad.copy()
        opt2.step()
        np.testing.assert_array_equal(q.data, reference)

    def test_state_dict_copies_are_independent(self):
        """Mutating a snapshot must not reach the live optimizer buffers."""
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([("w", p)])
        p.grad = np.ones(2)
        opt.step()
        snap = opt.state_dict()
        snap["m"]["w"][:] = 99.0
        assert opt.state_dict()["m"]["w"][0] != 99.0

    def test_mismatched_names_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([("w", p)])
        with pytest.raises(ContractViolation):
            opt.load_state_dict({"t": 1, "m": {"x": np.ones(2)}, "v": {"x": np.ones(2)}})

    def test_mismatched_shape_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([("w", p)])
        with pytest.raises(ContractViolation):
            opt.load_state_dict({"t": 1, "m": {"w": np.ones(3)}, "v": {"w": np.ones(3)}})


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        """Starts at base, ends at min, midpoint is the arithmetic mean."""
        assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
        assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
        assert cosine_lr(1e-3, 50, 100, min_lr=1e-4) == pytest.approx(5.5e-4)

    def test_monotone_decreasing(self):
        vals = [cosine_lr(0.2, s, 40, min_lr=0.01) for s in range(41)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == pytest.approx(0.01)

    def test_steps_past_total_clamp_to_min(self):
        assert cosine_lr(1.0, 500, 100, min_lr=0.05) == pytest.approx(0.05)

    def test_invalid_total_rejected(self):
        with pytest.raises(ContractViolation):
            cosine_lr(1.0, 0, 0)

    def test_warmup_ramps_linearly_to_base(self):
        """The ramp hits base exactly at the last warmup step, no overshoot."""
        vals = [cosine_lr(0.8, s, 100, warmup_steps=10) for s in range(10)]
        np.testing.assert_allclose(vals, 0.8 * (np.arange(10) + 1) / 10,
                                   rtol=1e-12)
        assert cosine_lr(0.8, 10, 100, warmup_steps=10) == pytest.approx(0.8)

    def test_warmup_then_cosine_is_unimodal(self):
        """Nondecreasing through warmup, nonincreasing afterwards."""
        vals = [cosine_lr(0.2, s, 60, min_lr=0.01, warmup_steps=12)
                for s in range(61)]
        assert all(a <= b for a, b in zip(vals[:12], vals[1:12]))
        assert all(a >= b for a, b in zip(vals[12:], vals[13:]))
        assert vals[-1] == pytest.approx(0.01)

    def test_zero_warmup_matches_plain_cosine(self):
        for step in (0, 7, 40):
            assert cosine_lr(0.3, step, 40, min_lr=0.02, warmup_steps=0) == \
                cosine_lr(0.3, step, 40, min_lr=0.02)

    def test_constant_floor_with_warmup(self):
        """min_lr equal to base gives a flat schedule after the ramp."""
        vals = [cosine_lr(0.1, s, 50, min_lr=0.1, warmup_steps=5)
                for s in range(5, 50)]
        np.testing.assert_array_equal(vals, 0.1)

    def test_negative_warmup_rejected(self):
        with pytest.raises(ContractViolation):
            cosine_lr(1.0, 0, 10, warmup_steps=-1)
