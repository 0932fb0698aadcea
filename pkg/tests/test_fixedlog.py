"""Tests for clip, Q6.10 conversion and shift-add Log2Exp."""

import math

import numpy as np
import pytest

from expmul_attn import ContractError, DomainError, FixedQ, clip, log2exp, to_fixed
from expmul_attn.fixedlog import (
    LHAT_MAX,
    arithmetic_shift_right,
    from_fixed,
    log2exp_ideal,
    shift_add_log2e,
)

LOG2E = math.log2(math.e)


@pytest.fixture(scope="module")
def grid():
    return np.linspace(-15.0, 0.0, 1 << 14)


class TestClip:
    """Test clamping into [-15, 0]."""

    @pytest.mark.parametrize("x,expected", [
        (-100.0, -15.0),
        (-15.0, -15.0),
        (-0.75, -0.75),
        (0.0, 0.0),
        (5.0, 0.0),
        (float("-inf"), -15.0),
    ])
    def test_values(self, x, expected):
        """Values clamp to the interval; -inf is the low end."""
        assert clip(x) == expected

    def test_nan_rejected(self):
        """NaN is a domain error."""
        with pytest.raises(DomainError):
            clip(float("nan"))


class TestToFixed:
    """Test conversion to Q6.10."""

    def test_integers(self):
        """Whole numbers scale by 1024."""
        assert to_fixed(-1.0).raw == -1024
        assert to_fixed(0.0).raw == 0
        assert to_fixed(-15.0).raw == -15360

    def test_third(self):
        """FP32 -1/3 rounds to -341."""
        assert to_fixed(np.float32(-1.0 / 3.0)).raw == -341

    def test_ties_to_even(self):
        """Half-unit inputs round to the even raw value."""
        assert to_fixed(-0.5 / 1024).raw == 0
        assert to_fixed(-1.5 / 1024).raw == -2
        assert to_fixed(-2.5 / 1024).raw == -2

    @pytest.mark.parametrize("x", [0.5, -15.5, float("nan")])
    def test_out_of_range(self, x):
        """Unclipped inputs are contract violations."""
        with pytest.raises(ContractError):
            to_fixed(x)

    def test_word_is_twos_complement(self):
        """The register image of -1 is all ones."""
        assert FixedQ(-1).word == 0xFFFF
        assert FixedQ(-1024).value == -1.0
        assert from_fixed(FixedQ(512)) == 0.5

    def test_raw_range(self):
        """Raw values must fit 16 bits."""
        FixedQ(-32768)
        FixedQ(32767)
        with pytest.raises(ContractError):
            FixedQ(40000)


class TestShifts:
    """Test the shift-add multiplier."""

    def test_arithmetic_shift_is_floor(self):
        """Right shifts floor toward -inf, propagating the sign."""
        for r in range(-32768, 32768, 7):
            for k in (1, 4):
                assert arithmetic_shift_right(r, k) == r // (1 << k)

    def test_pinned_products(self):
        """-1 and -15 scale to -1472 and -22080 raw units."""
        assert shift_add_log2e(to_fixed(-1.0)) == -1472
        assert shift_add_log2e(to_fixed(-15.0)) == -22080
        assert shift_add_log2e(to_fixed(0.0)) == 0


class TestLog2Exp:
    """Test the exponent-decrement estimator."""

    @pytest.mark.parametrize("x,expected", [
        (0.0, 0),
        (-0.0, 0),
        (-1.0, 1),
        (-15.0, 22),
        (-100.0, 22),
        (float("-inf"), 22),
    ])
    def test_pinned(self, x, expected):
        """Known inputs give known decrements."""
        assert log2exp(x) == expected

    def test_positive_rejected(self):
        """x > 0 is a contract violation."""
        with pytest.raises(ContractError):
            log2exp(0.25)

    def test_nan_rejected(self):
        """NaN is a domain error."""
        with pytest.raises(DomainError):
            log2exp(float("nan"))

    def test_range(self, grid):
        """Every decrement lies in [0, 22]."""
        values = np.array([log2exp(x) for x in grid])
        assert values.min() == 0
        assert values.max() == LHAT_MAX

    def test_monotone(self, grid):
        """Decrements never grow as x increases."""
        values = np.array([log2exp(x) for x in grid])
        assert np.all(np.diff(values) <= 0)

    def test_envelope(self, grid):
        """|L + x log2 e| stays within 0.59 over the clipped range."""
        worst = max(abs(log2exp(x) + x * LOG2E) for x in grid)
        assert worst <= 0.59

    def test_ideal_within_one(self, grid):
        """The shift-add estimate is never more than one from the exact rounding."""
        assert all(abs(log2exp(x) - log2exp_ideal(x)) <= 1 for x in grid)

    def test_ideal_rejects_non_finite(self):
        """The unclipped estimator has no sentinel handling."""
        with pytest.raises(ContractError):
            log2exp_ideal(float("-inf"))
