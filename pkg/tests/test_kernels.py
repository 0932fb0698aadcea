"""Tests for the attention kernels."""

import math

import numpy as np
import pytest

from expmul_attn import (
    ConfigError,
    DomainError,
    Dtype,
    ExpMode,
    KernelKind,
    KernelStats,
    KernelTag,
    MergedState,
    Precision,
    ShapeError,
    Tensor,
    attention_baseline_lazy,
    attention_flash2,
    attention_flash2_expmul,
    compare,
    dot,
    log2exp,
    max_update,
    oracle_attention,
    run_kernel,
)
from expmul_attn.config import RunConfig
from expmul_attn.floatbits import quantize
from expmul_attn.generate import generate_instance

ALL_KINDS = [
    KernelKind(KernelTag.BASELINE_LAZY),
    KernelKind(KernelTag.BASELINE_LAZY, ExpMode.PWL),
    KernelKind(KernelTag.FLASH2_EXACT),
    KernelKind(KernelTag.FLASH2_EXACT, ExpMode.PWL),
    KernelKind(KernelTag.FLASH2_EXPMUL),
]

# ExpMul accuracy against the oracle on the nominal instance (seed 0, d=16, N=64, n_q=8, FP32).
EXPMUL_COSINE_MIN = 0.953427
EXPMUL_MAX_REL_ERR = 17.8320


def bits(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.data).view(np.uint32 if t.data.dtype == np.float32 else np.uint64)


def random_instance(rng, n_q, n, d, bound=8.0, dtype=Dtype.FP32):
    amplitude = math.sqrt(bound / d)
    return (
        Tensor.from_array(rng.uniform(-1.0, 1.0, size=(n_q, d)) * amplitude, dtype),
        Tensor.from_array(rng.uniform(-1.0, 1.0, size=(n, d)) * amplitude, dtype),
        Tensor.from_array(rng.uniform(-1.0, 1.0, size=(n, d)), dtype),
    )


def expmul_weight_replay(Q: Tensor, K: Tensor, V: Tensor) -> np.ndarray:
    """Double-precision attention using the ExpMul kernel's power-of-two weights."""
    out = np.zeros((Q.rows, V.cols))
    for j in range(Q.rows):
        q = Q.row(j)
        m = np.float32(-math.inf)
        ell, o = 0.0, np.zeros(V.cols)
        for k, v in zip(K.data, V.data):
            s = dot(q, k, Q.dtype)
            m_new = max_update(m, s)
            carry = 2.0 ** -log2exp(m - m_new)
            weight = 2.0 ** -log2exp(s - m_new)
            ell = ell * carry + weight
            o = o * carry + v.astype(np.float64) * weight
            m = m_new
        out[j] = o / ell
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="module")
def nominal():
    return generate_instance(RunConfig(d=16, seq_len=64, n_q=8, seed=0))


class TestPrimitives:
    """Test dot, max_update and the merged state."""

    def test_dot_examples(self):
        """Small dot products are exact."""
        assert dot(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])) == 32.0
        assert dot(np.array([1.0, -1.0]), np.array([1.0, 1.0])) == 0.0

    def test_dot_bf16_rounds(self):
        """BF16 dot results carry eight significant bits."""
        s = dot(np.array([1.0]), np.array([257.0]), Dtype.BF16)
        assert s == 256.0

    def test_dot_double(self):
        """Lifted dot products return Python floats."""
        assert isinstance(dot(np.ones(3), np.ones(3), precision=Precision.DOUBLE), float)

    def test_dot_shape_mismatch(self):
        """Vectors of different length are rejected."""
        with pytest.raises(ShapeError):
            dot(np.ones(2), np.ones(3))

    def test_max_update(self):
        """The running maximum starts at -inf and keeps ties."""
        assert max_update(-math.inf, -5.0) == -5.0
        assert max_update(3.0, 1.0) == 3.0
        assert max_update(1.0, 3.0) == 3.0
        with pytest.raises(DomainError):
            max_update(0.0, float("nan"))

    def test_initial_state(self):
        """A fresh state has m = -inf and a zero [l, o]."""
        state = MergedState.initial(3)
        assert state.m == -math.inf
        assert state.merged.tolist() == [0.0, 0.0, 0.0, 0.0]
        assert state.ell == 0.0
        assert state.out.shape == (3,)


class TestKernelKind:
    """Test kernel selection."""

    def test_exact_kernels_default_to_accurate(self):
        """Omitting the mode selects the accurate exponential."""
        assert KernelKind(KernelTag.FLASH2_EXACT).exp_mode is ExpMode.ACCURATE

    def test_expmul_rejects_mode(self):
        """ExpMul has no exponential to configure."""
        with pytest.raises(ConfigError):
            KernelKind(KernelTag.FLASH2_EXPMUL, ExpMode.PWL)

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.label)
    def test_labels(self, kind):
        """Labels parse back to the same kind."""
        assert KernelKind.from_label(kind.label) == kind

    @pytest.mark.parametrize("label", ["flash3", "flash2-expmul-pwl", "flash2-pwl-x"])
    def test_bad_labels(self, label):
        """Unknown labels are configuration errors."""
        with pytest.raises(ConfigError):
            KernelKind.from_label(label)

    def test_parse_ignores_mode_for_expmul(self):
        """The --exp option has no effect on ExpMul."""
        assert KernelKind.parse("flash2-expmul", "pwl") == KernelKind(KernelTag.FLASH2_EXPMUL)


class TestTensor:
    """Test tensor ingest."""

    def test_rejects_nan(self):
        """Non-finite inputs are domain errors."""
        with pytest.raises(DomainError):
            Tensor.from_array([[1.0, np.nan]])

    def test_rejects_bf16_overflow(self):
        """Values that round past the BF16 range are refused."""
        with pytest.raises(DomainError):
            Tensor.from_array([[3.4e38]], Dtype.BF16)

    def test_vector_becomes_row(self):
        """1-D input is one row."""
        t = Tensor.from_array([1.0, 2.0])
        assert (t.rows, t.cols) == (1, 2)

    def test_read_only(self):
        """Ingested data cannot be changed in place."""
        t = Tensor.from_array([[1.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 2.0

    def test_mixed_dtypes(self):
        """Q, K and V must share a dtype."""
        q = Tensor.from_array([[1.0]])
        kv = Tensor.from_array([[1.0]], Dtype.BF16)
        with pytest.raises(ShapeError):
            attention_flash2(q, kv, kv)

    def test_empty_sequence(self):
        """N = 0 is a domain error for every kernel."""
        q = Tensor.from_array([[1.0, 2.0]])
        empty = Tensor(np.zeros((0, 2), dtype=np.float32))
        for kind in ALL_KINDS:
            with pytest.raises(DomainError):
                run_kernel(kind, q, empty, empty)

    def test_width_mismatch(self):
        """Query and key widths must agree."""
        with pytest.raises(ShapeError):
            attention_baseline_lazy(Tensor.from_array([[1.0]]), Tensor.from_array([[1.0, 2.0]]),
                                    Tensor.from_array([[1.0]]))


class TestExactOutputs:
    """Test outputs that are known bit-for-bit."""

    @pytest.mark.parametrize("dtype", list(Dtype), ids=lambda d: d.value)
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.label)
    def test_single_key(self, kind, dtype):
        """With one key every kernel returns the value row."""
        q = Tensor.from_array([[0.5, -1.25, 2.0]], dtype)
        k = Tensor.from_array([[1.5, 0.75, -3.0]], dtype)
        v = Tensor.from_array([[0.1, -7.0, 3.0e-3]], dtype)
        out = run_kernel(kind, q, k, v)
        assert np.array_equal(bits(out), bits(v))

    @pytest.mark.parametrize("dtype", list(Dtype), ids=lambda d: d.value)
    def test_expmul_equal_scores(self, dtype, rng):
        """A zero query gives L = 0 everywhere: the output is the rounded running sum over N."""
        n = 37
        q = Tensor.from_array(np.zeros((1, 4)), dtype)
        k = Tensor.from_array(rng.standard_normal((n, 4)), dtype)
        v = Tensor.from_array(rng.standard_normal((n, 4)), dtype)
        acc = np.zeros(4, dtype=np.float32)
        for row in v.data:
            acc = quantize(acc + row, dtype)
        expected = quantize(acc / np.float32(n), dtype)
        out = attention_flash2_expmul(q, k, v)
        assert np.array_equal(out.data[0].view(np.uint32), expected.view(np.uint32))

    @pytest.mark.parametrize("kind", ALL_KINDS[::2], ids=lambda k: k.label)
    def test_two_equal_scores_average(self, kind):
        """Two equally scored keys average their values."""
        q = Tensor.from_array([[0.0, 0.0]])
        k = Tensor.from_array([[1.0, 2.0], [-3.0, 4.0]])
        v = Tensor.from_array([[1.0, 0.0], [0.0, 1.0]])
        assert run_kernel(kind, q, k, v).data.tolist() == [[0.5, 0.5]]

    def test_expmul_permutation_after_unique_max(self):
        """With the maximum first, reordering the rest changes no bit."""
        rng = np.random.default_rng(99)
        n = 8
        scores = np.concatenate([[3.0], rng.integers(0, 12, size=n - 1) * 0.25])
        q = Tensor.from_array([[1.0]])
        k = Tensor.from_array(scores.reshape(-1, 1))
        v = Tensor.from_array(rng.integers(-3, 4, size=(n, 4)).astype(float))
        reference = attention_flash2_expmul(q, k, v)
        for _ in range(5):
            order = np.concatenate([[0], 1 + rng.permutation(n - 1)])
            out = attention_flash2_expmul(q, k.select_rows(order), v.select_rows(order))
            assert np.array_equal(bits(out), bits(reference))


class TestOnlineSoftmax:
    """Test the online-softmax identity in double precision."""

    def test_flash2_matches_two_pass(self, rng):
        """100 random instances agree to 1e-12 across N and d."""
        lengths = [1, 2, 17, 64, 256]
        dims = [1, 2, 16, 64]
        for i in range(100):
            n, d = lengths[i % len(lengths)], dims[(i // len(lengths)) % len(dims)]
            Q, K, V = random_instance(rng, 2, n, d)
            flash = attention_flash2(Q, K, V, precision=Precision.DOUBLE)
            base = attention_baseline_lazy(Q, K, V, precision=Precision.DOUBLE)
            np.testing.assert_allclose(flash.data, base.data, rtol=1e-12, atol=1e-12)

    def test_double_matches_oracle(self, rng):
        """Lifted kernels agree with the direct formula."""
        Q, K, V = random_instance(rng, 4, 64, 16)
        ref = oracle_attention(Q, K, V)
        for kernel in (attention_baseline_lazy, attention_flash2):
            out = kernel(Q, K, V, precision=Precision.DOUBLE)
            np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)

    def test_permutation_invariance(self, rng):
        """Reordering keys and values together does not change the result."""
        Q, K, V = random_instance(rng, 3, 50, 8)
        order = rng.permutation(50)
        for kernel in (attention_baseline_lazy, attention_flash2):
            a = kernel(Q, K, V, precision=Precision.DOUBLE)
            b = kernel(Q, K.select_rows(order), V.select_rows(order), precision=Precision.DOUBLE)
            np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-12)

    def test_score_shift_invariance(self, rng):
        """Adding a constant to every score leaves softmax unchanged."""
        Q, K, V = random_instance(rng, 3, 40, 8)
        shifted_q = Tensor.from_array(np.hstack([Q.data, np.ones((Q.rows, 1))]))
        shifted_k = Tensor.from_array(np.hstack([K.data, np.full((K.rows, 1), 3.0)]))
        for kernel in (attention_baseline_lazy, attention_flash2):
            a = kernel(Q, K, V, precision=Precision.DOUBLE)
            b = kernel(shifted_q, shifted_k, V, precision=Precision.DOUBLE)
            np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-12)

    def test_two_key_example(self):
        """Scores 1 and 0 weigh the identity rows by the logistic pair."""
        q = Tensor.from_array([[1.0, 0.0]])
        eye = Tensor.from_array(np.eye(2))
        for kernel in (attention_baseline_lazy, attention_flash2):
            np.testing.assert_allclose(kernel(q, eye, eye).data, [[0.73106, 0.26894]], atol=1e-5)


class TestQueries:
    """Test per-query independence and parallel determinism."""

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.label)
    def test_rows_are_independent(self, kind, nominal):
        """Each output row equals a run on that query alone."""
        Q, K, V = nominal
        full = run_kernel(kind, Q, K, V)
        for j in range(Q.rows):
            single = run_kernel(kind, Q.select_rows([j]), K, V)
            assert np.array_equal(bits(single)[0], bits(full)[j])

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.label)
    def test_workers_are_bit_identical(self, kind, nominal):
        """Thread-pool execution reproduces the sequential result and counters."""
        Q, K, V = nominal
        serial_stats, pooled_stats = KernelStats(), KernelStats()
        serial = run_kernel(kind, Q, K, V, stats=serial_stats)
        pooled = run_kernel(kind, Q, K, V, workers=4, stats=pooled_stats)
        assert np.array_equal(bits(serial), bits(pooled))
        assert serial_stats == pooled_stats
        assert serial_stats.steps == Q.rows * K.rows


class TestAccuracy:
    """Test kernel error against the double-precision oracle."""

    def test_flash2_fp32(self, nominal):
        """FP32 FlashAttention-2 stays within 5e-5 of the oracle."""
        Q, K, V = nominal
        report = compare(attention_flash2(Q, K, V), oracle_attention(Q, K, V))
        assert report.max_abs_err <= 5e-5
        assert report.cosine_similarity_min > 0.9999

    def test_flash2_fp32_scaled(self, nominal):
        """Scaling by 1/sqrt(d) is applied consistently."""
        Q, K, V = nominal
        report = compare(attention_flash2(Q, K, V, scale=True), oracle_attention(Q, K, V, scale=True))
        assert report.max_abs_err <= 5e-5

    def test_flash2_bf16(self):
        """BF16 rounding costs accuracy but keeps direction."""
        Q, K, V = generate_instance(RunConfig(d=16, seq_len=64, n_q=8, seed=0, dtype=Dtype.BF16))
        report = compare(attention_flash2(Q, K, V), oracle_attention(Q, K, V))
        assert report.max_abs_err <= 0.25
        assert report.cosine_similarity_min >= 0.9

    def test_expmul_matches_weight_replay(self, nominal):
        """The kernel computes its power-of-two weighted average to FP32 accuracy."""
        Q, K, V = nominal
        out = attention_flash2_expmul(Q, K, V)
        np.testing.assert_allclose(out.data, expmul_weight_replay(Q, K, V), rtol=1e-4, atol=2e-5)

    def test_expmul_envelope(self, nominal):
        """ExpMul accuracy is pinned and worse than the exact kernel's."""
        Q, K, V = nominal
        ref = oracle_attention(Q, K, V)
        approx = compare(attention_flash2_expmul(Q, K, V), ref)
        exact = compare(attention_flash2(Q, K, V), ref)
        assert approx.cosine_similarity_min == pytest.approx(EXPMUL_COSINE_MIN, abs=1e-4)
        assert approx.max_rel_err == pytest.approx(EXPMUL_MAX_REL_ERR, rel=1e-4)
        assert approx.mean_abs_err > exact.mean_abs_err
        assert approx.max_rel_err > exact.max_rel_err

    def test_pwl_converges(self, nominal):
        """Dense PWL tables approach the accurate exponential."""
        Q, K, V = nominal
        accurate = attention_baseline_lazy(Q, K, V)
        dense = attention_baseline_lazy(Q, K, V, ExpMode.PWL, pwl_segments=4096)
        coarse = attention_baseline_lazy(Q, K, V, ExpMode.PWL)
        np.testing.assert_allclose(dense.data, accurate.data, atol=1e-4)
        assert not np.array_equal(coarse.data, accurate.data)


class TestStress:
    """Test exponent underflow on stress instances."""

    @pytest.mark.parametrize("dtype", list(Dtype), ids=lambda d: d.value)
    def test_flushes_counted_and_outputs_finite(self, dtype):
        """Underflowing decrements flush to zero and are counted."""
        Q, K, V = generate_instance(RunConfig(d=16, seq_len=64, n_q=4, seed=3, stress=True, dtype=dtype))
        stats = KernelStats()
        out = attention_flash2_expmul(Q, K, V, stats=stats)
        assert np.all(np.isfinite(out.data))
        assert stats.flushed > 0

    @pytest.mark.parametrize("dtype", list(Dtype), ids=lambda d: d.value)
    def test_accumulator_overflow_is_a_domain_error(self, dtype):
        """A merged sum past the format's range is reported as overflow."""
        Q = Tensor.from_array([[0.0]], dtype)
        K = Tensor.from_array([[1.0], [1.0]], dtype)
        V = Tensor.from_array([[3e38], [3e38]], dtype)
        with pytest.raises(DomainError, match="overflow"):
            attention_flash2_expmul(Q, K, V)
