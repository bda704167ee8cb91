"""Tests for the tape-based autodiff tensor library."""

import threading

import numpy as np
import pytest

from src.errors import DimensionError, InputError, NumericError
from src.tensor import (
    Tape,
    Tensor,
    attention_mask,
    bce_with_logits,
    concat,
    cross_entropy,
    embedding,
    exp,
    gelu,
    grad_check,
    kl_divergence,
    layer_norm,
    log,
    log_softmax,
    matmul,
    reshape,
    softmax,
    take,
    transpose,
)

TOL = 1e-4


def _rand(*shape: int, seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape))


class TestTape:
    """Tests for recording and back-propagation."""

    def test_nothing_recorded_without_tape(self) -> None:
        """Operations outside a tape produce tensors that do not require grad."""
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        out = matmul(w, w)
        assert not out.requires_grad

    def test_constants_not_recorded(self) -> None:
        """Ops on constants are not put on the tape."""
        with Tape() as tape:
            _ = Tensor(np.ones(3)) + 1.0
        assert tape.entries == []

    def test_backward_simple_product(self) -> None:
        """d(sum(a*b))/da == b."""
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
        with Tape() as tape:
            loss = (a * b).sum()
            tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [4.0, 5.0, 6.0])
        np.testing.assert_array_equal(b.grad, [1.0, 2.0, 3.0])

    def test_reused_tensor_accumulates(self) -> None:
        """A tensor used twice gets both contributions."""
        a = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            tape.backward((a * a).sum())
        np.testing.assert_allclose(a.grad, [6.0])

    def test_backward_requires_scalar(self) -> None:
        """Non-scalar loss is a dimension error."""
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape, pytest.raises(DimensionError):
            tape.backward(a * 2.0)

    def test_backward_rejects_non_finite(self) -> None:
        """Infinite loss is a numeric error."""
        a = Tensor([np.inf], requires_grad=True)
        with Tape() as tape, pytest.raises(NumericError):
            tape.backward((a * 1.0).sum())

    def test_tape_is_thread_local(self) -> None:
        """A tape opened on one thread records nothing from another thread."""
        w = Tensor(np.ones(2), requires_grad=True)
        seen: list[bool] = []

        def worker() -> None:
            seen.append((w * 2.0).requires_grad)

        with Tape() as tape:
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen == [False]
        assert tape.entries == []


class TestGradients:
    """Finite-difference checks for every differentiable op."""

    def test_matmul(self) -> None:
        """Batched matmul gradient."""
        b = _rand(2, 4, 3, seed=1)
        assert grad_check(lambda x: (matmul(x, b) * matmul(x, b)).sum(), _rand(2, 5, 4)) < TOL

    def test_matmul_broadcast(self) -> None:
        """Gradient of a 2-D weight broadcast over a batch."""
        a = _rand(3, 5, 4, seed=2)
        assert grad_check(lambda w: (matmul(a, w) * matmul(a, w)).sum(), _rand(4, 2)) < TOL

    def test_elementwise(self) -> None:
        """exp, log, mul, add and neg chained."""
        x = Tensor(np.random.default_rng(3).uniform(0.5, 2.0, size=(3, 4)))
        assert grad_check(lambda t: (log(t) * exp(t * 0.3) - t).sum(), x) < TOL

    def test_gelu(self) -> None:
        """Tanh-approximation GELU."""
        assert grad_check(lambda t: (gelu(t) * gelu(t)).sum(), _rand(4, 3, seed=4)) < TOL

    def test_softmax_and_log_softmax(self) -> None:
        """Softmax and log-softmax along the last axis."""
        w = _rand(3, 5, seed=6)
        assert grad_check(lambda t: (softmax(t) * w).sum(), _rand(3, 5, seed=5)) < TOL
        assert grad_check(lambda t: (log_softmax(t) * w).sum(), _rand(3, 5, seed=7)) < TOL

    def test_layer_norm(self) -> None:
        """LayerNorm input, gain and bias gradients."""
        x = _rand(4, 6, seed=8)
        gain = Tensor(np.random.default_rng(9).uniform(0.5, 1.5, 6))
        bias = _rand(6, seed=10)
        w = _rand(4, 6, seed=11)
        assert grad_check(lambda t: (layer_norm(t, gain, bias) * w).sum(), x) < TOL
        assert grad_check(lambda g: (layer_norm(x, g, bias) * w).sum(), gain) < TOL
        assert grad_check(lambda b: (layer_norm(x, gain, b) * w).sum(), bias) < TOL

    def test_shape_ops(self) -> None:
        """reshape, transpose, take and concat route gradients back."""
        w = _rand(9, 2, seed=13)

        def f(t: Tensor) -> Tensor:
            joined = concat([t, take(t, slice(0, 2))], axis=0)
            cube = transpose(reshape(transpose(joined), (3, 2, 3)), (1, 0, 2))
            out = reshape(cube, (2, 9)) @ w
            return (out * out).sum()

        assert grad_check(f, _rand(4, 3, seed=12)) < TOL

    def test_embedding_repeated_ids(self) -> None:
        """Repeated ids scatter-add into the same table row."""
        table = _rand(5, 3, seed=14)
        with Tape() as tape:
            table.requires_grad = True
            tape.backward(embedding(table, [1, 1, 4]).sum())
        assert table.grad is not None
        np.testing.assert_allclose(table.grad[1], [2.0, 2.0, 2.0])
        np.testing.assert_allclose(table.grad[0], [0.0, 0.0, 0.0])

    def test_cross_entropy(self) -> None:
        """Cross-entropy with an ignored position."""
        assert grad_check(lambda t: cross_entropy(t, [1, 0, 3], ignore_index=0), _rand(3, 4)) < TOL

    def test_bce(self) -> None:
        """Sigmoid binary cross-entropy."""
        assert grad_check(lambda t: bce_with_logits(t, [1, 0, 1, 0]), _rand(4, seed=15)) < TOL

    def test_kl_through_softmax(self) -> None:
        """KL(softmax(x) || q) with q constant."""
        q = Tensor(np.array([0.2, 0.5, 0.3]))
        assert grad_check(lambda t: kl_divergence(softmax(t), q), _rand(3, seed=16)) < TOL

    def test_attention_with_mask(self) -> None:
        """Masked scaled dot-product attention."""
        k = _rand(4, 3, seed=17)
        mask = attention_mask(np.array([True, True, False, True]), 2)

        def f(q: Tensor) -> Tensor:
            scores = matmul(q, transpose(k)) * (1 / np.sqrt(3)) + mask
            return (matmul(softmax(scores), k) * k.data[:2]).sum()

        assert grad_check(f, _rand(2, 3, seed=18)) < TOL


class TestErrors:
    """Error contracts of the ops."""

    def test_matmul_shape_mismatch_names_shapes(self) -> None:
        """Inner-dimension mismatch reports both shapes."""
        with pytest.raises(DimensionError, match=r"\(2, 3\) @ \(4, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_log_of_non_positive(self) -> None:
        """log(0) is a numeric error."""
        with pytest.raises(NumericError):
            log(Tensor([1.0, 0.0]))

    def test_softmax_nan(self) -> None:
        """softmax on NaN is a numeric error."""
        with pytest.raises(NumericError):
            softmax(Tensor([np.nan, 1.0]))

    def test_embedding_out_of_range(self) -> None:
        """Ids beyond the table are input errors."""
        with pytest.raises(InputError):
            embedding(Tensor(np.ones((3, 2))), [0, 3])

    def test_cross_entropy_all_ignored(self) -> None:
        """All-ignored targets are input errors."""
        with pytest.raises(InputError):
            cross_entropy(Tensor(np.zeros((2, 4))), [0, 0], ignore_index=0)


class TestKlDivergence:
    """Value checks for KL(p || q)."""

    def test_hand_value(self) -> None:
        """KL((0.5,0.5) || (0.9,0.1)) = 0.510826."""
        value = kl_divergence(Tensor([0.5, 0.5]), Tensor([0.9, 0.1])).item()
        assert value == pytest.approx(0.510826, abs=1e-6)

    def test_non_negative_on_random_pairs(self) -> None:
        """KL is non-negative on 1,000 random distribution pairs."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            p = rng.dirichlet(np.ones(n))
            q = rng.dirichlet(np.ones(n))
            assert kl_divergence(Tensor(p), Tensor(q)).item() >= -1e-15

    def test_zero_mass_in_q_rejected(self) -> None:
        """q = 0 where p > 0 is a numeric error."""
        with pytest.raises(NumericError):
            kl_divergence(Tensor([0.5, 0.5]), Tensor([1.0, 0.0]))

    def test_length_mismatch(self) -> None:
        """Different lengths are input errors."""
        with pytest.raises(InputError):
            kl_divergence(Tensor([1.0]), Tensor([0.5, 0.5]))


class TestAttentionMask:
    """Tests for the additive attention mask."""

    def test_padding_and_causal(self) -> None:
        """Causal mask hides future keys and padding."""
        mask = attention_mask(np.array([True, True, False]), 3, causal=True)
        visible = mask == 0.0
        np.testing.assert_array_equal(
            visible, [[True, False, False], [True, True, False], [True, True, False]]
        )
