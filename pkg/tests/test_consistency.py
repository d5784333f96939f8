import mpmath
import numpy as np
import pytest

from camero.consistency import (
    ConsistencySpec,
    consistency_loss,
    ensemble_consistency,
    ensemble_distribution,
    output_distance,
    pairwise_consistency,
    symmetric_kl,
)
from camero.errors import ContractError, SpecError
from camero.tensor import Tensor, finite_diff_gradient, softmax

from conftest import assert_grad_close


def random_simplex(rng, k):
    e = rng.exponential(size=k)
    return e / e.sum()


def mpmath_symmetric_kl(p, q):
    """High-precision summation oracle, independent of the implementation."""
    with mpmath.workdps(50):
        forward = mpmath.fsum(mpmath.mpf(pi) * mpmath.log(mpmath.mpf(pi) / mpmath.mpf(qi))
                              for pi, qi in zip(p, q) if pi > 0)
        reverse = mpmath.fsum(mpmath.mpf(qi) * mpmath.log(mpmath.mpf(qi) / mpmath.mpf(pi))
                              for pi, qi in zip(p, q) if qi > 0)
        return float((forward + reverse) / 2)


class TestSymmetricKl:
    def test_identity_is_zero(self):
        p = [0.2, 0.3, 0.5]
        assert symmetric_kl(p, p) == 0.0

    def test_symmetry_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = random_simplex(rng, 5)
            q = random_simplex(rng, 5)
            assert symmetric_kl(p, q) == pytest.approx(symmetric_kl(q, p), abs=1e-15)

    def test_reference_value(self):
        # frozen from the high-precision oracle below
        value = symmetric_kl((0.5, 0.5), (0.25, 0.75))
        assert value == pytest.approx(0.137327, abs=1e-5)
        assert value == pytest.approx(mpmath_symmetric_kl((0.5, 0.5), (0.25, 0.75)),
                                      abs=1e-12)

    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            p = random_simplex(rng, 6)
            q = random_simplex(rng, 6)
            assert symmetric_kl(p, q) == pytest.approx(mpmath_symmetric_kl(p, q),
                                                       rel=1e-10)

    def test_nonnegative_zero_iff_equal(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = random_simplex(rng, 4)
            q = random_simplex(rng, 4)
            d = symmetric_kl(p, q)
            assert d >= 0.0
            if not np.allclose(p, q, atol=1e-9):
                assert d > 0.0

    def test_zero_numerator_terms_drop_out(self):
        assert symmetric_kl([0.0, 1.0], [0.0, 1.0]) == 0.0

    def test_zero_denominator_clamped(self):
        value = symmetric_kl([0.5, 0.5], [0.0, 1.0])
        assert np.isfinite(value)
        # p log(p/clamp) with clamp=1e-12 dominates
        assert value == pytest.approx(0.5 * (0.5 * np.log(0.5 / 1e-12)
                                             + 0.5 * np.log(0.5 / 1.0)
                                             + 1.0 * np.log(1.0 / 0.5)), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            symmetric_kl([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_not_a_distribution(self):
        with pytest.raises(ContractError):
            symmetric_kl([0.9, 0.9], [0.5, 0.5])
        with pytest.raises(ContractError):
            symmetric_kl([-0.5, 1.5], [0.5, 0.5])


class TestEnsembleDistribution:
    def test_equal_logits_reduce_to_softmax(self):
        g = Tensor([1.0, -2.0, 0.5])
        out = ensemble_distribution([g, g, g])
        np.testing.assert_allclose(out.data, softmax(g).data, atol=1e-15)

    def test_two_branch_symmetry(self):
        out = ensemble_distribution([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])])
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_degenerate_weights_pick_one_branch(self):
        g1, g2 = Tensor([2.0, -1.0]), Tensor([100.0, 3.0])
        out = ensemble_distribution([g1, g2], weights=(1.0, 0.0))
        np.testing.assert_allclose(out.data, softmax(g1).data, atol=1e-15)

    def test_weight_validation(self):
        with pytest.raises(SpecError):
            ensemble_distribution([Tensor([1.0, 0.0])], weights=(0.7,))


class TestEnsembleConsistency:
    def test_identical_branches_zero(self):
        g = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        val = ensemble_consistency([g, g, g]).item()
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_single_branch_zero(self):
        assert ensemble_consistency([Tensor([1.0, 2.0])]).item() == 0.0

    def test_hand_computed_squared_euclidean(self):
        # two branches at [1,0] and [0,1]: each sits 0.5 away (squared)
        # from the mean logits, so the branch average is 0.5
        val = ensemble_consistency([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])],
                                   metric="squared_euclidean").item()
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            ensemble_consistency([])

    def test_skl_metric_matches_standalone_metric(self):
        rng = np.random.default_rng(3)
        logits = [Tensor(rng.normal(size=5)) for _ in range(3)]
        val = ensemble_consistency(logits, detach_target=True).item()
        mean_logits = np.mean([g.data for g in logits], axis=0)
        expected = np.mean([
            symmetric_kl(softmax(g).data, softmax(Tensor(mean_logits)).data)
            for g in logits
        ])
        assert val == pytest.approx(expected, rel=1e-10)

    def test_detach_target_blocks_target_gradient(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=(2, 3))

        grads = {}
        for detach in (True, False):
            g1 = Tensor(values[0].copy(), requires_grad=True)
            g2 = Tensor(values[1].copy(), requires_grad=True)
            ensemble_consistency([g1, g2], detach_target=detach).backward()
            grads[detach] = (g1.grad.copy(), g2.grad.copy())
        assert not np.allclose(grads[True][0], grads[False][0])

    def test_batched_rows_average(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        batched = ensemble_consistency([Tensor(a), Tensor(b)]).item()
        per_row = np.mean([
            ensemble_consistency([Tensor(a[i]), Tensor(b[i])]).item()
            for i in range(6)
        ])
        assert batched == pytest.approx(per_row, rel=1e-12)


class TestPairwiseConsistency:
    def test_identical_branches_zero(self):
        g = Tensor([0.3, -0.7])
        assert pairwise_consistency([g, g, g]).item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed_value_and_factor_four(self):
        logits = [Tensor([1.0, 0.0]), Tensor([0.0, 1.0])]
        pair = pairwise_consistency(logits, metric="squared_euclidean").item()
        ens = ensemble_consistency(logits, metric="squared_euclidean").item()
        assert pair == pytest.approx(2.0, abs=1e-12)
        assert pair == pytest.approx(4.0 * ens, rel=1e-12)

    def test_factor_four_identity_fuzz(self):
        # m=2, equal weights, squared euclidean: pairwise = 4 * ensemble
        rng = np.random.default_rng(6)
        for _ in range(100):
            logits = [Tensor(rng.normal(scale=3.0, size=4)) for _ in range(2)]
            pair = pairwise_consistency(logits, metric="squared_euclidean").item()
            ens = ensemble_consistency(logits, metric="squared_euclidean").item()
            assert pair == pytest.approx(4.0 * ens, rel=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        logits = [Tensor(rng.normal(size=3)) for _ in range(4)]
        base = pairwise_consistency(logits).item()
        shuffled = [logits[i] for i in (2, 0, 3, 1)]
        assert pairwise_consistency(shuffled).item() == pytest.approx(base, rel=1e-12)

    def test_single_branch_rejected(self):
        with pytest.raises(ContractError):
            pairwise_consistency([Tensor([1.0, 2.0])])


class TestNonnegativity:
    @pytest.mark.parametrize("metric", ["symmetric_kl", "squared_euclidean"])
    def test_regularizers_nonnegative(self, metric):
        rng = np.random.default_rng(8)
        for _ in range(50):
            logits = [Tensor(rng.normal(size=(3, 4))) for _ in range(3)]
            assert ensemble_consistency(logits, metric=metric).item() >= 0.0
            assert pairwise_consistency(logits, metric=metric).item() >= 0.0


class TestRegularizerGradients:
    """Both regularizers against the finite-difference oracle."""

    @pytest.mark.parametrize("metric", ["symmetric_kl", "squared_euclidean"])
    def test_ensemble_consistency_grad_full(self, metric):
        # without detaching, the target moves with the input, so plain
        # finite differences of the whole expression are the oracle
        rng = np.random.default_rng(9)
        others = [rng.normal(size=(2, 4)) for _ in range(2)]

        def f(t):
            logits = [t] + [Tensor(o) for o in others]
            return ensemble_consistency(logits, metric=metric, detach_target=False)

        for _ in range(20):
            x = rng.normal(size=(2, 4))
            live = Tensor(x, requires_grad=True)
            f(live).backward()
            numeric = finite_diff_gradient(f, Tensor(x), h=1e-5)
            assert_grad_close(live.grad, numeric.data, context=f"ensemble-full/{metric}")

    @pytest.mark.parametrize("metric", ["symmetric_kl", "squared_euclidean"])
    def test_ensemble_consistency_grad_detached(self, metric):
        # detaching makes the gradient a partial derivative: the oracle
        # must hold the ensemble target frozen at the evaluation point
        rng = np.random.default_rng(11)
        others = [rng.normal(size=(2, 4)) for _ in range(2)]

        for _ in range(20):
            x = rng.normal(size=(2, 4))
            target = Tensor(np.mean([x] + others, axis=0))

            def f_partial(t):
                total = output_distance(t, target, metric)
                for o in others:
                    total = total + output_distance(Tensor(o), target, metric)
                return total * (1.0 / 3.0)

            live = Tensor(x, requires_grad=True)
            ensemble_consistency([live] + [Tensor(o) for o in others],
                                 metric=metric, detach_target=True).backward()
            numeric = finite_diff_gradient(f_partial, Tensor(x), h=1e-5)
            assert_grad_close(live.grad, numeric.data,
                              context=f"ensemble-detached/{metric}")

    @pytest.mark.parametrize("metric", ["symmetric_kl", "squared_euclidean"])
    def test_pairwise_consistency_grad(self, metric):
        rng = np.random.default_rng(10)
        others = [rng.normal(size=(2, 4)) for _ in range(2)]

        def f(t):
            logits = [t] + [Tensor(o) for o in others]
            return pairwise_consistency(logits, metric=metric)

        for _ in range(20):
            x = rng.normal(size=(2, 4))
            live = Tensor(x, requires_grad=True)
            f(live).backward()
            numeric = finite_diff_gradient(f, Tensor(x), h=1e-5)
            assert_grad_close(live.grad, numeric.data, context=f"pairwise/{metric}")


class TestConsistencyLossDispatch:
    def test_none_kind_zero(self):
        spec = ConsistencySpec(kind="none")
        logits = [Tensor([1.0, 2.0]), Tensor([0.0, 0.0])]
        assert consistency_loss(logits, spec).item() == 0.0

    def test_regression_requires_squared_euclidean(self):
        spec = ConsistencySpec(kind="ensemble", metric="symmetric_kl")
        with pytest.raises(ContractError):
            consistency_loss([Tensor([[1.0]]), Tensor([[2.0]])], spec, task="regression")

    def test_regression_squared_euclidean_works(self):
        spec = ConsistencySpec(kind="ensemble", metric="squared_euclidean")
        # branch scalars 1 and 3: weighted mean 2, each off by 1 -> mean 1
        val = consistency_loss([Tensor([[1.0]]), Tensor([[3.0]])], spec,
                               task="regression").item()
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_spec_validation(self):
        assert ConsistencySpec(kind="both").validate()
        assert ConsistencySpec(weights=(0.5, 0.6)).validate()
        assert not ConsistencySpec(weights=(0.5, 0.5)).validate()
