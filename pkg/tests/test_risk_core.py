import numpy as np
import pytest

from procrisk.errors import InfeasibleFamily
from procrisk.measures import ProductMeasure, compose, conditional_tail, random_product_measure
from procrisk.risk import (
    CappedFamily,
    EntropicFamily,
    FiniteFamily,
    acceptance_test,
    continuity_probe,
    evaluate,
    lift,
    lifted_penalty,
    penalty_lower_bound,
    robust_evaluate,
)
from procrisk.tree import AdaptedProcess, binomial_tree, random_tree, shift_cash, spread
from procrisk.zoo import AVaRRisk, EntropicRisk

from . import oracles
from .conftest import ZOO_KINDS, zoo

DRAWS = 100
TOL = 1e-9


def axiom_trees():
    rng = np.random.default_rng(21)
    return [binomial_tree(1), binomial_tree(2, p_up=0.4), random_tree(rng, 2, max_branching=3)]


@pytest.fixture(params=range(3), ids=["bin1", "bin2", "rand2"])
def small(request):
    return axiom_trees()[request.param]


def _draws(tree, seed, k=DRAWS, scale=3.0):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(k, tree.n))


@pytest.mark.parametrize("kind", ZOO_KINDS)
def test_axioms(small, kind):
    rm = zoo(small)[kind]
    rng = np.random.default_rng(hash(kind) % 2**32)
    xs, ys = _draws(small, 1), _draws(small, 2)
    for t in range(small.horizon + 1):
        nt = small.level_size(t)
        base = rm.evaluate_batch(xs, t)
        # normalization
        assert np.allclose(rm.evaluate(np.zeros(small.n), t), 0.0, atol=TOL)
        # cash invariance with an F_t-measurable amount
        m = rng.uniform(-2, 2, size=(DRAWS, nt))
        shifted = xs + np.nan_to_num(np.array([spread(small, row, t) for row in m]))
        assert np.allclose(rm.evaluate_batch(shifted, t), base - m, atol=TOL)
        # monotonicity
        bigger = xs + rng.uniform(0, 1, size=xs.shape)
        assert np.all(rm.evaluate_batch(bigger, t) <= base + TOL)
        # conditional convexity
        lam = rng.uniform(0, 1, size=(DRAWS, nt))
        weights = np.array([np.nan_to_num(spread(small, row, t), nan=0.5) for row in lam])
        mixed = weights * xs + (1 - weights) * ys
        bound = lam * base + (1 - lam) * rm.evaluate_batch(ys, t)
        assert np.all(rm.evaluate_batch(mixed, t) <= bound + TOL)


def test_evaluate_constant_cash(tree):
    rm = EntropicRisk(tree, 0.7)
    for t in range(tree.horizon + 1):
        X = shift_cash(AdaptedProcess.constant(tree, 0.0), 2.5, 0, t)
        assert np.allclose(evaluate(rm, X, t), -2.5)


def test_entropic_binomial_value(binomial1):
    X = np.array([0.0, 1.0, -1.0])
    expected = np.log((1 + np.cosh(1.0)) / 2)
    assert EntropicRisk(binomial1, 1.0).evaluate(X, 0)[0] == pytest.approx(expected, abs=1e-12)
    atoms = 0.5 * np.exp(0.0) + 0.25 * np.exp(-1.0) + 0.25 * np.exp(1.0)
    assert expected == pytest.approx(np.log(atoms), abs=1e-15)


# -- lift ---------------------------------------------------------------------


def test_lift_shapes(binomial2):
    rm = EntropicRisk(binomial2, 1.0)
    x = _draws(binomial2, 3, k=1)[0]
    assert np.allclose(lift(rm, x, 0), rm.evaluate(x, 0)[0])
    assert np.allclose(lift(rm, np.zeros(binomial2.n), 1), 0.0)
    lifted = lift(rm, x, 1)
    assert lifted[0] == -x[0]
    rho1 = rm.evaluate(x, 1)
    for k, v in enumerate(binomial2.level(1)):
        assert np.allclose(lifted[binomial2.subtree(v)], rho1[k])


def test_lifted_penalty(binomial2):
    rm = EntropicRisk(binomial2, 1.0)
    rng = np.random.default_rng(4)
    for _ in range(5):
        Q = random_product_measure(binomial2, rng)
        out = lifted_penalty(rm, Q, 1)
        assert out[0] == 0.0
        pen = rm.penalty(Q, 1).values
        for k, v in enumerate(binomial2.level(1)):
            assert np.allclose(out[binomial2.subtree(v)], pen[k])


# -- penalties and duality ----------------------------------------------------------


@pytest.mark.parametrize("kind", ["entropic", "entropic-profile", "avar", "linear", "reference"])
def test_duality_sandwich(tree, kind):
    rm = zoo(tree)[kind]
    rng = np.random.default_rng(5)
    xs = _draws(tree, 6, k=50)
    for _ in range(10):
        Q = random_product_measure(tree, rng, sparsity=0.2)
        for t in range(tree.horizon + 1):
            pen = rm.penalty(Q, t).values
            reward, ok = conditional_tail(Q, xs[0], t)
            rho = rm.evaluate_batch(xs, t)
            for j, x in enumerate(xs):
                reward, ok = conditional_tail(Q, x, t)
                fin = ok & np.isfinite(pen)
                assert np.all(rho[j][fin] >= -reward[fin] - pen[fin] - TOL)


def test_penalty_infinite_without_mass(binomial1):
    Q = compose(AdaptedProcess.constant(binomial1, 1.0), [1.0, 0.0, 0.0])
    for rm in (EntropicRisk(binomial1, 1.0), AVaRRisk(binomial1, 0.5)):
        assert np.all(rm.penalty(Q, 1).infinite)


def test_reference_measure_has_zero_entropic_penalty(tree):
    rm = EntropicRisk(tree, 1.0)
    for t in range(tree.horizon + 1):
        assert np.allclose(rm.penalty(ProductMeasure.reference(tree), t).values, 0.0)


def test_penalty_lower_bound_matches_closed_form(binomial1):
    rm = EntropicRisk(binomial1, 1.0)
    Q = compose(AdaptedProcess.constant(binomial1, 1.0), [0.25, 0.75, 0.75])
    assert np.allclose(Q.Z, [0.5, 1.5, 1.5])
    exact = rm.penalty(Q, 0).values[0]
    bound = penalty_lower_bound(rm, Q, 0, probes=10_000, refine=40).values[0]
    assert not penalty_lower_bound(rm, Q, 0, probes=100).exact
    assert bound <= exact + 1e-12
    assert exact - bound < 1e-3


def test_penalty_lower_bound_grows_with_budget(binomial2):
    rm = AVaRRisk(binomial2, 0.5)
    Q = random_product_measure(binomial2, np.random.default_rng(8))
    small = penalty_lower_bound(rm, Q, 0, probes=100, seed=1).values
    large = penalty_lower_bound(rm, Q, 0, probes=2000, seed=1).values
    assert np.all(large >= small)


# -- robust evaluation --------------------------------------------------------------


def test_robust_entropic_matches_closed_form(tree):
    family = EntropicFamily(1.0)
    rm = EntropicRisk(tree, 1.0)
    for x in _draws(tree, 9, k=5):
        for t in range(tree.horizon + 1):
            assert np.allclose(robust_evaluate(family, x, t, tree), rm.evaluate(x, t), atol=1e-6)


@pytest.mark.parametrize("method", ["vertices", "greedy"])
def test_robust_avar_matches_closed_form(tree, method):
    family = CappedFamily(0.4, method=method)
    rm = AVaRRisk(tree, 0.4)
    for x in _draws(tree, 10, k=5):
        for t in range(tree.horizon + 1):
            assert np.allclose(robust_evaluate(family, x, t, tree), rm.evaluate(x, t), atol=1e-6)


def test_robust_avar_binomial_examples(binomial1):
    X = AdaptedProcess(binomial1, [0.0, 1.0, -1.0])
    assert robust_evaluate(CappedFamily(0.5), X, 0)[0] == pytest.approx(0.5, abs=1e-12)
    assert oracles.avar_lp(binomial1, 0.5, X.values, 0)[0] == pytest.approx(0.5, abs=1e-9)
    ref = ProductMeasure.reference(binomial1)
    assert robust_evaluate(CappedFamily(1.0), X, 0)[0] == pytest.approx(-ref.expectation(X.values))


def test_single_measure_family(tree):
    ref = ProductMeasure.reference(tree)
    x = _draws(tree, 11, k=1)[0]
    for t in range(tree.horizon + 1):
        expected = -conditional_tail(ref, x, t)[0]
        assert np.allclose(robust_evaluate(FiniteFamily([ref]), x, t, tree), expected)


def test_empty_family_is_infeasible(binomial1):
    Q = compose(AdaptedProcess.constant(binomial1, 1.0), [1.0, 0.0, 0.0])
    with pytest.raises(InfeasibleFamily):
        robust_evaluate(FiniteFamily([Q]), np.zeros(3), 1, binomial1)
    with pytest.raises(ValueError):
        robust_evaluate(FiniteFamily([Q]), np.zeros(3), 0)


# -- acceptance and continuity ---------------------------------------------------


def test_acceptance_sets(binomial2):
    rm = EntropicRisk(binomial2, 1.0)
    assert acceptance_test(rm, np.zeros(binomial2.n), 1).all()
    minus_one = shift_cash(AdaptedProcess.constant(binomial2, 0.0), -1.0, 1, 1)
    assert not acceptance_test(rm, minus_one, 1).any()
    for x in _draws(binomial2, 12, k=20):
        for t in range(3):
            assert np.array_equal(acceptance_test(rm, x, t), rm.evaluate(x, t) <= 0)


def test_lifted_acceptance_needs_nonnegative_past(binomial2):
    rm = EntropicRisk(binomial2, 1.0)
    x = np.full(binomial2.n, 1.0)
    x[0] = -0.1
    assert acceptance_test(rm, x, 1).all()
    assert not acceptance_test(rm, x, 1, lifted=True).any()


def test_continuity_from_above(binomial2):
    rm = EntropicRisk(binomial2, 1.0)
    x = _draws(binomial2, 13, k=1)[0]
    rep = continuity_probe(rm, x, 0)
    assert rep.monotone and rep.final_gap < 1e-8
    assert np.allclose(rep.values[:, 0], rep.limit[0] - 2.0 ** -np.arange(30))
    rng = np.random.default_rng(14)
    bumps = rng.uniform(0, 1, size=binomial2.n)
    seq = [x + bumps / (n + 1) ** 2 for n in range(40)]
    assert continuity_probe(rm, x, 0, sequence=seq).monotone
    flat = continuity_probe(rm, x, 1, sequence=[x] * 5)
    assert np.allclose(flat.values, flat.limit)
