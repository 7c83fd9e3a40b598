"""One test per acceptance criterion.

Run with ``pytest tests/test_acceptance.py`` (a PASS/FAIL line per criterion
is printed at the end), or directly as ``python tests/test_acceptance.py``.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

if __name__ == "__main__":
    # run through pytest so the package-relative helpers resolve
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

from procrisk.calibration import cash_subadditivity_battery, check_cash_additive_at
from procrisk.consistency import (
    check_recursive,
    check_stability,
    check_time_consistent,
    doob_riesz,
    maximal_inequality_experiment,
    pasting_closure,
    penalty_cocycle,
    probe_measures,
)
from procrisk.measures import (
    ProductMeasure,
    compose,
    conditional_tail,
    decompose,
    integration_by_parts,
    ito_watanabe,
    random_product_measure,
)
from procrisk.risk import EntropicFamily, robust_evaluate
from procrisk.tree import AdaptedProcess, binomial_tree, random_tree
from procrisk.zoo import (
    AVaRRisk,
    DecoupledAVaRRisk,
    EntropicRisk,
    SimplifiedEntropicRisk,
    make_time_consistent,
)

from . import oracles
from .conftest import fixture_path, zoo

FIXTURE_TREES = ["binomial1", "binomial2", "binomial3", "skewed3"]


def fixture_tree(name):
    from procrisk.io import load_tree

    return load_tree(fixture_path(f"{name}.json"))[0]


def test_criterion_01_round_trip():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for k in range(120):
        tree = random_tree(rng, 1 + k % 4, max_branching=2)
        Q = random_product_measure(tree, rng, sparsity=0.25 if k % 3 == 0 else 0.0)
        dis = decompose(Q)
        back = compose(dis.M, dis.gamma)
        on = Q.Z > 0
        worst = max(worst, float(np.max(np.abs(back.Z - Q.Z)[on])))
    elapsed = time.perf_counter() - start
    assert worst < 1e-9
    assert elapsed < 5.0


def test_criterion_02_ito_watanabe():
    tree = fixture_tree("binomial1")
    M, D = ito_watanabe(AdaptedProcess(tree, [1.0, 0.6, 0.8]))
    assert abs(D.values[1] - 0.7) < 1e-12 and abs(D.values[2] - 0.7) < 1e-12
    assert abs(M.values[1] - 6 / 7) < 1e-12 and abs(M.values[2] - 8 / 7) < 1e-12
    rng = np.random.default_rng(102)
    for k in range(100):
        tr = random_tree(rng, 1 + k % 4)
        U = AdaptedProcess(tr, random_product_measure(tr, rng, sparsity=0.3 * (k % 2)).tail_mass)
        M1, D1 = ito_watanabe(U, "discount-first")
        M2, D2 = ito_watanabe(U, "martingale-first")
        live = U.values > 0
        assert np.allclose(M1.values[live], M2.values[live], atol=1e-10, rtol=0)
        assert np.allclose(D1.values[live], D2.values[live], atol=1e-10, rtol=0)


@pytest.mark.parametrize("name", FIXTURE_TREES)
def test_criterion_03_integration_by_parts(name):
    tree = fixture_tree(name)
    rng = np.random.default_rng(103)
    for _ in range(100):
        dis = decompose(random_product_measure(tree, rng))
        X = AdaptedProcess(tree, rng.normal(size=tree.n))
        for t in range(tree.horizon + 1):
            lhs, rhs = integration_by_parts(X, dis, t)
            assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_criterion_04_entropic_value():
    tree = fixture_tree("binomial1")
    value = EntropicRisk(tree, 1.0).evaluate(np.array([0.0, 1.0, -1.0]), 0)[0]
    # the three atoms (root, now), (up, next), (down, next) with masses 1/2, 1/4, 1/4
    direct = np.log(0.5 * np.exp(0.0) + 0.25 * np.exp(-1.0) + 0.25 * np.exp(1.0))
    assert abs(value - direct) < 1e-9
    assert abs(value - np.log((1 + np.cosh(1.0)) / 2)) < 1e-9


@pytest.mark.parametrize("name", FIXTURE_TREES)
def test_criterion_05_entropic_duality(name):
    tree = fixture_tree(name)
    rm = EntropicRisk(tree, 1.0)
    family = EntropicFamily(1.0)
    rng = np.random.default_rng(105)
    xs = rng.uniform(-3, 3, size=(20, tree.n))
    probes = probe_measures(tree, 20, seed=105, sparsity=0.2)
    for t in range(tree.horizon + 1):
        rho = rm.evaluate_batch(xs, t)
        for j, x in enumerate(xs):
            assert np.max(np.abs(robust_evaluate(family, x, t, tree) - rho[j])) < 1e-6
        for Q in probes:
            pen = rm.penalty(Q, t).values
            for j, x in enumerate(xs):
                tail, ok = conditional_tail(Q, x, t)
                fin = ok & np.isfinite(pen)
                assert np.all(rho[j][fin] >= -tail[fin] - pen[fin] - 1e-9)


def test_criterion_06_avar():
    tree = fixture_tree("binomial1")
    x = np.array([0.0, 1.0, -1.0])
    value = AVaRRisk(tree, 0.5).evaluate(x, 0)[0]
    assert value == 0.5
    assert abs(value - oracles.avar_lp(tree, 0.5, x, 0)[0]) < 1e-12
    assert abs(value - oracles.avar_vertices(tree, 0.5, x, 0)[0]) < 1e-12
    ref = ProductMeasure.reference(tree)
    rng = np.random.default_rng(106)
    for y in rng.normal(size=(20, tree.n)):
        assert abs(AVaRRisk(tree, 1.0).evaluate(y, 0)[0] + ref.expectation(y)) < 1e-12


def test_criterion_07_time_consistency_battery():
    start = time.perf_counter()
    for name in ("binomial3", "skewed3"):
        tree = fixture_tree(name)
        assert check_time_consistent(EntropicRisk(tree, 1.0), budget=500)
        decreasing = EntropicRisk(tree, [2.0, 1.5, 1.0, 0.5])
        assert not check_time_consistent(decreasing, budget=500)
        assert check_time_consistent(decreasing, budget=500, mode="rejection")
        assert check_time_consistent(EntropicRisk(tree, [0.5, 1.0, 1.5, 2.0]), budget=500, mode="acceptance")
        raw = AVaRRisk(tree, 0.5)
        verdict = check_time_consistent(raw, budget=500)
        assert not verdict
        cex = verdict.counterexample
        assert not check_recursive(raw, AdaptedProcess.from_mapping(tree, cex["X"]), cex["t"])
        assert check_time_consistent(make_time_consistent(raw), budget=500)
    assert time.perf_counter() - start < 60.0


@pytest.mark.parametrize("name", ["binomial3", "skewed3"])
def test_criterion_08_cocycle_doob_riesz(name):
    tree = fixture_tree(name)
    rm = EntropicRisk(tree, 1.0)
    for Q in probe_measures(tree, 20, seed=108):
        for t in range(tree.horizon):
            res = penalty_cocycle(rm, Q, t)
            assert np.all(np.abs(res[np.isfinite(res)]) < 1e-9)
        dec = doob_riesz(rm, Q)
        assert dec.martingale_residual < 1e-9
        N = dec.residual_martingale
        assert np.all(np.abs(N[np.isfinite(N)]) < 1e-9)


def test_criterion_09_maximal_inequality():
    tree = binomial_tree(3)
    rm = EntropicRisk(tree, 1.0)
    rng = np.random.default_rng(109)
    violations = 0
    for Q in probe_measures(tree, 10, seed=109):
        x = rng.normal(size=tree.n)
        for c in (0.05, 0.1, 0.5):
            res = maximal_inequality_experiment(rm, Q, x, c)
            violations += not (res.exact and res.holds)
    assert violations == 0


def test_criterion_10_orderings():
    rng = np.random.default_rng(110)
    tree = fixture_tree("binomial2")
    xs = rng.uniform(-3, 3, size=(100, tree.n))
    for t in range(tree.horizon + 1):
        dec = DecoupledAVaRRisk(tree, 0.5, 0.6).evaluate_batch(xs, t)
        assert np.min(AVaRRisk(tree, 0.3).evaluate_batch(xs, t) - dec) >= -1e-9
        simple = SimplifiedEntropicRisk(tree, 1.0, 1.0).evaluate_batch(xs, t)
        assert np.min(EntropicRisk(tree, 1.0).evaluate_batch(xs, t) - simple) >= -1e-9


def test_criterion_11_cash_axioms():
    failures = 0
    for name in ("binomial1", "binomial2"):
        tree = fixture_tree(name)
        for kind, rm in zoo(tree).items():
            draws = 10_000 if kind not in ("decoupled-avar", "simplified-entropic") or name == "binomial1" else 1000
            failures += cash_subadditivity_battery(rm, draws=draws, seed=111).details["failures"]
            for s in range(1, tree.horizon + 1):
                verdict = check_cash_additive_at(rm, 0, s, budget=30)
                cert = verdict.details["certificate"]
                if cert["available"]:
                    assert cert["constant"] == verdict.passed, (name, kind, s)
    assert failures == 0


def test_criterion_12_coherent_structure():
    tree = fixture_tree("binomial1")
    observed = set()
    for other in (tree, fixture_tree("binomial2"), fixture_tree("skewed3")):
        avar = AVaRRisk(other, 0.5)
        for Q in probe_measures(other, 30, seed=112, sparsity=0.2):
            for t in range(other.horizon + 1):
                vals = avar.penalty(Q, t).values
                observed.update(float(v) for v in vals)
    assert observed <= {0.0, np.inf}
    closure = pasting_closure(AVaRRisk(tree, 0.5).defining_vertices(0))
    assert check_stability(closure)


def test_criterion_13_cli_determinism(tmp_path):
    runs = [
        ["check", "--tree", fixture_path("binomial2.json"), "--risk", fixture_path("avar.json"),
         "--property", "time-consistency"],
        ["check", "--tree", fixture_path("binomial3.json"), "--risk", fixture_path("entropic.json"),
         "--property", "maximal-inequality", "--process", "X"],
        ["eval", "--tree", fixture_path("skewed3.json"), "--risk", fixture_path("simplified_entropic.json"),
         "--process", "X"],
        ["decompose", "--tree", fixture_path("skewed3.json"), "--measure", fixture_path("measure_skewed3.json")],
    ]
    for k, argv in enumerate(runs):
        outputs = []
        for rep in range(2):
            out = tmp_path / f"{k}-{rep}.json"
            proc = subprocess.run([sys.executable, "-m", "procrisk", *argv, "--seed", "42", "--out", str(out)],
                                  capture_output=True)
            assert proc.returncode in (0, 1), proc.stderr
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
        json.loads(outputs[0])
