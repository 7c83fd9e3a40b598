"""Time-consistency checks, penalty cocycles, supermartingale structure and stability."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import InconsistentInput, InfinitePenalty, NotAbsContinuous, UnsupportedKind
from .measures import ProductMeasure, conditional_tail, decompose, paste
from .risk import INFINITE, PenaltyValue, RiskMeasure
from .tree import EventTree, as_values

DEFAULT_BUDGET = 500
PROBE_BOUND = 5.0

PASS, FAIL = "pass", "fail"


@dataclass
class Verdict:
    """Outcome of a property check; ``counterexample`` replays the violation."""

    property: str
    status: str
    tolerance: float
    counterexample: dict | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def __bool__(self):
        return self.passed

    def to_json(self) -> dict:
        return {"property": self.property, "status": self.status, "tolerance": self.tolerance,
                "counterexample": self.counterexample, "details": self.details}


def _probes(tree: EventTree, budget: int, seed: int, bound: float = PROBE_BOUND) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-bound, bound, size=(budget, tree.n))


def _replace_after(tree, xs, level_vals, t):
    """Copy of xs whose values at times >= t are the spread of ``level_vals`` (one row per probe)."""
    anc = tree.ancestor_at(t)
    ys = np.array(xs, dtype=float)
    late = tree.time >= t
    ys[:, late] = level_vals[:, anc[late] - tree.offset(t)]
    return ys


def _shrink(x, violation, rounds: int = 3):
    """Coordinate-wise move x toward 0 while ``violation(x)`` stays positive."""
    x = np.array(x, dtype=float)
    for _ in range(rounds):
        changed = False
        for i in range(x.size):
            if x[i] == 0.0:
                continue
            for cand in (0.0, np.round(x[i] / 2, 6), np.round(x[i], 3)):
                if cand == x[i]:
                    continue
                trial = x.copy()
                trial[i] = cand
                if violation(trial) > 0:
                    x = trial
                    changed = True
                    break
        if not changed:
            break
    return x


# -- recursiveness --------------------------------------------------------


def recursion_sides(rm: RiskMeasure, xs: np.ndarray, t: int):
    """rho_t(X) and rho_t(X_t 1_t - rho_{t+1}(X) 1_{t+1..}) for a batch of processes."""
    tree = rm.tree
    if t >= tree.horizon:
        raise ValueError("recursiveness needs t < T")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    lhs = rm.evaluate_batch(xs, t)
    nxt = rm.evaluate_batch(xs, t + 1)
    rhs = rm.evaluate_batch(_replace_after(tree, xs, -nxt, t + 1), t)
    return lhs, rhs


_GAP = {
    "strong": lambda l, r: np.abs(l - r),
    "acceptance": lambda l, r: l - r,
    "rejection": lambda l, r: r - l,
}


def check_recursive(rm: RiskMeasure, X, t: int, tol: float = 1e-9, mode: str = "strong") -> Verdict:
    """Recursion equality (or one of its inequalities) at every time-t node for one process."""
    tree = rm.tree
    x = as_values(tree, X)
    lhs, rhs = recursion_sides(rm, x[None, :], t)
    gap = _GAP[mode](lhs[0], rhs[0])
    k = int(np.argmax(gap))
    details = {"lhs": lhs[0].tolist(), "rhs": rhs[0].tolist(), "max_gap": float(gap.max())}
    if gap[k] <= tol:
        return Verdict(mode, PASS, tol, None, details)
    cex = _counterexample(tree, x, t, int(tree.level(t)[k]), lhs[0][k], rhs[0][k])
    return Verdict(mode, FAIL, tol, cex, details)


def _counterexample(tree, x, t, node, lhs, rhs, **extra):
    out = {"X": {str(nid): float(v) for nid, v in zip(tree.ids, x)}, "t": int(t),
           "node": tree.ids[node], "lhs": float(lhs), "rhs": float(rhs)}
    out.update(extra)
    return out


def check_time_consistent(rm: RiskMeasure, budget: int = DEFAULT_BUDGET, mode: str = "strong",
                          tol: float = 1e-9, seed: int = 42) -> Verdict:
    """Search random processes for a violation of the recursion at any (t, node).

    ``mode`` is ``"strong"`` (equality), ``"acceptance"`` (rho_t(X) <= rhs)
    or ``"rejection"`` (rho_t(X) >= rhs).  A pass is a probabilistic
    certificate over ``budget`` probes per time.
    """
    tree = rm.tree
    worst = 0.0
    for t in range(tree.horizon):
        xs = _probes(tree, budget, seed + t)
        lhs, rhs = recursion_sides(rm, xs, t)
        gap = _GAP[mode](lhs, rhs)
        worst = max(worst, float(gap.max()))
        if gap.max() > tol:
            k, j = np.unravel_index(int(np.argmax(gap)), gap.shape)

            def violation(x, j=j):
                l, r = recursion_sides(rm, x[None, :], t)
                return _GAP[mode](l[0, j], r[0, j]) - tol

            x = _shrink(xs[k], violation)
            l, r = recursion_sides(rm, x[None, :], t)
            cex = _counterexample(tree, x, t, int(tree.level(t)[j]), l[0, j], r[0, j])
            return Verdict(mode, FAIL, tol, cex, {"probes": budget, "max_gap": float(gap.max())})
    return Verdict(mode, PASS, tol, None, {"probes": budget, "max_gap": worst})


def check_weak_acceptance(rm: RiskMeasure, budget: int = DEFAULT_BUDGET, tol: float = 1e-9,
                          seed: int = 42) -> Verdict:
    """Processes with X_t = 0 accepted at t+1 must be accepted at t."""
    tree = rm.tree
    for t in range(tree.horizon):
        xs = _probes(tree, budget, seed + t)
        xs[:, tree.level(t)] = 0.0
        nxt = rm.evaluate_batch(xs, t + 1)
        anc = tree.ancestor_at(t + 1)
        late = tree.time >= t + 1
        slack = np.random.default_rng(seed + 1000 + t).uniform(0.0, 1.0, size=nxt.shape)
        shift = nxt + slack
        xs[:, late] += shift[:, anc[late] - tree.offset(t + 1)]
        now = rm.evaluate_batch(xs, t)
        if now.max() > tol:
            k, j = np.unravel_index(int(np.argmax(now)), now.shape)
            cex = _counterexample(tree, xs[k], t, int(tree.level(t)[j]), now[k, j], 0.0,
                                  rho_next=rm.evaluate(xs[k], t + 1).tolist())
            return Verdict("weak-acceptance", FAIL, tol, cex, {"probes": budget})
    return Verdict("weak-acceptance", PASS, tol, None, {"probes": budget})


def check_acceptance_split(rm: RiskMeasure, t: int, budget: int = DEFAULT_BUDGET, tol: float = 1e-9,
                           seed: int = 42) -> Verdict:
    """Does the acceptance set at t split into one-step accepted plus accepted-from-t+1?

    Composition direction: random one-step Y shifted to be accepted at t plus
    random W (zero before t+1) shifted to be accepted at t+1 must be
    accepted at t.  Decomposition direction: an accepted X splits as
    Y = X_t 1_t - rho_{t+1}(X) 1_{t+1..} and X - Y.
    """
    tree = rm.tree
    rng = np.random.default_rng(seed)
    details = {"probes": budget}

    # composition: Y in A_{t,t+1}, W in A_{t+1}
    ys = rng.uniform(-PROBE_BOUND, PROBE_BOUND, size=(budget, tree.n))
    ys[:, tree.time > t + 1] = ys[:, tree.ancestor_at(t + 1)[tree.time > t + 1]]
    ys[:, tree.time < t] = 0.0
    ys = _shift_to_accept(rm, ys, t)
    ws = rng.uniform(-PROBE_BOUND, PROBE_BOUND, size=(budget, tree.n))
    ws[:, tree.time <= t] = 0.0
    ws = _shift_to_accept(rm, ws, t + 1)
    total = rm.evaluate_batch(ys + ws, t)
    supset_gap = float(total.max())
    details["compose_max"] = supset_gap
    if supset_gap > tol:
        k, j = np.unravel_index(int(np.argmax(total)), total.shape)
        cex = _counterexample(tree, ys[k] + ws[k], t, int(tree.level(t)[j]), total[k, j], 0.0,
                              direction="compose",
                              Y={str(i): float(v) for i, v in zip(tree.ids, ys[k])},
                              W={str(i): float(v) for i, v in zip(tree.ids, ws[k])})
        return Verdict("acceptance-split", FAIL, tol, cex, details)

    # decomposition of accepted processes
    xs = _shift_to_accept(rm, rng.uniform(-PROBE_BOUND, PROBE_BOUND, size=(budget, tree.n)), t)
    nxt = rm.evaluate_batch(xs, t + 1)
    ys = _replace_after(tree, xs, -nxt, t + 1)
    ys[:, tree.time < t] = 0.0
    ws = xs - ys
    ws[:, tree.time <= t] = 0.0
    y_risk = rm.evaluate_batch(ys, t)
    w_risk = rm.evaluate_batch(ws, t + 1)
    details["split_max"] = float(max(y_risk.max(), w_risk.max()))
    bad_y = y_risk.max(axis=1) > tol
    bad_w = w_risk.max(axis=1) > tol
    if bad_y.any() or bad_w.any():
        k = int(np.argmax(bad_y | bad_w))
        j = int(np.argmax(y_risk[k]))
        cex = _counterexample(tree, xs[k], t, int(tree.level(t)[j]), y_risk[k, j], 0.0,
                              direction="split")
        return Verdict("acceptance-split", FAIL, tol, cex, details)
    return Verdict("acceptance-split", PASS, tol, None, details)


def _shift_to_accept(rm, xs, t):
    """Add rho_t(X) on the tail of each time-t node so that rho_t becomes 0."""
    tree = rm.tree
    rho = rm.evaluate_batch(xs, t)
    out = np.array(xs, dtype=float)
    late = tree.time >= t
    out[:, late] += rho[:, tree.ancestor_at(t)[late] - tree.offset(t)]
    return out


# -- penalties ------------------------------------------------------------


def _require_exact(rm):
    if not rm.has_exact_penalty:
        raise UnsupportedKind(f"kind {rm.kind!r} has only lower-bound penalties")


def one_step_penalty(rm: RiskMeasure, Qbar: ProductMeasure, t: int) -> PenaltyValue:
    return rm.one_step_penalty(Qbar, t)


def _model_expect_next(tree, M, vals_next, t):
    """E_Q[v_{t+1} | F_t] under the model with density process M (0 * inf = 0)."""
    lv, nx = tree.level(t), tree.level(t + 1)
    w = tree.prob[nx] * np.where(M[lv][tree.parent_pos[t + 1]] > 0,
                                 M[nx] / np.maximum(M[lv][tree.parent_pos[t + 1]], 1e-300), 0.0)
    terms = np.where(w > 0, w * np.where(np.isinf(vals_next), 1.0, vals_next), 0.0)
    out = np.bincount(tree.parent_pos[t + 1], weights=terms, minlength=lv.size)
    inf_hit = np.bincount(tree.parent_pos[t + 1], weights=(w > 0) & np.isinf(vals_next),
                          minlength=lv.size) > 0
    return np.where(inf_hit, INFINITE, out)


def penalty_cocycle(rm: RiskMeasure, Qbar: ProductMeasure, t: int) -> np.ndarray:
    """D_t a_t - D_t a_{t,t+1} - E_Q[D_{t+1} a_{t+1} | F_t] per time-t node.

    Zero under strong consistency, <= 0 under rejection and >= 0 under
    acceptance consistency.  Nodes where the left side is infinite give NaN.
    """
    _require_exact(rm)
    tree = rm.tree
    dis = decompose(Qbar)
    M, D = dis.M.values, dis.D.values
    lv, nx = tree.level(t), tree.level(t + 1)
    now = rm.penalty(Qbar, t).discounted(D[lv])
    step = rm.one_step_penalty(Qbar, t).discounted(D[lv])
    later = _model_expect_next(tree, M, rm.penalty(Qbar, t + 1).discounted(D[nx]), t)
    with np.errstate(invalid="ignore"):
        res = now - step - later
    return np.where(np.isfinite(now) & np.isfinite(step) & np.isfinite(later), res, np.nan)


def supermartingale_check(process, Qbar: ProductMeasure, tol: float = 1e-9, martingale: bool = False) -> Verdict:
    """One-step Q-supermartingale inequality E_Q[Y_{t+1} | F_t] <= Y_t at every node.

    Only nodes reached by the model are tested.  With ``martingale=True``
    equality is required.
    """
    tree = Qbar.tree
    y = np.asarray(as_values(tree, process), dtype=float)
    M = decompose(Qbar).M.values
    worst, where = -np.inf, None
    for t in range(tree.horizon):
        lv = tree.level(t)
        cond = _model_expect_next(tree, M, y[tree.level(t + 1)], t)
        gap = cond - y[lv]
        if martingale:
            gap = np.abs(gap)
        live = M[lv] > 0
        gap = np.where(live, gap, -np.inf)
        k = int(np.argmax(gap))
        if gap[k] > worst:
            worst, where = float(gap[k]), (t, int(lv[k]))
    name = "martingale" if martingale else "supermartingale"
    details = {"max_violation": worst}
    if worst > tol:
        t, node = where
        return Verdict(name, FAIL, tol, {"t": t, "node": tree.ids[node], "violation": worst}, details)
    return Verdict(name, PASS, tol, None, details)


def penalty_process(rm: RiskMeasure, Qbar: ProductMeasure) -> np.ndarray:
    """alpha_t(Qbar) at every node, t being the node's own time."""
    tree = rm.tree
    out = np.empty(tree.n)
    for t in range(tree.horizon + 1):
        out[tree.level(t)] = rm.penalty(Qbar, t).values
    return out


def discounted_penalty(rm: RiskMeasure, Qbar: ProductMeasure) -> np.ndarray:
    tree = rm.tree
    D = decompose(Qbar).D.values
    out = np.empty(tree.n)
    for t in range(tree.horizon + 1):
        lv = tree.level(t)
        out[lv] = rm.penalty(Qbar, t).discounted(D[lv])
    return out


def w_process(rm: RiskMeasure, X, Qbar: ProductMeasure) -> np.ndarray:
    """W_t = D_t (X_t + rho_t(X) + alpha_t) - sum_{s<=t} D_s (X_s - X_{s-1}).

    A Q-supermartingale for every finite-penalty measure when rm is
    strongly time consistent.
    """
    tree = rm.tree
    x = as_values(tree, X)
    D = decompose(Qbar).D.values
    rho = rm.evaluate_all(x)
    alpha = discounted_penalty(rm, Qbar)
    base = np.where(D > 0, D * (x + rho), 0.0) + alpha
    dx = np.array(x, dtype=float)
    nonroot = tree.parent >= 0
    dx[nonroot] -= x[tree.parent[nonroot]]
    run = D * dx
    for t in range(1, tree.horizon + 1):
        lv = tree.level(t)
        run[lv] += run[tree.parent[lv]]
    return base - run


def consistency_process(rm: RiskMeasure, X, Qbar: ProductMeasure) -> tuple:
    """Both sides of E_Q[D_{t+1}(X_t + rho_{t+1} + a_{t+1}) | F_t] <= D_t (X_t + rho_t + a_t)."""
    tree = rm.tree
    x = as_values(tree, X)
    dis = decompose(Qbar)
    M, D = dis.M.values, dis.D.values
    rho = rm.evaluate_all(x)
    alpha = discounted_penalty(rm, Qbar)
    lhs, rhs = [], []
    for t in range(tree.horizon):
        lv, nx = tree.level(t), tree.level(t + 1)
        nxt = np.where(D[nx] > 0, D[nx] * (x[tree.parent[nx]] + rho[nx]), 0.0) + alpha[nx]
        lhs.append(_model_expect_next(tree, M, nxt, t))
        rhs.append(np.where(D[lv] > 0, D[lv] * (x[lv] + rho[lv]), 0.0) + alpha[lv])
    return lhs, rhs


@dataclass
class PenaltyDecomposition:
    """Doob and Riesz pieces of the discounted penalty D_t alpha_t under Q."""

    discounted: np.ndarray
    predictable: np.ndarray
    martingale: np.ndarray
    potential: np.ndarray
    residual_martingale: np.ndarray
    martingale_residual: float

    def to_json(self, tree: EventTree) -> dict:
        def m(a):
            return {str(i): (float(v) if np.isfinite(v) else "inf") for i, v in zip(tree.ids, a)}
        return {"D_alpha": m(self.discounted), "A": m(self.predictable), "M": m(self.martingale),
                "S": m(self.potential), "N": m(self.residual_martingale),
                "martingale_residual": self.martingale_residual}


def doob_riesz(rm: RiskMeasure, Qbar: ProductMeasure, tol: float = 1e-9) -> PenaltyDecomposition:
    """Doob decomposition D alpha = M - A and Riesz decomposition D alpha = S + N.

    A_t = sum_{k<t} D_k alpha_{k,k+1} is built from the one-step penalties,
    S_t is the Q-conditional sum of the remaining one-step terms, and N is
    what is left over (zero at finite horizon under strong consistency).
    Raises InconsistentInput when M fails the martingale property.
    """
    _require_exact(rm)
    tree = rm.tree
    dis = decompose(Qbar)
    Mq, D = dis.M.values, dis.D.values
    Dalpha = discounted_penalty(rm, Qbar)
    step = np.zeros(tree.n)
    for t in range(tree.horizon):
        lv = tree.level(t)
        step[lv] = rm.one_step_penalty(Qbar, t).discounted(D[lv])
    A = np.zeros(tree.n)
    for t in range(1, tree.horizon + 1):
        lv = tree.level(t)
        A[lv] = A[tree.parent[lv]] + step[tree.parent[lv]]
    mart = Dalpha + A
    S = np.zeros(tree.n)
    for t in range(tree.horizon - 1, -1, -1):
        lv = tree.level(t)
        S[lv] = step[lv] + _model_expect_next(tree, Mq, S[tree.level(t + 1)], t)
    with np.errstate(invalid="ignore"):
        N = np.where(np.isfinite(Dalpha) & np.isfinite(S), Dalpha - S, np.nan)
    worst = 0.0
    for t in range(tree.horizon):
        lv = tree.level(t)
        cond = _model_expect_next(tree, Mq, mart[tree.level(t + 1)], t)
        live = (Mq[lv] > 0) & np.isfinite(mart[lv])
        if live.any():
            worst = max(worst, float(np.max(np.abs(cond - mart[lv])[live])))
    if worst > tol:
        raise InconsistentInput(f"discounted penalty plus compensator is not a martingale (gap {worst:.3g})")
    return PenaltyDecomposition(Dalpha, A, mart, S, N, worst)


# -- bubbles ----------------------------------------------------------------


@dataclass
class BubbleProfile:
    horizons: list
    values: list
    tail_sums: list
    trend: str

    def to_json(self) -> dict:
        return {"horizons": self.horizons, "values": self.values, "tail_sums": self.tail_sums,
                "trend": self.trend}


def bubble_profile(rm_family, qbar_family, horizons, tol: float = 1e-12) -> BubbleProfile:
    """E_Q[D_h alpha_h] for a family of models indexed by horizon.

    ``rm_family(T)`` and ``qbar_family(rm_tree)`` build the risk measure on a
    tree of horizon T and a measure on that tree.  For each h the model of
    horizon h + 1 is used so that alpha_h is not trivially zero.  Alongside,
    alpha_0 - E_Q[sum_{k<h} D_k alpha_{k,k+1}] is reported as a cross-check.
    The trend label is descriptive only.
    """
    values, tails = [], []
    for h in horizons:
        rm = rm_family(h + 1)
        Q = qbar_family(rm.tree)
        tree = rm.tree
        dis = decompose(Q)
        M, D = dis.M.values, dis.D.values
        weight = tree.abs_prob * M
        lv = tree.level(h)
        da = rm.penalty(Q, h).discounted(D[lv])
        values.append(float(np.sum(np.where(weight[lv] > 0, weight[lv] * da, 0.0))))
        alpha0 = float(rm.penalty(Q, 0).values[0])
        spent = 0.0
        for k in range(h):
            lk = tree.level(k)
            st = rm.one_step_penalty(Q, k).discounted(D[lk])
            spent += float(np.sum(np.where(weight[lk] > 0, weight[lk] * st, 0.0)))
        tails.append(alpha0 - spent)
    return BubbleProfile(list(horizons), values, tails, _trend(values, tol))


def _trend(values, tol):
    v = np.asarray(values, dtype=float)
    if np.all(np.abs(v) <= tol):
        return "zero"
    if v.size < 2:
        return "indeterminate"
    steps = np.diff(v)
    if np.all(steps <= tol) and v[-1] <= 0.5 * v[0]:
        return "decreasing-to-zero"
    if np.all(steps >= -tol) or v.min() >= 0.5 * v.max():
        return "bounded-away"
    return "indeterminate"


# -- maximal inequality ------------------------------------------------------


@dataclass
class MaximalInequalityResult:
    probability: float
    bound: float
    exact: bool
    interval: tuple | None = None

    @property
    def holds(self) -> bool:
        if self.exact:
            return self.probability <= self.bound + 1e-12
        return self.interval[0] <= self.bound + 1e-12

    def to_json(self) -> dict:
        return {"probability": self.probability, "bound": self.bound, "exact": self.exact,
                "interval": list(self.interval) if self.interval else None, "holds": self.holds}


def excess_process(rm: RiskMeasure, Qbar: ProductMeasure, X) -> np.ndarray:
    """D_t (rho_t(X) - F_t) with F_t = E_Q[reward after t] - alpha_t; 0 where D_t = 0."""
    tree = rm.tree
    x = as_values(tree, X)
    D = decompose(Qbar).D.values
    out = np.zeros(tree.n)
    for t in range(tree.horizon + 1):
        lv = tree.level(t)
        tail, ok = conditional_tail(Qbar, x, t)
        alpha = rm.penalty(Qbar, t).values
        rho = rm.evaluate(x, t)
        live = ok & (D[lv] > 0)
        with np.errstate(invalid="ignore"):
            ex = rho + tail + alpha
        out[lv] = np.where(live, D[lv] * ex, 0.0)
    return out


def maximal_inequality_experiment(rm: RiskMeasure, Qbar: ProductMeasure, X, c: float,
                                  trials: int | None = None, seed: int = 42) -> MaximalInequalityResult:
    """Q(sup_t D_t (rho_t - F_t) >= c) against the bound (rho_0 - F_0) / c.

    Without ``trials`` the probability is exact (sum over paths); otherwise it
    is estimated from ``trials`` sampled paths with a 99% Wilson interval.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    tree = rm.tree
    alpha0 = rm.penalty(Qbar, 0).values[0]
    if np.isinf(alpha0):
        raise InfinitePenalty("alpha_0 is infinite; the inequality is trivial")
    ex = excess_process(rm, Qbar, X)
    bound = float(ex[0]) / c
    top = ex[tree.paths].max(axis=1)
    M = decompose(Qbar).M.values
    leaves = tree.paths[:, -1]
    q = tree.abs_prob[leaves] * M[leaves]
    hit = top >= c
    if trials is None:
        return MaximalInequalityResult(float(q[hit].sum()), bound, True)
    rng = np.random.default_rng(seed)
    draws = rng.choice(leaves.size, size=trials, p=q / q.sum())
    k = int(hit[draws].sum())
    return MaximalInequalityResult(k / trials, bound, False, wilson_interval(k, trials))


def wilson_interval(k: int, n: int, z: float = 2.5758293035489004) -> tuple:
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


def maximizing_entropic_measure(tree: EventTree, r: float, X) -> ProductMeasure:
    """The measure attaining the time-0 entropic risk of X: density proportional to exp(-r X)."""
    x = as_values(tree, X)
    return ProductMeasure.normalized(tree, np.exp(-r * (x - x.min())))


# -- stability ---------------------------------------------------------------


def in_convex_hull(Z: np.ndarray, points: np.ndarray, tol: float = 1e-9) -> bool:
    """Is Z a convex combination of the rows of ``points`` (to within tol)?"""
    k = points.shape[0]
    if k == 0:
        return False
    dist = np.abs(points - Z).max(axis=1)
    if dist.min() <= tol:
        return True
    n = Z.size
    # minimize slack s with |points^T w - Z| <= s
    c = np.zeros(k + 1)
    c[-1] = 1.0
    A_ub = np.vstack([np.hstack([points.T, -np.ones((n, 1))]),
                      np.hstack([-points.T, -np.ones((n, 1))])])
    b_ub = np.concatenate([Z, -Z])
    A_eq = np.hstack([np.ones((1, k)), np.zeros((1, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * (k + 1), method="highs")
    return bool(res.status == 0 and res.fun <= tol)


def _subsets(level, limit):
    if level.size > limit:
        raise ValueError(f"too many time-t nodes ({level.size}) for exhaustive subsets")
    for size in range(1, level.size + 1):
        yield from itertools.combinations(level.tolist(), size)


def check_stability(measures, times=None, member=None, tol: float = 1e-9, subset_limit: int = 12) -> Verdict:
    """Is every pasting of two family members again in the family?

    ``member(Qbar) -> bool`` tests membership; by default the convex hull of
    the given densities is used.  Pairs that are not absolutely continuous
    on the relevant information are skipped and counted.
    """
    if not measures:
        raise ValueError("empty family")
    tree = measures[0].tree
    times = range(tree.horizon + 1) if times is None else times
    points = np.array([Q.Z for Q in measures])
    if member is None:
        def member(Q):
            return in_convex_hull(Q.Z, points, tol)
    skipped = checked = 0
    for i, j in itertools.product(range(len(measures)), repeat=2):
        if i == j:
            continue
        for t in times:
            for B in _subsets(tree.level(t), subset_limit):
                try:
                    Q0 = paste(measures[i], measures[j], t, B)
                except NotAbsContinuous:
                    skipped += 1
                    continue
                checked += 1
                if not member(Q0):
                    cex = {"first": i, "second": j, "t": int(t), "B": [tree.ids[b] for b in B],
                           "Z": Q0.to_mapping()["Z"]}
                    return Verdict("stability", FAIL, tol, cex, {"checked": checked, "skipped": skipped})
    return Verdict("stability", PASS, tol, None, {"checked": checked, "skipped": skipped})


def pasting_closure(measures, times=None, max_rounds: int = 20, tol: float = 1e-9,
                    subset_limit: int = 12) -> list:
    """Smallest superset of ``measures`` whose pastings stay in its convex hull."""
    family = list(measures)
    tree = family[0].tree
    times = range(tree.horizon + 1) if times is None else times
    for _ in range(max_rounds):
        points = np.array([Q.Z for Q in family])
        added = []
        for i, j in itertools.product(range(len(family)), repeat=2):
            if i == j:
                continue
            for t in times:
                for B in _subsets(tree.level(t), subset_limit):
                    try:
                        Q0 = paste(family[i], family[j], t, B)
                    except NotAbsContinuous:
                        continue
                    pts = points if not added else np.vstack([points] + [Q.Z[None] for Q in added])
                    if not in_convex_hull(Q0.Z, pts, tol):
                        added.append(Q0)
        if not added:
            return family
        family.extend(added)
    raise InconsistentInput(f"pasting closure did not settle in {max_rounds} rounds")


def probe_measures(tree: EventTree, count: int, seed: int = 42, sparsity: float = 0.0) -> list:
    """Random product measures for probing penalties and supermartingale properties."""
    from .measures import random_product_measure

    rng = np.random.default_rng(seed)
    return [random_product_measure(tree, rng, sparsity=sparsity) for _ in range(count)]

