"""Cash subadditivity, cash additivity and calibration to a bond term structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consistency import FAIL, PASS, Verdict, _trend
from .errors import BadTermStructure, UnsupportedKind
from .measures import decompose
from .risk import RiskMeasure
from .tree import AdaptedProcess, EventTree, _lookup, _measurable_level, as_values

LAMBDA_PROBES = (2.0, -2.0, 1.0, -1.0, 0.5, -0.5, 0.0)
CASH_PROBES = (0.0, 0.5, 1.0, 2.0)


def _cash_shift(tree: EventTree, m_level, t: int, s: int) -> np.ndarray:
    """Node values of m 1_{T_s} for amounts m known at time t."""
    anc = tree.ancestor_at(t)
    out = np.zeros(tree.n)
    late = tree.time >= s
    out[late] = np.asarray(m_level, dtype=float)[anc[late] - tree.offset(t)]
    return out


def check_cash_subadditive(rm: RiskMeasure, X, t: int, m, s: int, tol: float = 1e-9) -> Verdict:
    """rho_t(X + m 1_{T_{t+s}}) >= rho_t(X) - m for m >= 0 known at t and s >= 1."""
    tree = rm.tree
    if s < 1 or t + s > tree.horizon:
        raise ValueError("need s >= 1 and t + s <= T")
    level = _measurable_level(tree, m, t)
    if np.any(level < 0):
        raise ValueError("cash subadditivity concerns m >= 0")
    x = as_values(tree, X)
    lhs = rm.evaluate(x + _cash_shift(tree, level, t, t + s), t)
    rhs = rm.evaluate(x, t) - level
    gap = rhs - lhs
    details = {"lhs": lhs.tolist(), "rhs": rhs.tolist(), "max_gap": float(gap.max())}
    if gap.max() > tol:
        k = int(np.argmax(gap))
        cex = {"X": {str(i): float(v) for i, v in zip(tree.ids, x)}, "t": t, "s": s,
               "m": level.tolist(), "node": tree.ids[tree.level(t)[k]],
               "lhs": float(lhs[k]), "rhs": float(rhs[k])}
        return Verdict("cash-subadditivity", FAIL, tol, cex, details)
    return Verdict("cash-subadditivity", PASS, tol, None, details)


def cash_subadditivity_battery(rm: RiskMeasure, draws: int = 10_000, seed: int = 42,
                               tol: float = 1e-9, batch: int = 500) -> Verdict:
    """Random (X, t, m, s) draws; counts violations of cash subadditivity."""
    tree = rm.tree
    if tree.horizon < 1:
        return Verdict("cash-subadditivity", PASS, tol, None, {"draws": 0, "failures": 0})
    rng = np.random.default_rng(seed)
    failures, first = 0, None
    done = 0
    while done < draws:
        k = min(batch, draws - done)
        t = int(rng.integers(0, tree.horizon))
        s = int(rng.integers(1, tree.horizon - t + 1))
        xs = rng.uniform(-5, 5, size=(k, tree.n))
        ms = rng.uniform(0, 2, size=(k, tree.level_size(t)))
        shift = np.stack([_cash_shift(tree, m, t, t + s) for m in ms])
        gap = (rm.evaluate_batch(xs, t) - ms) - rm.evaluate_batch(xs + shift, t)
        bad = gap.max(axis=1) > tol
        failures += int(bad.sum())
        if bad.any() and first is None:
            j = int(np.argmax(bad))
            first = {"X": {str(i): float(v) for i, v in zip(tree.ids, xs[j])}, "t": t, "s": s,
                     "m": ms[j].tolist(), "gap": float(gap[j].max())}
        done += k
    status = PASS if failures == 0 else FAIL
    return Verdict("cash-subadditivity", status, tol, first, {"draws": draws, "failures": failures})


def discount_certificate(rm: RiskMeasure, t: int, s: int, tol: float = 1e-9) -> dict:
    """Do the known finite-penalty measures keep D constant on [t, s]?

    Checked at nodes the model reaches and where the discount is positive.
    """
    tree = rm.tree
    try:
        witnesses = rm.finite_penalty_witnesses(t)
    except UnsupportedKind:
        return {"available": False, "constant": None}
    anc = tree.ancestor_at(t)
    window = (tree.time > t) & (tree.time <= s)
    worst = 0.0
    for Q in witnesses:
        dis = decompose(Q)
        M, D = dis.M.values, dis.D.values
        live = window & (M > 0) & (D[np.maximum(anc, 0)] > 0)
        if live.any():
            worst = max(worst, float(np.max(np.abs(D[live] - D[anc[live]]))))
    return {"available": True, "constant": worst <= tol, "max_drop": worst, "witnesses": len(witnesses)}


def check_cash_additive_at(rm: RiskMeasure, t: int, s: int, budget: int = 50, seed: int = 42,
                           tol: float = 1e-9) -> Verdict:
    """rho_t(X + m 1_{T_s}) = rho_t(X) - m over probe X and amounts m of both signs.

    The verdict's details carry the discount certificate from the measures
    known to have finite penalty.
    """
    tree = rm.tree
    if not t < s <= tree.horizon:
        raise ValueError("need t < s <= T")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-5, 5, size=(budget, tree.n))
    n_t = tree.level_size(t)
    amounts = [np.full(n_t, sign * m) for m in CASH_PROBES for sign in (1, -1) if m or sign > 0]
    amounts += [rng.choice(CASH_PROBES, size=n_t) * rng.choice([-1, 1], size=n_t) for _ in range(4)]
    base = rm.evaluate_batch(xs, t)
    cert = discount_certificate(rm, t, s, tol)
    worst, cex = 0.0, None
    for m in amounts:
        shifted = rm.evaluate_batch(xs + _cash_shift(tree, m, t, s), t)
        gap = np.abs(shifted - (base - m))
        if gap.max() > worst:
            worst = float(gap.max())
            k, j = np.unravel_index(int(np.argmax(gap)), gap.shape)
            cex = {"X": {str(i): float(v) for i, v in zip(tree.ids, xs[k])}, "t": t, "s": s,
                   "m": m.tolist(), "node": tree.ids[tree.level(t)[j]],
                   "lhs": float(shifted[k, j]), "rhs": float(base[k, j] - m[j])}
    details = {"max_gap": worst, "certificate": cert}
    if worst > tol:
        return Verdict("cash-additivity", FAIL, tol, cex, details)
    return Verdict("cash-additivity", PASS, tol, None, details)


def _lambda_levels(n: int, rng, count: int = 4):
    out = [np.full(n, lam) for lam in LAMBDA_PROBES]
    out += [rng.choice(LAMBDA_PROBES, size=n) for _ in range(count)]
    return out


def numeraire_linearity(rm: RiskMeasure, N, s: int, t: int, budget: int = 20, seed: int = 42,
                        tol: float = 1e-9) -> Verdict:
    """Linearity of rho_t along the payment N_s 1_{T_s}, and additivity against other X.

    N is given by its time-s values (or as a process, of which the time-s
    values are used).  The details report the implied price -rho_t(N_s 1_{T_s}).
    """
    tree = rm.tree
    if s < t:
        raise ValueError("need s >= t")
    vals = np.asarray(N.values if isinstance(N, AdaptedProcess) else N, dtype=float)
    level = vals[tree.level(s)] if vals.shape == (tree.n,) else vals
    pay = _cash_shift(tree, level, s, s)
    rng = np.random.default_rng(seed)
    unit = rm.evaluate(pay, t)
    details = {"price": (-unit).tolist()}
    anc = tree.ancestor_at(t)
    late = tree.time >= t
    worst, cex = 0.0, None
    for lam in _lambda_levels(tree.level_size(t), rng):
        scale = np.zeros(tree.n)
        scale[late] = lam[anc[late] - tree.offset(t)]
        gap = np.abs(rm.evaluate(scale * pay, t) - lam * unit)
        if gap.max() > worst:
            worst, cex = float(gap.max()), {"part": "homogeneity", "lambda": lam.tolist()}
    details["homogeneity_gap"] = worst
    if worst > tol:
        return Verdict("numeraire-linearity", FAIL, tol, cex, details)
    xs = rng.uniform(-5, 5, size=(budget, tree.n))
    base = rm.evaluate_batch(xs, t)
    worst = 0.0
    for lam in _lambda_levels(tree.level_size(t), rng):
        scale = np.zeros(tree.n)
        scale[late] = lam[anc[late] - tree.offset(t)]
        gap = np.abs(rm.evaluate_batch(xs + scale * pay, t) - (base + lam * unit))
        if gap.max() > worst:
            k = int(np.unravel_index(int(np.argmax(gap)), gap.shape)[0])
            worst = float(gap.max())
            cex = {"part": "additivity", "lambda": lam.tolist(),
                   "X": {str(i): float(v) for i, v in zip(tree.ids, xs[k])}}
    details["additivity_gap"] = worst
    if worst > tol:
        return Verdict("numeraire-linearity", FAIL, tol, cex, details)
    return Verdict("numeraire-linearity", PASS, tol, None, details)


# -- term structures ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TermStructure:
    """Short rates per node and zero-coupon bond prices per (node, maturity).

    The rate stored at a time-s node (s >= 1) is the one earned from s - 1
    to s, so B_t is the product of (1 + r) along the path up to t.
    """

    tree: EventTree
    rates: np.ndarray
    zcb: dict

    def __post_init__(self):
        tree = self.tree
        r = np.asarray(self.rates, dtype=float)
        if r.shape != (tree.n,) or not np.all(np.isfinite(r)):
            raise BadTermStructure("rates need one finite value per node")
        if np.any(r <= -1):
            raise BadTermStructure("rates must exceed -1")
        for v, by_k in self.zcb.items():
            t = int(tree.time[v])
            for k, price in by_k.items():
                if k < t or k > tree.horizon:
                    raise BadTermStructure(f"zcb at node {tree.ids[v]!r}: maturity {k} outside [{t}, {tree.horizon}]")
                if not price > 0:
                    raise BadTermStructure(f"zcb at node {tree.ids[v]!r}, maturity {k}: price must be positive")
                if k == t and abs(price - 1.0) > 1e-12:
                    raise BadTermStructure(f"zcb at node {tree.ids[v]!r}: B_(t,t) must be 1")
        object.__setattr__(self, "rates", r)

    @classmethod
    def from_mapping(cls, tree: EventTree, spec: dict) -> "TermStructure":
        if "rates" not in spec:
            raise BadTermStructure("term structure needs 'rates'")
        rates = np.zeros(tree.n)
        for i, nid in enumerate(tree.ids):
            val = _lookup(spec["rates"], nid)
            if val is not None:
                rates[i] = float(val)
        zcb = {}
        for key, by_k in (spec.get("zcb") or {}).items():
            if key in tree.index:
                v = tree.index[key]
            elif str(key).lstrip("-").isdigit() and int(key) in tree.index:
                v = tree.index[int(key)]
            else:
                raise BadTermStructure(f"zcb refers to unknown node {key!r}")
            zcb[v] = {int(k): float(p) for k, p in by_k.items()}
        return cls(tree, rates, zcb)

    def to_mapping(self) -> dict:
        return {"rates": {str(nid): float(r) for nid, r in zip(self.tree.ids, self.rates)},
                "zcb": {str(self.tree.ids[v]): {str(k): p for k, p in sorted(by_k.items())}
                        for v, by_k in sorted(self.zcb.items())}}

    @property
    def money_market(self) -> np.ndarray:
        tree = self.tree
        B = np.ones(tree.n)
        for t in range(1, tree.horizon + 1):
            lv = tree.level(t)
            B[lv] = B[tree.parent[lv]] * (1.0 + self.rates[lv])
        return B

    @property
    def predictable(self) -> bool:
        """True when every node's rate is shared by its siblings."""
        tree = self.tree
        for v in range(tree.n):
            kids = tree.children[v]
            if kids.size > 1 and np.ptp(self.rates[kids]) > 1e-12:
                return False
        return True

    def bond_price(self, v: int, k: int) -> float:
        return self.zcb[v][k]


def flat_term_structure(tree: EventTree, rate: float) -> TermStructure:
    """Deterministic constant rate with the matching bond prices (1 + r)^-(k - t)."""
    rates = np.where(tree.time > 0, rate, 0.0)
    zcb = {v: {k: (1.0 + rate) ** -(k - int(tree.time[v])) for k in range(int(tree.time[v]), tree.horizon + 1)}
           for v in range(tree.n)}
    return TermStructure(tree, rates, zcb)


def implied_term_structure(Qbar, rates) -> TermStructure:
    """Bond prices that a linear pricing rule under Qbar assigns, for given short rates.

    B_{t,k} = E_Q[D_k B_t / (D_t B_k) | F_t]; these make the expected-loss
    measure under Qbar calibrated by construction.
    """
    tree = Qbar.tree
    draft = TermStructure(tree, rates, {})
    B = draft.money_market
    dis = decompose(Qbar)
    M, D = dis.M.values, dis.D.values
    zcb = {}
    for v in range(tree.n):
        t = int(tree.time[v])
        if M[v] <= 0 or D[v] <= 0:
            continue
        sub = tree.subtree(v)
        w = tree.abs_prob[sub] / tree.abs_prob[v] * M[sub] / M[v]
        zcb[v] = {}
        for k in range(t, tree.horizon + 1):
            at_k = tree.time[sub] == k
            zcb[v][k] = float(np.sum(w[at_k] * D[sub][at_k] * B[v] / (D[v] * B[sub][at_k])))
    return TermStructure(tree, rates, zcb)


def check_zcb_calibration(rm: RiskMeasure, term: TermStructure, t: int, tol: float = 1e-9,
                          seed: int = 42) -> Verdict:
    """rho_t(lambda B_t / B_k 1_{T_k}) = -lambda B_{t,k} for every maturity k and probe lambda.

    With predictable rates and all maturities calibrated, cash additivity at
    t + 1 is also asserted.
    """
    tree = rm.tree
    if term.tree is not tree:
        raise BadTermStructure("term structure lives on a different tree")
    lv = tree.level(t)
    missing = [tree.ids[v] for v in lv if int(v) not in term.zcb]
    if missing:
        raise BadTermStructure(f"zcb prices missing at time-{t} nodes {missing}")
    B = term.money_market
    anc = tree.ancestor_at(t)
    rng = np.random.default_rng(seed)
    lams = _lambda_levels(lv.size, rng)
    per_maturity = {}
    failed = []
    for k in range(t, tree.horizon + 1):
        prices = np.array([term.zcb[int(v)].get(k, np.nan) for v in lv])
        if np.any(np.isnan(prices)):
            continue
        worst = 0.0
        for lam in lams:
            x = np.zeros(tree.n)
            late = tree.time >= k
            lam_node = lam[anc[late] - tree.offset(t)]
            bk = B[tree.ancestor_at(k)[late]]
            x[late] = lam_node * B[anc[late]] / bk
            gap = np.abs(rm.evaluate(x, t) + lam * prices)
            worst = max(worst, float(gap.max()))
        per_maturity[str(k)] = worst
        if worst > tol:
            failed.append(k)
    details = {"max_gap_by_maturity": per_maturity, "failed_maturities": failed,
               "predictable_rates": term.predictable}
    if failed:
        return Verdict("calibration", FAIL, tol, {"t": t, "maturities": failed}, details)
    if term.predictable and t < tree.horizon:
        additive = check_cash_additive_at(rm, t, t + 1, seed=seed, tol=tol)
        details["cash_additive_next"] = additive.status
        if not additive:
            return Verdict("calibration", FAIL, tol, additive.counterexample, details)
    return Verdict("calibration", PASS, tol, None, details)


# -- growing horizons ----------------------------------------------------------


def shift_decay_profile(rm_family, horizons) -> dict:
    """Compensation -rho_0(1_{T_h}) for a unit paid from the last time on, over growing horizons.

    ``rm_family(h)`` builds the risk measure on a tree of horizon h.  Under
    continuity from above the compensation for ever later payments must
    fade, so a cash-additive limit is impossible; the decay shows this.
    """
    values = []
    for h in horizons:
        rm = rm_family(h)
        tree = rm.tree
        pay = (tree.time >= h).astype(float)
        values.append(float(-rm.evaluate(pay, 0)[0]))
    return {"horizons": list(horizons), "compensation": values, "trend": _trend(values, 1e-12)}
