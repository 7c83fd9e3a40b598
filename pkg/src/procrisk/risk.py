"""Conditional convex risk measures for processes and their dual objects.

A risk measure maps an adapted process X and a time t to one capital
requirement per time-t node.  All concrete families live in ``zoo``; this
module holds the shared contract, the penalty container, lifting to the
product space, generic penalty bounds and the robust evaluation engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleFamily, OptimizerFailed, UnsupportedKind
from .measures import ProductMeasure, conditional_tail, conditional_tail_batch
from .polytope import MAX_ENUMERATION_ATOMS, greedy_capped_max, vertex_capped_max
from .tree import AdaptedProcess, EventTree, as_values, spread

INFINITE = np.inf


@dataclass(frozen=True, eq=False)
class PenaltyValue:
    """Penalty per time-t node; ``INFINITE`` marks an infinite penalty.

    ``exact`` is False when the values are only certified lower bounds.
    """

    t: int
    values: np.ndarray
    exact: bool = True

    @property
    def infinite(self) -> np.ndarray:
        return np.isinf(self.values)

    def discounted(self, D_level) -> np.ndarray:
        """D_t * alpha_t with the convention 0 * infinity = 0."""
        d = np.asarray(D_level, dtype=float)
        out = np.where(d > 0, d * np.where(self.infinite, 1.0, self.values), 0.0)
        return np.where(self.infinite & (d > 0), INFINITE, out)

    def to_list(self) -> list:
        return [None if np.isinf(v) else float(v) for v in self.values]


class RiskMeasure:
    """Base class: a dynamic risk measure on one event tree.

    Subclasses implement ``_evaluate_batch(x, t)`` mapping a (k, n) array of
    node values to a (k, n_t) array of capital requirements.
    """

    kind = "abstract"
    coherent = False

    def __init__(self, tree: EventTree):
        self.tree = tree

    # -- evaluation ----------------------------------------------------

    def evaluate(self, X, t: int) -> np.ndarray:
        x = as_values(self.tree, X)
        return self._evaluate_batch(x[None, :], t)[0]

    def evaluate_batch(self, xs, t: int) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return self._evaluate_batch(xs, t)

    def evaluate_all(self, X) -> np.ndarray:
        """rho_t(X) at every node, t being the node's own time."""
        out = np.empty(self.tree.n)
        for t in range(self.tree.horizon + 1):
            out[self.tree.level(t)] = self.evaluate(X, t)
        return out

    def _evaluate_batch(self, xs: np.ndarray, t: int) -> np.ndarray:
        lv = self.tree.level(t)
        out = np.empty((xs.shape[0], lv.size))
        for k, v in enumerate(lv):
            out[:, k] = self._evaluate_node(xs, int(v))
        return out

    def _evaluate_node(self, xs: np.ndarray, v: int) -> np.ndarray:
        raise NotImplementedError

    # -- duals ---------------------------------------------------------

    def penalty(self, Qbar: ProductMeasure, t: int) -> PenaltyValue:
        """Minimal penalty; generic kinds return a probe lower bound."""
        return penalty_lower_bound(self, Qbar, t)

    def one_step_penalty(self, Qbar: ProductMeasure, t: int) -> PenaltyValue:
        raise UnsupportedKind(f"no closed-form one-step penalty for kind {self.kind!r}")

    @property
    def has_exact_penalty(self) -> bool:
        return False

    def finite_penalty_witnesses(self, t: int) -> list:
        """Measures known to have finite penalty at time t (used by cash certificates)."""
        raise UnsupportedKind(f"no finite-penalty witnesses for kind {self.kind!r}")

    def to_spec(self) -> dict:
        raise UnsupportedKind(f"kind {self.kind!r} has no serial form")

    def __repr__(self):
        return f"{type(self).__name__}({self.to_spec().get('params', {})!r})"


def evaluate(rm: RiskMeasure, X, t: int) -> np.ndarray:
    """Capital requirement rho_t(X), one value per time-t node."""
    return rm.evaluate(X, t)


def lift(rm: RiskMeasure, X, t: int) -> np.ndarray:
    """The product-space risk of X given F-bar_t, as node values.

    Nodes before t carry -X; nodes at times >= t carry rho_t(X) of their
    time-t ancestor.
    """
    tree = rm.tree
    x = as_values(tree, X)
    out = spread(tree, rm.evaluate(x, t), t)
    early = tree.time < t
    out[early] = -x[early]
    return out


def penalty(rm: RiskMeasure, Qbar: ProductMeasure, t: int) -> PenaltyValue:
    return rm.penalty(Qbar, t)


def lifted_penalty(rm: RiskMeasure, Qbar: ProductMeasure, t: int) -> np.ndarray:
    """Penalty of the lifted measure: 0 on the past atoms, alpha_t on the tail."""
    tree = rm.tree
    out = spread(tree, rm.penalty(Qbar, t).values, t)
    out[tree.time < t] = 0.0
    return out


def expected_reward(Qbar: ProductMeasure, xs: np.ndarray, t: int) -> np.ndarray:
    """E_Q[-sum_{s>=t} gamma_s / D_t X_s | F_t] for a batch of processes.

    NaN where the time-t atom carries no mass.
    """
    return -conditional_tail_batch(Qbar, xs, t)[0]


def penalty_lower_bound(rm: RiskMeasure, Qbar: ProductMeasure, t: int, probes: int = 10_000,
                        bound: float = 10.0, seed: int = 42, refine: int = 0,
                        batch: int = 500) -> PenaltyValue:
    """Lower bound of the minimal penalty by a supremum over random processes.

    Probes are uniform in [-bound, bound] at every node.  ``refine`` extra
    rounds of local perturbation around the best probe tighten the bound;
    every evaluated process is a valid certificate, so the result is always
    a lower bound.
    """
    tree = rm.tree
    rng = np.random.default_rng(seed)
    lv = tree.level(t)
    best = np.full(lv.size, -np.inf)
    best_x = np.zeros((lv.size, tree.n))
    dead = Qbar.tail_mass[lv] <= 0

    def consume(xs):
        gain = expected_reward(Qbar, xs, t) - rm.evaluate_batch(xs, t)
        gain[:, dead] = -np.inf
        k = np.argmax(gain, axis=0)
        top = gain[k, np.arange(lv.size)]
        better = top > best
        best[better] = top[better]
        best_x[better] = xs[k[better]]

    done = 0
    while done < probes:
        k = min(batch, probes - done)
        consume(rng.uniform(-bound, bound, size=(k, tree.n)))
        done += k
    scale = bound / 4
    for _ in range(refine):
        centre = best_x.copy()
        for j in range(lv.size):
            xs = centre[j] + rng.normal(0.0, scale, size=(batch, tree.n))
            consume(np.clip(xs, -bound, bound))
        scale *= 0.85
    out = np.where(dead, INFINITE, np.maximum(best, 0.0))
    return PenaltyValue(t, out, exact=False)


def acceptance_test(rm: RiskMeasure, X, t: int, lifted: bool = False, tol: float = 0.0) -> np.ndarray:
    """Node-wise membership of X in the acceptance set at time t.

    With ``lifted=True`` the past payments X_0..X_{t-1} must also be
    nonnegative along the path leading to the node.
    """
    tree = rm.tree
    x = as_values(tree, X)
    ok = rm.evaluate(x, t) <= tol
    if lifted and t > 0:
        lv = tree.level(t)
        past_ok = np.ones(lv.size, dtype=bool)
        node = lv.copy()
        for _ in range(t):
            node = tree.parent[node]
            past_ok &= x[node] >= -tol
        ok &= past_ok
    return ok


@dataclass
class ContinuityReport:
    values: np.ndarray
    limit: np.ndarray
    monotone: bool
    final_gap: float


def continuity_probe(rm: RiskMeasure, X, t: int, terms: int = 30, sequence=None) -> ContinuityReport:
    """Evaluate rho_t along a decreasing sequence X^n -> X.

    By default X^n = X + 2^{-n}.  A custom ``sequence`` (list of processes,
    pointwise decreasing) can be supplied instead.
    """
    tree = rm.tree
    x = as_values(tree, X)
    if sequence is None:
        seq = [x + 2.0 ** (-n) for n in range(terms)]
    else:
        seq = [as_values(tree, s) for s in sequence]
    vals = rm.evaluate_batch(np.array(seq), t)
    limit = rm.evaluate(x, t)
    monotone = bool(np.all(np.diff(vals, axis=0) >= -1e-12))
    gap = float(np.max(np.abs(vals[-1] - limit)))
    return ContinuityReport(vals, limit, monotone, gap)


# -- robust evaluation ---------------------------------------------------


class MeasureFamily:
    """A set of conditional product measures with penalties, searched node by node."""

    def supremum(self, tree: EventTree, x: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError


@dataclass
class FiniteFamily(MeasureFamily):
    """Finitely many measures; ``penalty(Qbar, t)`` returns a PenaltyValue."""

    measures: list
    penalty: object = None

    def supremum(self, tree, x, t):
        lv = tree.level(t)
        best = np.full(lv.size, -np.inf)
        for Q in self.measures:
            reward, ok = conditional_tail(Q, x, t)
            pen = np.zeros(lv.size) if self.penalty is None else self.penalty(Q, t).values
            val = np.where(ok & np.isfinite(pen), -reward - np.where(np.isfinite(pen), pen, 0.0), -np.inf)
            best = np.maximum(best, val)
        if np.any(np.isneginf(best)):
            raise InfeasibleFamily("no measure with finite penalty at some node")
        return best


@dataclass
class CappedFamily(MeasureFamily):
    """All measures whose conditional density on the tail atoms is at most 1/level.

    Coherent: the penalty is 0 on the family and infinite outside.  Uses
    vertex enumeration for small subtrees and the sorted-tail construction
    otherwise.
    """

    level: float
    method: str = "auto"

    def supremum(self, tree, x, t):
        out = []
        for v in tree.level(t):
            sub = tree.subtree(v)
            caps = tree.tail_weights(v) / self.level
            use_vertices = self.method == "vertices" or (
                self.method == "auto" and sub.size <= MAX_ENUMERATION_ATOMS)
            fn = vertex_capped_max if use_vertices else greedy_capped_max
            out.append(fn(-x[sub], caps)[0])
        return np.array(out)


@dataclass
class EntropicFamily(MeasureFamily):
    """All measures, penalized by relative entropy to the reference tail divided by r."""

    r: float
    max_iter: int = 10_000
    tol: float = 1e-10
    iterations: list = field(default_factory=list)

    def penalty(self, q, p):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(q > 0, q * np.log(q / p), 0.0)
        return terms.sum() / self.r

    def supremum(self, tree, x, t):
        out = []
        for v in tree.level(t):
            sub = tree.subtree(v)
            p = tree.tail_weights(v)
            val, q, its = self._maximize(-x[sub], p)
            self.iterations.append(its)
            out.append(val)
        return np.array(out)

    def _maximize(self, a, p):
        """Maximize q.a - KL(q|p)/r over the simplex by mirror ascent with backtracking."""
        r = self.r
        p = p / p.sum()
        if p.size == 1:
            return float(a[0]), np.ones(1), 0

        def objective(q):
            return float(np.dot(q, a)) - self.penalty(q, p)

        q = p.copy()
        f = objective(q)
        step = 1.0
        for it in range(1, self.max_iter + 1):
            grad = a - (np.log(q / p) + 1.0) / r
            while True:
                logits = np.log(q) + step * grad
                logits -= logits.max()
                cand = np.exp(logits)
                cand /= cand.sum()
                fc = objective(cand)
                if fc >= f - 1e-15 or step < 1e-12:
                    break
                step /= 2
            if step < 1e-12:
                raise OptimizerFailed("line search collapsed")
            gain = fc - f
            q, f = cand, fc
            if abs(gain) <= self.tol * max(1.0, abs(f)):
                return f, q, it
            step = min(step * 2.0, 1e6)
        raise OptimizerFailed(f"no convergence in {self.max_iter} iterations")


def robust_evaluate(family: MeasureFamily, X, t: int, tree: EventTree | None = None) -> np.ndarray:
    """Supremum over a measure family of expected reward minus penalty."""
    if isinstance(X, AdaptedProcess):
        tree = X.tree
    if tree is None:
        raise ValueError("tree required when X is a raw array")
    return family.supremum(tree, as_values(tree, X), t)
