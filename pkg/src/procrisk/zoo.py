"""Concrete dynamic risk measures with closed forms or exact solvers.

Every class evaluates rho_t(X) node by node from the values of X on the
subtree below the node (times >= t); the values before t are ignored.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import BadParameters, OptimizerFailed, UnsupportedInner, UnsupportedKind
from .measures import (
    ProductMeasure,
    compose,
    conditional_tail_batch,
    decompose,
    path_sums,
)
from .polytope import ConcavePiecewise, capped_simplex_vertices, greedy_capped_max
from .risk import INFINITE, PenaltyValue, RiskMeasure
from .tree import AdaptedProcess, EventTree, as_values

CAP_TOL = 1e-9


def _profile(value, tree: EventTree, name: str, low: float, high: float, closed_low: bool = False):
    """Per-time parameter vector from a scalar or a list."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(tree.horizon + 1, arr[0])
    if arr.size != tree.horizon + 1:
        raise BadParameters(f"{name} needs one value per time 0..{tree.horizon}, got {arr.size}")
    too_low = arr < low if closed_low else arr <= low
    if np.any(too_low) or np.any(arr > high) or not np.all(np.isfinite(arr)):
        raise BadParameters(f"{name} must lie in {'[' if closed_low else '('}{low}, {high}]")
    return arr


def _scalar_or_list(arr):
    arr = np.asarray(arr)
    if np.all(arr == arr[0]):
        return float(arr[0])
    return [float(a) for a in arr]


class _NodeCache:
    """Per-node index data reused across evaluations."""

    def __init__(self, tree: EventTree):
        self.tree = tree

    @lru_cache(maxsize=None)
    def node(self, v: int):
        tree = self.tree
        t = int(tree.time[v])
        rows = tree.paths[:, t] == v
        paths = tree.paths[rows][:, t:]
        leaves = paths[:, -1]
        return {
            "t": t,
            "sub": tree.subtree(v),
            "weights": tree.tail_weights(v),
            "paths": paths,
            "leaves": leaves,
            "leaf_prob": tree.abs_prob[leaves] / tree.abs_prob[v],
            "mu_t": tree.mu[paths] / tree.mu_tail[v],
        }

    def __hash__(self):
        return id(self)


# -- inner risk measures for random variables ---------------------------


class InnerMeasure:
    """psi_t for terminal random variables: expectation, entropic or AV@R."""

    def __init__(self, kind: str, param=None):
        if kind not in ("expectation", "entropic", "avar"):
            raise UnsupportedInner(f"inner risk measure {kind!r} not supported")
        self.kind = kind
        self.param = None if param is None else float(param)
        if kind == "entropic" and not (self.param and self.param > 0):
            raise BadParameters("entropic inner measure needs r > 0")
        if kind == "avar" and not (self.param and 0 < self.param <= 1):
            raise BadParameters("AV@R inner measure needs lambda in (0, 1]")

    @classmethod
    def from_spec(cls, spec) -> "InnerMeasure":
        if isinstance(spec, str):
            return cls(spec)
        kind = spec.get("kind")
        param = spec.get("r", spec.get("lambda"))
        return cls(kind, param)

    def to_spec(self) -> dict:
        if self.kind == "expectation":
            return {"kind": "expectation"}
        key = "r" if self.kind == "entropic" else "lambda"
        return {"kind": self.kind, key: self.param}

    @property
    def coherent(self) -> bool:
        return self.kind != "entropic"

    def __call__(self, Y: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Risk of each row of Y (values on leaves with probabilities p)."""
        if self.kind == "expectation":
            return -(Y @ p)
        if self.kind == "entropic":
            r = self.param
            return logsumexp(np.log(p) - r * Y, axis=1) / r
        return greedy_capped_max(-Y, p / self.param)


# -- nested entropic -----------------------------------------------------


class EntropicRisk(RiskMeasure):
    """Entropic risk on the product space with per-time risk aversion r_t."""

    kind = "entropic"

    def __init__(self, tree: EventTree, r):
        super().__init__(tree)
        self.r = _profile(r, tree, "r", 0.0, 1e6)
        self._cache = _NodeCache(tree)

    def to_spec(self):
        return {"kind": self.kind, "params": {"r": _scalar_or_list(self.r)}}

    def _evaluate_batch(self, xs, t):
        r = self.r[t]
        lv = self.tree.level(t)
        out = np.empty((xs.shape[0], lv.size))
        for k, v in enumerate(lv):
            d = self._cache.node(int(v))
            out[:, k] = logsumexp(np.log(d["weights"]) - r * xs[:, d["sub"]], axis=1) / r
        return out

    @property
    def has_exact_penalty(self):
        return True

    def penalty(self, Qbar, t):
        """Relative entropy of the conditional model plus that of the discount, over r_t."""
        tree = self.tree
        dis = decompose(Qbar)
        M, D, g = dis.M.values, dis.D.values, dis.gamma.values
        U = Qbar.tail_mass
        out = np.empty(tree.level_size(t))
        for k, v in enumerate(tree.level(t)):
            if U[v] <= 0 or D[v] <= 0 or M[v] <= 0:
                out[k] = INFINITE
                continue
            sub = tree.subtree(v)
            q_node = tree.abs_prob[sub] / tree.abs_prob[v] * M[sub] / M[v]
            gt = g[sub] / D[v]
            mut = tree.mu[sub] / tree.mu_tail[v]
            live = (q_node > 0) & (gt > 0)
            model = np.sum(q_node[live] * gt[live] * np.log(M[sub][live] / M[v]))
            timing = np.sum(q_node[live] * gt[live] * np.log(gt[live] / mut[live]))
            out[k] = max(model + timing, 0.0) / self.r[t]
        return PenaltyValue(t, out)

    def one_step_penalty(self, Qbar, t):
        return _coarse_penalty(self.tree, Qbar, t, lambda q, p: _kl(q, p) / self.r[t])

    def finite_penalty_witnesses(self, t):
        return [ProductMeasure.reference(self.tree)]


def _kl(q, p):
    live = q > 0
    return max(float(np.sum(q[live] * np.log(q[live] / p[live]))), 0.0)


def _coarse_penalty(tree, Qbar, t, divergence):
    """Penalty of the restriction of rho_t to processes constant after t + 1.

    The relevant atoms are (v, {t}) and (c, {t+1, ...}) for the children c.
    """
    if t >= tree.horizon:
        raise ValueError("one-step penalty needs t < T")
    U = Qbar.tail_mass
    atom = tree.abs_prob * tree.mu * Qbar.Z
    out = np.empty(tree.level_size(t))
    for k, v in enumerate(tree.level(t)):
        if U[v] <= 0:
            out[k] = INFINITE
            continue
        kids = tree.children[v]
        now_ref = tree.mu[v] / tree.mu_tail[v]
        q = np.concatenate([[atom[v]], U[kids] * tree.abs_prob[kids]]) / (U[v] * tree.abs_prob[v])
        p = np.concatenate([[now_ref], tree.prob[kids] * (1.0 - now_ref)])
        out[k] = divergence(q, p)
    return PenaltyValue(t, out)


# -- simplified entropic -------------------------------------------------


class SimplifiedEntropicRisk(RiskMeasure):
    """sup over adapted discounts of the entropic risk of sum gamma X + H(gamma|mu)/v.

    The supremum is computed by alternating exact maximization: for a fixed
    model the best discount follows from a backward log-sum-exp recursion,
    for a fixed discount the best model is the Gibbs tilt of P.  Several
    starting points are tried and the best value is kept.  All time-t nodes
    and all processes of a batch are handled at once.
    """

    kind = "simplified-entropic"

    def __init__(self, tree: EventTree, u, v, dirac: int | None = None, max_iter: int = 2000,
                 tol: float = 1e-14):
        super().__init__(tree)
        self.u = _profile(u, tree, "u", 0.0, 1e6)
        self.v = _profile(v, tree, "v", 0.0, 1e6)
        if dirac is not None and not 0 <= int(dirac) <= tree.horizon:
            raise BadParameters(f"dirac time must lie in 0..{tree.horizon}")
        self.dirac = None if dirac is None else int(dirac)
        self.max_iter = max_iter
        self.tol = tol
        self._cache = _NodeCache(tree)
        self._layouts = {}

    def to_spec(self):
        params = {"u": _scalar_or_list(self.u), "v": _scalar_or_list(self.v)}
        if self.dirac is not None:
            params["gamma_family"] = {"dirac": self.dirac}
        return {"kind": self.kind, "params": params}

    def _layout(self, t):
        """Index data for evaluating all time-t nodes together."""
        if t not in self._layouts:
            tree = self.tree
            anc = tree.ancestor_at(t)
            late = tree.time >= t
            paths = tree.paths[:, t:]
            group = anc[paths[:, -1]] - tree.offset(t)
            mut = np.ones(tree.n)
            mut[late] = tree.mu[late] / tree.mu_tail[anc[late]]
            sums = []
            for s in range(t, tree.horizon):
                S = np.zeros((tree.level_size(s), tree.level_size(s + 1)))
                S[tree.parent_pos[s + 1], np.arange(tree.level_size(s + 1))] = 1.0
                sums.append(S)
            self._layouts[t] = {
                "paths": paths,
                "group": group,
                "members": [np.flatnonzero(group == g) for g in range(tree.level_size(t))],
                "leaf_logp": np.log(tree.abs_prob[paths[:, -1]] / tree.abs_prob[paths[:, 0]]),
                "mut": mut,
                "log_mut": np.log(mut),
                "sums": sums,
            }
        return self._layouts[t]

    def _objective(self, a, gam, t, lay):
        """Value per (process, time-t node) and the Gibbs leaf weights of a discount."""
        u, v = self.u[t], self.v[t]
        g = gam[:, lay["paths"]]
        mut = lay["mut"][lay["paths"]]
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(g > 0, g * np.log(g / mut), 0.0).sum(axis=2)
        reward = (g * a[:, lay["paths"]]).sum(axis=2) - ent / v
        logw = lay["leaf_logp"] + u * reward
        J = np.empty((a.shape[0], len(lay["members"])))
        q = np.empty_like(logw)
        for k, idx in enumerate(lay["members"]):
            norm = logsumexp(logw[:, idx], axis=1)
            J[:, k] = norm / u
            q[:, idx] = np.exp(logw[:, idx] - norm[:, None])
        return J, q

    def _best_discount(self, a, q, t, lay):
        """Optimal adapted discount for fixed leaf weights q (one model per process)."""
        tree = self.tree
        T = tree.horizon
        v = self.v[t]
        k = a.shape[0]
        mass = np.zeros((k, tree.n))
        mass[:, lay["paths"][:, -1]] = q
        for s in range(T - 1, t - 1, -1):
            mass[:, tree.level(s)] = mass[:, tree.level(s + 1)] @ lay["sums"][s - t].T
        now = lay["log_mut"] + v * a
        W = now[:, tree.level(T)] / v
        hazard = np.ones((k, tree.n))
        for s in range(T - 1, t - 1, -1):
            lv, nx = tree.level(s), tree.level(s + 1)
            par_mass = mass[:, lv][:, tree.parent_pos[s + 1]]
            with np.errstate(divide="ignore", invalid="ignore"):
                cond = np.where(par_mass > 0, mass[:, nx] / par_mass, tree.prob[nx])
            later = v * ((cond * W) @ lay["sums"][s - t].T)
            total = np.logaddexp(now[:, lv], later)
            hazard[:, lv] = np.exp(now[:, lv] - total)
            W = total / v
        gam = np.zeros((k, tree.n))
        D = np.ones((k, tree.level_size(t)))
        for s in range(t, T + 1):
            lv = tree.level(s)
            gam[:, lv] = D * hazard[:, lv]
            if s < T:
                D = (D - gam[:, lv])[:, tree.parent_pos[s + 1]]
        return gam

    def _dirac_discount(self, k, s):
        gam = np.zeros((k, self.tree.n))
        gam[:, self.tree.time == s] = 1.0
        return gam

    def _evaluate_batch(self, xs, t):
        tree = self.tree
        lay = self._layout(t)
        a = -np.asarray(xs, dtype=float)
        k = a.shape[0]
        if self.dirac is not None:
            return self._objective(a, self._dirac_discount(k, max(self.dirac, t)), t, lay)[0]
        starts = [self._best_discount(a, np.exp(np.broadcast_to(lay["leaf_logp"], (k, lay["leaf_logp"].size))), t, lay)]
        starts += [self._dirac_discount(k, s) for s in range(t, tree.horizon + 1)]
        starts.append(np.broadcast_to(lay["mut"] * (tree.time >= t), (k, tree.n)).copy())
        best = np.full((k, tree.level_size(t)), -np.inf)
        for gam in starts:
            prev = np.full_like(best, -np.inf)
            for _ in range(self.max_iter):
                J, q = self._objective(a, gam, t, lay)
                J = np.maximum(J, prev)
                if np.all(J - prev <= self.tol * np.maximum(1.0, np.abs(J))):
                    break
                prev = J
                gam = self._best_discount(a, q, t, lay)
            else:
                raise OptimizerFailed("alternating maximization did not settle")
            best = np.maximum(best, J)
        return best

    @property
    def has_exact_penalty(self):
        return True

    def penalty(self, Qbar, t):
        """(1/u) H_t(Q|P) + (1/v) E_Q[H(gamma^t | mu^t) | F_t]; infinite where D_t = 0."""
        tree = self.tree
        dis = decompose(Qbar)
        M, D, g = dis.M.values, dis.D.values, dis.gamma.values
        out = np.empty(tree.level_size(t))
        for k, node in enumerate(tree.level(t)):
            if D[node] <= 0 or M[node] <= 0:
                out[k] = INFINITE
                continue
            d = self._cache.node(int(node))
            sub = d["sub"]
            if self.dirac is not None:
                on = tree.time[sub] == max(self.dirac, t)
                q_node = tree.abs_prob[sub] / tree.abs_prob[node] * M[sub] / M[node]
                off = (np.abs(g[sub] / D[node] - on) > 1e-9) & (q_node > 0)
                if off.any():
                    out[k] = INFINITE
                    continue
            leaves = d["leaves"]
            qleaf = d["leaf_prob"] * M[leaves] / M[node]
            model = _kl(qleaf, d["leaf_prob"])
            q_node = tree.abs_prob[sub] / tree.abs_prob[node] * M[sub] / M[node]
            gt = g[sub] / D[node]
            mut = tree.mu[sub] / tree.mu_tail[node]
            live = (q_node > 0) & (gt > 0)
            timing = np.sum(q_node[live] * gt[live] * np.log(gt[live] / mut[live]))
            out[k] = model / self.u[t] + max(timing, 0.0) / self.v[t]
        return PenaltyValue(t, out)

    def finite_penalty_witnesses(self, t):
        if self.dirac is not None:
            return [_dirac_measure(self.tree, max(self.dirac, t))]
        return [ProductMeasure.reference(self.tree)]


# -- AV@R ----------------------------------------------------------------


class AVaRRisk(RiskMeasure):
    """Average value at risk of the lifted process at level lambda_t."""

    kind = "avar"
    coherent = True

    def __init__(self, tree: EventTree, level):
        super().__init__(tree)
        self.level = _profile(level, tree, "lambda", 0.0, 1.0)
        self._cache = _NodeCache(tree)

    def to_spec(self):
        return {"kind": self.kind, "params": {"lambda": _scalar_or_list(self.level)}}

    def _evaluate_batch(self, xs, t):
        lam = self.level[t]
        lv = self.tree.level(t)
        out = np.empty((xs.shape[0], lv.size))
        for k, v in enumerate(lv):
            d = self._cache.node(int(v))
            out[:, k] = greedy_capped_max(-xs[:, d["sub"]], d["weights"] / lam)
        return out

    @property
    def has_exact_penalty(self):
        return True

    def penalty(self, Qbar, t):
        """0 if the conditional density stays below 1/lambda_t, else infinite."""
        tree = self.tree
        U = Qbar.tail_mass
        out = np.empty(tree.level_size(t))
        for k, v in enumerate(tree.level(t)):
            if U[v] <= 0:
                out[k] = INFINITE
                continue
            sub = tree.subtree(v)
            ratio = Qbar.Z[sub] * tree.mu_tail[v] / U[v]
            out[k] = 0.0 if ratio.max() <= 1.0 / self.level[t] + CAP_TOL else INFINITE
        return PenaltyValue(t, out)

    def one_step_penalty(self, Qbar, t):
        cap = 1.0 / self.level[t]
        return _coarse_penalty(
            self.tree, Qbar, t, lambda q, p: 0.0 if np.all(q <= cap * p + CAP_TOL) else INFINITE)

    def finite_penalty_witnesses(self, t):
        return [ProductMeasure.reference(self.tree)]

    def defining_vertices(self, t: int = 0, node: int | None = None) -> list:
        """Extreme points of the set of measures with zero penalty at a node, as product measures.

        Off the subtree of ``node`` the reference measure is kept.
        """
        tree = self.tree
        node = tree.level(t)[0] if node is None else node
        sub = tree.subtree(node)
        w = tree.tail_weights(node)
        out = []
        for q in capped_simplex_vertices(w / self.level[t]):
            z = np.ones(tree.n)
            z[sub] = q / w
            out.append(ProductMeasure.normalized(tree, z))
        return out


# -- decoupled AV@R ------------------------------------------------------


class DecoupledAVaRRisk(RiskMeasure):
    """sup over discounts with gamma_s <= mu^t_s / lambda1 of AV@R at lambda2 of sum gamma X.

    Computed exactly: the supremum over models is taken over the vertices of
    the capped simplex on the leaves, and for a fixed model the best discount
    comes from a concave piecewise-linear dynamic program on the subtree.
    """

    kind = "decoupled-avar"
    coherent = True

    def __init__(self, tree: EventTree, level1: float, level2: float):
        super().__init__(tree)
        self.level1 = _profile(level1, tree, "lambda1", 0.0, 1.0)
        self.level2 = _profile(level2, tree, "lambda2", 0.0, 1.0)
        self._cache = _NodeCache(tree)
        self._vertex_cache = {}

    def to_spec(self):
        return {"kind": self.kind, "params": {"lambda1": _scalar_or_list(self.level1),
                                              "lambda2": _scalar_or_list(self.level2)}}

    def _model_vertices(self, v, t):
        if v not in self._vertex_cache:
            d = self._cache.node(v)
            self._vertex_cache[v] = capped_simplex_vertices(d["leaf_prob"] / self.level2[t])
        return self._vertex_cache[v]

    def _evaluate_node(self, xs, v):
        d = self._cache.node(v)
        t = d["t"]
        verts = self._model_vertices(v, t)
        out = np.empty(xs.shape[0])
        for k in range(xs.shape[0]):
            out[k] = max(self._best_discount_value(-xs[k], v, d, q) for q in verts)
        return out

    def _best_discount_value(self, a, v, d, leaf_q):
        tree = self.tree
        sub = d["sub"]
        local = {int(w): i for i, w in enumerate(sub)}
        mass = np.zeros(sub.size)
        for leaf, q in zip(d["leaves"], leaf_q):
            mass[local[int(leaf)]] = q
        caps = tree.mu[sub] / (tree.mu_tail[v] * self.level1[d["t"]])
        funcs = [None] * sub.size
        for i in range(sub.size - 1, -1, -1):
            w = sub[i]
            kids = tree.children[w]
            if kids.size:
                mass[i] = sum(mass[local[int(c)]] for c in kids)
                acc = ConcavePiecewise.add([funcs[local[int(c)]] for c in kids])
            else:
                acc = ConcavePiecewise([], [])
            funcs[i] = acc.sup_convolve_linear(caps[i], mass[i] * a[w])
        return funcs[0](1.0)

    def finite_penalty_witnesses(self, t):
        return [ProductMeasure.reference(self.tree)]


# -- separated measures --------------------------------------------------


def _dirac_measure(tree: EventTree, s: int) -> ProductMeasure:
    gam = (tree.time == s).astype(float)
    return compose(AdaptedProcess.constant(tree, 1.0), gam)


class SeparatedRisk(RiskMeasure):
    """sup over a family of discounts of an inner risk measure of sum gamma X.

    ``family`` is ``"fixed"`` (one discount ``gamma``), ``"dirac"`` (all mass
    at time ``s``) or ``"stopping"`` (all stopping times).
    """

    def __init__(self, tree: EventTree, inner: InnerMeasure, family: str, gamma=None,
                 s: int | None = None):
        super().__init__(tree)
        self.inner = inner
        self.family = family
        self._cache = _NodeCache(tree)
        if family == "fixed":
            g = np.asarray(as_values(tree, gamma), dtype=float)
            if np.any(g < 0) or np.max(np.abs(path_sums(tree, g) - 1.0)) > 1e-9:
                raise BadParameters("fixed gamma must be nonnegative and sum to 1 along every path")
            self.gamma = g
            self.discount = np.empty(tree.n)
            self.discount[0] = 1.0
            for t in range(1, tree.horizon + 1):
                lv = tree.level(t)
                self.discount[lv] = self.discount[tree.parent[lv]] - g[tree.parent[lv]]
        elif family == "dirac":
            if s is None or not 0 <= s <= tree.horizon:
                raise BadParameters("dirac family needs a time s in 0..T")
            self.s = int(s)
        elif family != "stopping":
            raise BadParameters(f"unknown discount family {family!r}")
        self.kind = "stopping-sup" if family == "stopping" else "fixed-gamma"
        self.coherent = inner.coherent

    def to_spec(self):
        params = {"inner": self.inner.to_spec()}
        if self.family == "fixed":
            params["gamma"] = {str(nid): float(g) for nid, g in zip(self.tree.ids, self.gamma)}
        elif self.family == "dirac":
            params["dirac"] = self.s
        return {"kind": self.kind, "params": params}

    def _time_weights(self, v, d):
        """Normalized discount weights along the paths through v (shape paths x times)."""
        t = d["t"]
        paths = d["paths"]
        if self.family == "fixed":
            D = self.discount[v]
            if D > 1e-15:
                return self.gamma[paths] / D
            w = np.zeros(paths.shape)
            w[:, -1] = 1.0
            return w
        w = np.zeros(paths.shape)
        w[:, max(self.s, t) - t] = 1.0
        return w

    def _evaluate_node(self, xs, v):
        d = self._cache.node(v)
        if self.family == "stopping":
            return self._stopping_value(xs, v, d)
        weights = self._time_weights(v, d)
        Y = np.einsum("kpt,pt->kp", xs[:, d["paths"]], weights)
        return self.inner(Y, d["leaf_prob"])

    def _stopping_value(self, xs, v, d):
        tree = self.tree
        if self.inner.kind == "expectation":
            return snell_envelope(tree, -xs, v, tree.prob)
        if self.inner.kind == "entropic":
            r = self.inner.param
            return snell_envelope(tree, -r * xs, v, tree.prob, log_space=True) / r
        # AV@R: maximize over the extreme models, each with its own Snell envelope
        best = np.full(xs.shape[0], -np.inf)
        verts = capped_simplex_vertices(d["leaf_prob"] / self.inner.param)
        for q in verts:
            trans = _transitions_from_leaves(tree, v, d, q)
            best = np.maximum(best, snell_envelope(tree, -xs, v, trans))
        return best

    def finite_penalty_witnesses(self, t):
        tree = self.tree
        if self.family == "fixed":
            return [compose(AdaptedProcess.constant(tree, 1.0), self._witness_gamma(t))]
        if self.family == "dirac":
            return [_dirac_measure(tree, max(self.s, t))]
        return [_dirac_measure(tree, s) for s in range(t, tree.horizon + 1)]

    def _witness_gamma(self, t):
        tree = self.tree
        g = self.gamma.copy()
        lv = tree.level(t)
        dead = lv[self.discount[lv] <= 1e-15]
        for v in dead:
            sub = tree.subtree(v)
            g[sub] = (tree.time[sub] == tree.horizon).astype(float)
        return g


def _transitions_from_leaves(tree, v, d, leaf_q):
    """Child transition probabilities of the model with leaf masses leaf_q below v."""
    mass = np.zeros(tree.n)
    mass[d["leaves"]] = leaf_q
    for s in range(tree.horizon - 1, d["t"] - 1, -1):
        lv = tree.level(s)
        mass[lv] = tree.backward_sum(mass[tree.level(s + 1)], s)
    trans = np.array(tree.prob, dtype=float)
    nonroot = tree.parent >= 0
    par_mass = np.where(nonroot, mass[np.maximum(tree.parent, 0)], 0.0)
    sub = np.zeros(tree.n, dtype=bool)
    sub[d["sub"]] = True
    use = sub & nonroot & (par_mass > 0)
    trans[use] = mass[use] / par_mass[use]
    return trans


def snell_envelope(tree: EventTree, payoff: np.ndarray, v: int, trans, log_space: bool = False):
    """Value at node v of the optimal stopping problem sup_tau E[payoff_tau].

    ``trans`` gives child-given-parent probabilities.  With ``log_space`` the
    payoff is a log-reward and the envelope of its exponential is returned in
    logs (for the entropic inner measure).
    """
    t = int(tree.time[v])
    trans = np.asarray(trans, dtype=float)
    val = payoff[:, tree.level(tree.horizon)]
    for s in range(tree.horizon - 1, t - 1, -1):
        lv, nx = tree.level(s), tree.level(s + 1)
        A = np.zeros((lv.size, nx.size))
        A[tree.parent_pos[s + 1], np.arange(nx.size)] = trans[nx]
        if log_space:
            with np.errstate(divide="ignore"):
                cont = logsumexp(val[:, None, :] + np.log(A)[None, :, :], axis=2)
        else:
            cont = val @ A.T
        val = np.maximum(payoff[:, lv], cont)
    return val[:, v - tree.offset(t)]


def enumerate_stopping_times(tree: EventTree, v: int) -> list:
    """All stopping times on the subtree of v, as arrays of stopping nodes per path."""
    def rec(w):
        if tree.time[w] == tree.horizon:
            return [[w]]
        options = [[w]]
        child_options = [rec(int(c)) for c in tree.children[w]]
        combos = [[]]
        for opts in child_options:
            combos = [c + o for c in combos for o in opts]
        return options + combos
    return rec(v)


# -- linear and table-driven measures -------------------------------------


class LinearRisk(RiskMeasure):
    """Expected loss under one fixed product measure.

    Where that measure gives no mass to the time-t atom the reference
    measure is used instead, so the map stays defined everywhere.
    """

    kind = "linear"
    coherent = True

    def __init__(self, tree: EventTree, Qbar: ProductMeasure):
        super().__init__(tree)
        self.Qbar = Qbar
        self._ref = ProductMeasure.reference(tree)

    def to_spec(self):
        return {"kind": self.kind, "params": self.Qbar.to_mapping()}

    def _evaluate_batch(self, xs, t):
        val, ok = conditional_tail_batch(self.Qbar, xs, t)
        if not ok.all():
            ref, _ = conditional_tail_batch(self._ref, xs, t)
            val[:, ~ok] = ref[:, ~ok]
        return -val

    @property
    def has_exact_penalty(self):
        return True

    def penalty(self, Qbar, t):
        tree = self.tree
        own = self.Qbar if self.Qbar.tail_mass[tree.level(t)].min() > 0 else None
        out = np.empty(tree.level_size(t))
        U, U0 = Qbar.tail_mass, self.Qbar.tail_mass
        for k, v in enumerate(tree.level(t)):
            if U[v] <= 0:
                out[k] = INFINITE
                continue
            sub = tree.subtree(v)
            mine = Qbar.Z[sub] / U[v]
            if U0[v] > 0:
                target = self.Qbar.Z[sub] / U0[v]
            else:
                target = np.ones(sub.size) / tree.mu_tail[v]
            out[k] = 0.0 if np.max(np.abs(mine - target)) <= 1e-9 * max(1.0, target.max()) else INFINITE
        del own
        return PenaltyValue(t, out)

    def finite_penalty_witnesses(self, t):
        return [self.Qbar]


class PenaltyTableRisk(RiskMeasure):
    """Supremum over finitely many measures of expected loss minus a tabulated penalty.

    ``penalties[m][t]`` is an array over the time-t nodes, ``INFINITE`` where
    the measure is excluded.  At every node the smallest finite penalty must
    be zero so that the measure is normalized.
    """

    kind = "penalty-table"

    def __init__(self, tree: EventTree, measures: dict, penalties: dict):
        super().__init__(tree)
        self.measures = dict(measures)
        self.table = {}
        for t in range(tree.horizon + 1):
            lv = tree.level(t)
            lowest = np.full(lv.size, np.inf)
            for mid, Q in self.measures.items():
                row = np.asarray(penalties.get(mid, {}).get(t, np.full(lv.size, np.inf)), dtype=float)
                if row.shape != (lv.size,):
                    raise BadParameters(f"penalty row for measure {mid!r} at time {t} has wrong length")
                if np.any(row < 0):
                    raise BadParameters("penalty entries must be nonnegative")
                row = np.where(Q.tail_mass[lv] > 0, row, np.inf)
                self.table[(mid, t)] = row
                lowest = np.minimum(lowest, row)
            if np.any(np.isinf(lowest)):
                raise BadParameters(f"time {t}: some node has no measure with finite penalty")
            if np.any(np.abs(lowest) > 1e-12):
                raise BadParameters(f"time {t}: smallest penalty must be 0 at every node")

    def to_spec(self):
        tree = self.tree
        measures = {str(mid): Q.to_mapping() for mid, Q in self.measures.items()}
        pens = {}
        for (mid, t), row in self.table.items():
            entries = {str(tree.ids[v]): (float(x) if np.isfinite(x) else "inf")
                       for v, x in zip(tree.level(t), row)}
            pens.setdefault(str(mid), {})[str(t)] = entries
        return {"kind": self.kind, "params": {"measures": measures, "penalties": pens}}

    def _evaluate_batch(self, xs, t):
        best = np.full((xs.shape[0], self.tree.level_size(t)), -np.inf)
        for mid, Q in self.measures.items():
            row = self.table[(mid, t)]
            if np.all(np.isinf(row)):
                continue
            val, _ = conditional_tail_batch(Q, xs, t)
            cand = np.where(np.isfinite(row), -val - np.where(np.isfinite(row), row, 0.0), -np.inf)
            best = np.maximum(best, cand)
        return best

    def finite_penalty_witnesses(self, t):
        return [Q for mid, Q in self.measures.items() if np.any(np.isfinite(self.table[(mid, t)]))]


# -- recursive construction ----------------------------------------------


class RecursiveRisk(RiskMeasure):
    """Backward recursion rho~_t(X) = rho_t(X_t 1_{t} - rho~_{t+1}(X) 1_{T_{t+1}})."""

    kind = "recursive-wrapper"

    def __init__(self, inner: RiskMeasure):
        super().__init__(inner.tree)
        self.inner = inner
        self.coherent = inner.coherent

    def to_spec(self):
        return {"kind": self.kind, "params": {"inner": self.inner.to_spec()}}

    def _evaluate_batch(self, xs, t):
        tree = self.tree
        T = tree.horizon
        later = -xs[:, tree.level(T)]
        for s in range(T - 1, t - 1, -1):
            ys = np.array(xs, dtype=float)
            fill = _spread_batch(tree, -later, s + 1)
            mask = tree.time >= s + 1
            ys[:, mask] = fill[:, mask]
            later = self.inner.evaluate_batch(ys, s)
        return later


def _spread_batch(tree: EventTree, level_vals: np.ndarray, t: int) -> np.ndarray:
    anc = tree.ancestor_at(t)
    out = np.zeros((level_vals.shape[0], tree.n))
    mask = anc >= 0
    out[:, mask] = level_vals[:, anc[mask] - tree.offset(t)]
    return out


def make_time_consistent(rm: RiskMeasure) -> RecursiveRisk:
    """Time-consistent measure built from the one-step behaviour of ``rm``."""
    return RecursiveRisk(rm)


# -- convenience wrappers ------------------------------------------------


def entropic_eval(tree, r, X, t):
    return EntropicRisk(tree, r).evaluate(X, t)


def entropic_penalty(tree, r, Qbar, t):
    return EntropicRisk(tree, r).penalty(Qbar, t)


def simplified_entropic_eval(tree, u, v, X, t, dirac=None):
    return SimplifiedEntropicRisk(tree, u, v, dirac=dirac).evaluate(X, t)


def simplified_entropic_penalty(tree, u, v, Qbar, t, dirac=None):
    return SimplifiedEntropicRisk(tree, u, v, dirac=dirac).penalty(Qbar, t)


def avar_eval(tree, level, X, t):
    return AVaRRisk(tree, level).evaluate(X, t)


def decoupled_avar_eval(tree, level1, level2, X, t):
    return DecoupledAVaRRisk(tree, level1, level2).evaluate(X, t)


def separated_eval(tree, inner, family, X, t, gamma=None, s=None):
    if not isinstance(inner, InnerMeasure):
        inner = InnerMeasure.from_spec(inner)
    return SeparatedRisk(tree, inner, family, gamma=gamma, s=s).evaluate(X, t)


# -- specs ---------------------------------------------------------------


def _parse_table(tree, params):
    from .io import measure_from_mapping

    measures = {}
    for mid, body in params.get("measures", {}).items():
        measures[str(mid)] = measure_from_mapping(tree, body)
    penalties = {}
    for mid, by_time in params.get("penalties", {}).items():
        rows = {}
        for t, entries in by_time.items():
            t = int(t)
            row = np.full(tree.level_size(t), np.inf)
            for k, v in enumerate(tree.level(t)):
                nid = tree.ids[v]
                val = entries.get(str(nid), entries.get(nid)) if isinstance(entries, dict) else None
                if val is None or val == "inf":
                    continue
                row[k] = float(val)
            rows[t] = row
        penalties[str(mid)] = rows
    return PenaltyTableRisk(tree, measures, penalties)


def risk_from_spec(tree: EventTree, spec: dict) -> RiskMeasure:
    """Build a risk measure from ``{"kind": ..., "params": {...}}``."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise BadParameters("risk spec needs a 'kind' field")
    kind = spec["kind"]
    p = spec.get("params", {}) or {}
    try:
        if kind == "entropic":
            return EntropicRisk(tree, p["r"])
        if kind == "simplified-entropic":
            fam = p.get("gamma_family", "full")
            dirac = fam.get("dirac") if isinstance(fam, dict) else None
            return SimplifiedEntropicRisk(tree, p["u"], p["v"], dirac=dirac)
        if kind == "avar":
            return AVaRRisk(tree, p["lambda"])
        if kind == "decoupled-avar":
            return DecoupledAVaRRisk(tree, p["lambda1"], p["lambda2"])
        if kind in ("fixed-gamma", "stopping-sup"):
            inner = InnerMeasure.from_spec(p.get("inner", "expectation"))
            if kind == "stopping-sup":
                return SeparatedRisk(tree, inner, "stopping")
            if "dirac" in p:
                return SeparatedRisk(tree, inner, "dirac", s=int(p["dirac"]))
            gamma = AdaptedProcess.from_mapping(tree, p["gamma"], "params.gamma")
            return SeparatedRisk(tree, inner, "fixed", gamma=gamma)
        if kind == "penalty-table":
            return _parse_table(tree, p)
        if kind == "recursive-wrapper":
            return RecursiveRisk(risk_from_spec(tree, p["inner"]))
        if kind == "linear":
            from .io import measure_from_mapping

            return LinearRisk(tree, measure_from_mapping(tree, p))
    except KeyError as exc:
        raise BadParameters(f"params.{exc.args[0]} missing for kind {kind!r}") from None
    raise UnsupportedKind(f"unknown risk measure kind {kind!r}")
