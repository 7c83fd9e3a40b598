"""Slow, direct reference computations used to check the library.

Everything here works on explicit lists of (path, time) atoms and never
calls the library's recursive machinery.
"""

import itertools

import numpy as np
from scipy.optimize import linprog


def atoms(tree, v=0):
    """(node, mass) for every optional atom below v, mass under P x mu given v."""
    out = []
    for w in tree.subtree(v):
        out.append((int(w), tree.abs_prob[w] / tree.abs_prob[v] * tree.mu[w]))
    return out


def path_mass(tree, leaf):
    p = 1.0
    w = leaf
    while tree.parent[w] >= 0:
        p *= tree.prob[w]
        w = tree.parent[w]
    return p


def optional_expectation(tree, Z, X, t):
    """E_Qbar[X | F-bar_t] tail values by enumerating atoms."""
    out = []
    for v in tree.level(t):
        num = den = 0.0
        for w, m in atoms(tree, v):
            num += m * Z[w] * X[w]
            den += m * Z[w]
        out.append(num / den if den > 0 else np.nan)
    return np.array(out)


def entropic_value(tree, r, X, t):
    out = []
    for v in tree.level(t):
        tail = sum(m for _, m in atoms(tree, v))
        out.append(np.log(sum(m / tail * np.exp(-r * X[w]) for w, m in atoms(tree, v))) / r)
    return np.array(out)


def avar_lp(tree, lam, X, t):
    """AV@R by a linear program over atom probabilities capped at mass / lambda."""
    out = []
    for v in tree.level(t):
        at = atoms(tree, v)
        p = np.array([m for _, m in at])
        p = p / p.sum()
        c = np.array([X[w] for w, _ in at])
        res = linprog(c, A_eq=np.ones((1, p.size)), b_eq=[1.0], bounds=[(0, pi / lam) for pi in p],
                      method="highs")
        out.append(-res.fun)
    return np.array(out)


def avar_vertices(tree, lam, X, t):
    """AV@R by checking every vertex of the capped simplex."""
    out = []
    for v in tree.level(t):
        at = atoms(tree, v)
        p = np.array([m for _, m in at])
        p = p / p.sum()
        caps = p / lam
        a = np.array([-X[w] for w, _ in at])
        best = -np.inf
        for bits in itertools.product([0, 1], repeat=p.size):
            base = np.array(bits) * caps
            rest = 1 - base.sum()
            if abs(rest) < 1e-12:
                best = max(best, base @ a)
            for j in range(p.size):
                if not bits[j] and 0 < rest < caps[j]:
                    q = base.copy()
                    q[j] = rest
                    best = max(best, q @ a)
        out.append(best)
    return np.array(out)


def kl_penalty(tree, Z, r, t):
    """Relative entropy of the conditional tail law of Qbar w.r.t. that of Pbar, over r."""
    out = []
    for v in tree.level(t):
        at = atoms(tree, v)
        p = np.array([m for _, m in at])
        q = np.array([m * Z[w] for w, m in at])
        if q.sum() <= 0:
            out.append(np.inf)
            continue
        p, q = p / p.sum(), q / q.sum()
        live = q > 0
        out.append(np.sum(q[live] * np.log(q[live] / p[live])) / r)
    return np.array(out)


def stopping_times(tree, v):
    """Every stopping time below v, as a set of stopping nodes."""
    def rec(w):
        if tree.time[w] == tree.horizon:
            return [[w]]
        combos = [[]]
        for c in tree.children[w]:
            combos = [a + b for a in combos for b in rec(int(c))]
        return [[w]] + combos
    return [set(s) for s in rec(v)]


def stopped_values(tree, v, tau, X):
    """X at the stopping node along each path through v, with conditional path weights."""
    vals, probs = [], []
    for path in tree.paths:
        if path[tree.time[v]] != v:
            continue
        node = next(int(w) for w in path[tree.time[v]:] if int(w) in tau)
        vals.append(X[node])
        probs.append(tree.abs_prob[path[-1]] / tree.abs_prob[v])
    return np.array(vals), np.array(probs)


def paste_by_factors(tree, M1, g1, M2, g2, t, B):
    """Pasted (M, gamma) following the factor-level recipe.

    On the chosen time-t nodes the model continues with the ratio M2 / M2_t
    and the discount with D1_t / D2_t times gamma2; elsewhere nothing changes.
    """
    D1 = _discount(tree, g1)
    D2 = _discount(tree, g2)
    M = M1.copy()
    g = g1.copy()
    for v in B:
        for w in tree.subtree(v):
            M[w] = M1[v] * M2[w] / M2[v]
            g[w] = D1[v] * g2[w] / D2[v]
    return M, g


def _discount(tree, g):
    D = np.empty(tree.n)
    D[0] = 1.0
    for w in range(tree.n):
        for c in tree.children[w]:
            D[c] = D[w] - g[w]
    return D
