"""Measures on the optional sigma-field of a finite event tree.

A product measure is stored through its density Z with respect to the
reference measure P x mu, one value per node.  ``decompose`` splits it into a
model density process M and a predictable discount D (equivalently the
optional random measure gamma with gamma_t = D_t - D_{t+1}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadGamma,
    BadStart,
    BadDensity,
    Negative,
    NotAbsContinuous,
    NotMartingale,
    NotSupermartingale,
    ZeroDiscount,
)
from .tree import AdaptedProcess, EventTree, as_values, delta, spread

MASS_TOL = 1e-11
DEFAULT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ProductMeasure:
    """A probability on the optional atoms given by its density Z w.r.t. P x mu."""

    tree: EventTree
    Z: np.ndarray

    def __post_init__(self):
        z = np.array(as_values(self.tree, self.Z), dtype=float)
        if not np.all(np.isfinite(z)):
            raise BadDensity("density must be finite")
        if np.any(z < 0):
            i = int(np.argmin(z))
            raise BadDensity(f"density is negative at node {self.tree.ids[i]!r}")
        mass = float(np.dot(self.tree.abs_prob * self.tree.mu, z))
        if abs(mass - 1.0) > MASS_TOL:
            raise BadDensity(f"density integrates to {mass!r} instead of 1")
        z.setflags(write=False)
        object.__setattr__(self, "Z", z)

    @classmethod
    def reference(cls, tree: EventTree) -> "ProductMeasure":
        """The reference measure itself (Z = 1)."""
        return cls(tree, np.ones(tree.n))

    @classmethod
    def normalized(cls, tree: EventTree, weights) -> "ProductMeasure":
        """Rescale nonnegative node weights into a density."""
        w = np.asarray(as_values(tree, weights), dtype=float)
        mass = float(np.dot(tree.abs_prob * tree.mu, w))
        if not mass > 0:
            raise BadDensity("weights carry no mass")
        return cls(tree, w / mass)

    @property
    def atom_mass(self) -> np.ndarray:
        """Mass the measure puts on each (node, time) atom."""
        return self.tree.abs_prob * self.tree.mu * self.Z

    @property
    def tail_mass(self) -> np.ndarray:
        """U_t = E_P[sum_{s>=t} mu_s Z_s | F_t] at every node."""
        return _accumulate(self.tree, self.tree.mu * self.Z)

    def expectation(self, X) -> float:
        return float(np.dot(self.atom_mass, as_values(self.tree, X)))

    def to_mapping(self) -> dict:
        return {"Z": {str(nid): float(z) for nid, z in zip(self.tree.ids, self.Z)}}


def _accumulate(tree: EventTree, node_vals) -> np.ndarray:
    """Backward sums A(v) = a(v) + sum_c p(c) A(c)."""
    out = np.array(node_vals, dtype=float)
    for t in range(tree.horizon - 1, -1, -1):
        lv = tree.level(t)
        out[lv] += tree.backward(out[tree.level(t + 1)], t)
    return out


def _first_child_values(tree: EventTree, vals, t):
    """Value of a predictable quantity on the children of each time-t node."""
    kids = np.array([tree.children[v][0] for v in tree.level(t)], dtype=int)
    return vals[kids]


@dataclass(frozen=True, eq=False)
class Disintegration:
    """Model density process M, discount D and optional random measure gamma."""

    M: AdaptedProcess
    D: AdaptedProcess
    gamma: AdaptedProcess

    @property
    def tree(self) -> EventTree:
        return self.M.tree

    def next_discount(self) -> np.ndarray:
        """D_{t+1} seen from every node (zero at the leaves)."""
        return self.D.values - self.gamma.values

    def expectation_gamma(self, X) -> float:
        """E_Q[sum_t gamma_t X_t]."""
        tree = self.tree
        return float(np.dot(tree.abs_prob * self.M.values, self.gamma.values * as_values(tree, X)))

    def expectation_discount(self, X) -> float:
        """E_Q[sum_t D_t (X_t - X_{t-1})]."""
        tree = self.tree
        dX = delta(AdaptedProcess(tree, as_values(tree, X))).values
        return float(np.dot(tree.abs_prob * self.M.values, self.D.values * dX))

    def to_mapping(self) -> dict:
        return {
            "M": self.M.to_mapping(),
            "D": self.D.to_mapping(),
            "gamma": self.gamma.to_mapping(),
        }


def _check_supermartingale(tree: EventTree, U: np.ndarray, tol: float):
    if np.any(U < -tol):
        i = int(np.argmin(U))
        raise Negative(f"process is negative at node {tree.ids[i]!r}")
    if abs(U[0] - 1.0) > tol:
        raise BadStart(f"process must start at 1, got {U[0]!r}")
    for t in range(tree.horizon):
        lv = tree.level(t)
        nxt = tree.backward(U[tree.level(t + 1)], t)
        gap = nxt - U[lv]
        if np.any(gap > tol):
            k = int(np.argmax(gap))
            raise NotSupermartingale(
                f"E[U_{t + 1} | F_{t}] exceeds U_{t} by {gap[k]:.3g} at node {tree.ids[lv[k]]!r}"
            )


def ito_watanabe(U, method: str = "discount-first", tol: float = 1e-12):
    """Factor a nonnegative supermartingale U (U_0 = 1) as U = M D.

    ``method`` selects the construction order: ``"discount-first"`` builds D by
    the product of one-step ratios E[U_{s+1} | F_s] / U_s and sets M = U / D;
    ``"martingale-first"`` builds M from multiplicative martingale increments
    and recovers D = U / M.  Both agree wherever U > 0.

    Returns
    -------
    (M, D) : tuple of AdaptedProcess
    """
    tree = U.tree if isinstance(U, AdaptedProcess) else None
    if tree is None:
        raise TypeError("U must be an AdaptedProcess")
    u = np.maximum(U.values, 0.0)
    _check_supermartingale(tree, U.values, tol)
    u[0] = 1.0
    M = np.empty(tree.n)
    D = np.empty(tree.n)
    M[0] = D[0] = 1.0
    if method == "discount-first":
        for t in range(tree.horizon):
            lv, nx = tree.level(t), tree.level(t + 1)
            expected = tree.backward(u[nx], t)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(u[lv] > 0, np.minimum(expected / np.where(u[lv] > 0, u[lv], 1.0), 1.0), 0.0)
            D[nx] = (D[lv] * ratio)[tree.parent_pos[t + 1]]
            pos = D[nx] > 0
            M[nx] = np.where(pos, u[nx] / np.where(pos, D[nx], 1.0), M[tree.parent[nx]])
    elif method == "martingale-first":
        for t in range(tree.horizon):
            lv, nx = tree.level(t), tree.level(t + 1)
            expected = tree.backward(u[nx], t)
            live = (u[lv] > 0) & (expected > 0)
            scale = np.where(live, M[lv] / np.where(live, expected, 1.0), 0.0)
            par = tree.parent_pos[t + 1]
            M[nx] = np.where(live[par], u[nx] * scale[par], M[tree.parent[nx]])
            with np.errstate(divide="ignore", invalid="ignore"):
                d_parent = np.where(live, expected / np.where(live, u[lv], 1.0) * D[lv], 0.0)
            pos = M[nx] > 0
            D[nx] = np.where(pos, u[nx] / np.where(pos, M[nx], 1.0), d_parent[par])
    else:
        raise ValueError(f"unknown construction order {method!r}")
    return AdaptedProcess(tree, M), AdaptedProcess(tree, D)


def decompose(Qbar: ProductMeasure) -> Disintegration:
    """Disintegrate a product measure into (M, D, gamma)."""
    tree = Qbar.tree
    U = Qbar.tail_mass
    U[0] = 1.0
    M, D = ito_watanabe(AdaptedProcess(tree, np.maximum(U, 0.0)), tol=1e-10)
    d = D.values
    gamma = d.copy()
    for t in range(tree.horizon):
        lv = tree.level(t)
        gamma[lv] = d[lv] - _first_child_values(tree, d, t)
    gamma = np.maximum(gamma, 0.0)
    return Disintegration(M, D, AdaptedProcess(tree, gamma))


def _check_martingale(tree: EventTree, M: np.ndarray, tol: float):
    if np.any(M < -tol):
        raise NotMartingale("density process must be nonnegative")
    if abs(M[0] - 1.0) > tol:
        raise NotMartingale(f"density process must start at 1, got {M[0]!r}")
    for t in range(tree.horizon):
        lv = tree.level(t)
        gap = np.abs(tree.backward(M[tree.level(t + 1)], t) - M[lv])
        if np.any(gap > tol):
            k = int(np.argmax(gap))
            raise NotMartingale(f"martingale property fails by {gap[k]:.3g} at node {tree.ids[lv[k]]!r}")


def path_sums(tree: EventTree, vals) -> np.ndarray:
    """Sum of node values along each root-to-leaf path."""
    return np.asarray(vals)[tree.paths].sum(axis=1)


def compose(M, gamma, tol: float = DEFAULT_TOL) -> ProductMeasure:
    """Product measure with density Z = M gamma / mu."""
    tree = M.tree
    m = M.values
    g = as_values(tree, gamma)
    _check_martingale(tree, m, tol)
    if np.any(g < -tol):
        raise BadGamma("gamma must be nonnegative")
    sums = path_sums(tree, g)
    live = m[tree.leaves] > 0
    gap = np.abs(sums - 1.0)[live]
    if gap.size and gap.max() > tol:
        raise BadGamma(f"gamma sums to {sums[live][np.argmax(gap)]!r} along a path charged by Q")
    return ProductMeasure(tree, np.maximum(m, 0.0) * np.maximum(g, 0.0) / tree.mu)


def discount_from_gamma(tree: EventTree, gamma) -> np.ndarray:
    """D_t = 1 - sum_{s<t} gamma_s, one value per node."""
    g = as_values(tree, gamma)
    D = np.empty(tree.n)
    D[0] = 1.0
    for t in range(1, tree.horizon + 1):
        lv = tree.level(t)
        par = tree.parent[lv]
        D[lv] = D[par] - g[par]
    return D


def integration_by_parts(X, dis: Disintegration, t: int):
    """Both sides of sum_{s>=t} gamma_s X_s = sum_{s=t}^T D_s (X_s - X_{s-1}).

    X is read from time t on (X_{t-1} := 0).  Returns two arrays with one
    entry per root-to-leaf path.
    """
    tree = dis.tree
    x = as_values(tree, X)[tree.paths][:, t:]
    g = dis.gamma.values[tree.paths][:, t:]
    d = dis.D.values[tree.paths][:, t:]
    lhs = (g * x).sum(axis=1)
    dx = np.diff(x, axis=1, prepend=0.0)
    rhs = (d * dx).sum(axis=1)
    return lhs, rhs


@dataclass(frozen=True, eq=False)
class OptionalConditional:
    """An F-bar_t measurable value: X itself before t, one number per time-t node after.

    ``tail`` holds NaN where the conditioning atom carries no mass, and
    ``defined`` flags the nodes where it is meaningful.
    """

    tree: EventTree
    t: int
    past: np.ndarray
    tail: np.ndarray
    defined: np.ndarray

    def as_process_values(self) -> np.ndarray:
        out = spread(self.tree, self.tail, self.t)
        early = self.tree.time < self.t
        out[early] = self.past[early]
        return out


def conditional_tail(Qbar: ProductMeasure, X, t: int):
    """Q-bar conditional mean of X on each atom (v, {t, t+1, ...}); NaN where massless."""
    tree = Qbar.tree
    x = as_values(tree, X)
    num = _accumulate(tree, tree.mu * Qbar.Z * x)
    den = Qbar.tail_mass
    lv = tree.level(t)
    ok = den[lv] > 0
    tail = np.full(lv.size, np.nan)
    tail[ok] = num[lv][ok] / den[lv][ok]
    return tail, ok


def conditional_tail_batch(Qbar: ProductMeasure, xs: np.ndarray, t: int):
    """Batched :func:`conditional_tail` for an array of shape (k, n)."""
    tree = Qbar.tree
    weighted = np.array(xs, dtype=float) * (tree.mu * Qbar.Z)
    for s in range(tree.horizon - 1, t - 1, -1):
        weighted[:, tree.level(s)] += tree.backward_batch(weighted[:, tree.level(s + 1)], s)
    den = Qbar.tail_mass[tree.level(t)]
    ok = den > 0
    out = np.full((weighted.shape[0], ok.size), np.nan)
    out[:, ok] = weighted[:, tree.level(t)][:, ok] / den[ok]
    return out, ok


def optional_cond_expect(Qbar: ProductMeasure, X, t: int) -> OptionalConditional:
    """Conditional expectation of X given the optional information at time t."""
    tree = Qbar.tree
    x = as_values(tree, X)
    tail, ok = conditional_tail(Qbar, x, t)
    if not ok.any():
        raise ZeroDiscount(f"the measure gives no mass to times >= {t}")
    past = np.where(tree.time < t, x, np.nan)
    return OptionalConditional(tree, t, past, tail, ok)


def conditional_density(Qbar: ProductMeasure, t: int) -> np.ndarray:
    """E_Pbar[Z | F-bar_t]: Z before t, U_t / (tail of mu) on the time-t atoms."""
    tree = Qbar.tree
    out = np.array(Qbar.Z, dtype=float)
    lv = tree.level(t)
    tail = Qbar.tail_mass[lv] / tree.mu_tail[lv]
    later = tree.time >= t
    out[later] = spread(tree, tail, t)[later]
    return out


@dataclass(frozen=True)
class RestrictionReport:
    equal: bool
    max_gap: float
    model_agrees: bool
    gamma_agrees: bool

    def __bool__(self):
        return self.equal


def restrict_equal(Q1: ProductMeasure, Q2: ProductMeasure, t: int, tol: float = 1e-12) -> RestrictionReport:
    """Do the two measures coincide on the optional information at time t?

    The verdict compares conditional densities; the report also carries the
    equivalent model/discount criterion for diagnostics.
    """
    tree = Q1.tree
    c1 = conditional_density(Q1, t)
    c2 = conditional_density(Q2, t)
    gap = float(np.max(np.abs(c1 - c2)))
    d1, d2 = decompose(Q1), decompose(Q2)
    lv = tree.level(t)
    on = d1.D.values[lv] > 0
    model_ok = bool(np.all(np.abs(d1.M.values[lv] - d2.M.values[lv])[on] <= 1e-9))
    early = (tree.time < t) & (d1.M.values > 0)
    gamma_ok = bool(np.all(np.abs(d1.gamma.values - d2.gamma.values)[early] <= 1e-9))
    return RestrictionReport(gap <= tol, gap, model_ok, gamma_ok)


def optional_atom_mask(tree: EventTree, B, t: int) -> np.ndarray:
    """Normalize a set of F-bar_t atoms into a boolean mask over nodes with time <= t.

    ``B`` may be a boolean array over all nodes (entries after t are ignored),
    or an iterable of node indices.  A node at time s < t stands for the atom
    (node, {s}); a node at time t stands for (node, {t, t+1, ...}).
    """
    if B is None:
        return np.zeros(tree.n, dtype=bool)
    arr = np.asarray(B)
    if arr.dtype == bool and arr.shape == (tree.n,):
        mask = arr.copy()
    else:
        mask = np.zeros(tree.n, dtype=bool)
        idx = np.asarray(list(B), dtype=int)
        mask[idx] = True
    mask &= tree.time <= t
    return mask


def paste(Q1: ProductMeasure, Q2: ProductMeasure, t: int, B) -> ProductMeasure:
    """Pasting of Q1 and Q2 in t via the F-bar_t set B.

    On B the conditional law given F-bar_t is taken from Q2, elsewhere Q1 is
    kept.  Requires Q1 << Q2 on F-bar_t.
    """
    tree = Q1.tree
    mask = optional_atom_mask(tree, B, t)
    lv = tree.level(t)
    U1, U2 = Q1.tail_mass[lv], Q2.tail_mass[lv]
    early = tree.time < t
    if np.any(early & (Q1.Z > 0) & (Q2.Z == 0)) or np.any((U1 > 0) & (U2 <= 0)):
        raise NotAbsContinuous(f"first measure is not absolutely continuous w.r.t. the second on F_{t}")
    z = np.array(Q1.Z, dtype=float)
    for k, v in enumerate(lv):
        if not mask[v]:
            continue
        sub = tree.subtree(v)
        if U2[k] > 0:
            z[sub] = Q2.Z[sub] * (U1[k] / U2[k])
        else:
            z[sub] = 0.0
    return ProductMeasure(tree, z)


def random_product_measure(tree: EventTree, rng: np.random.Generator,
                           sparsity: float = 0.0, concentration: float = 1.0) -> ProductMeasure:
    """Random measure built from a random model and a random discount.

    With ``sparsity > 0`` some transitions and some discount increments are
    switched off, so the density has zeros.
    """
    M = np.empty(tree.n)
    M[0] = 1.0
    for v in range(tree.n):
        kids = tree.children[v]
        if kids.size == 0:
            continue
        q = rng.dirichlet(np.full(kids.size, concentration))
        if sparsity > 0:
            off = rng.random(kids.size) < sparsity
            if off.all():
                off[rng.integers(kids.size)] = False
            q = np.where(off, 0.0, q)
            q /= q.sum()
        M[kids] = M[v] * q / tree.prob[kids]
    D = np.empty(tree.n)
    gamma = np.empty(tree.n)
    D[0] = 1.0
    for v in range(tree.n):
        if tree.time[v] == tree.horizon:
            gamma[v] = D[v]
            continue
        frac = rng.uniform(0.05, 0.95)
        if sparsity > 0 and rng.random() < sparsity:
            frac = 0.0
        gamma[v] = D[v] * frac
        D[tree.children[v]] = D[v] - gamma[v]
    return ProductMeasure.normalized(tree, M * gamma / tree.mu)
