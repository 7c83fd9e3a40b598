"""Finite event trees, adapted processes and conditional expectations.

Nodes are stored in time order so that the nodes of one period form a
contiguous block of indices.  Everything that is "a value per node at time
t" is a numpy array aligned with ``tree.level(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadDensity,
    BadMu,
    BadProbabilities,
    MalformedTree,
    MeasurabilityViolation,
    TimeOrder,
)

VALIDATION_TOL = 1e-12


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


class EventTree:
    """A finite filtered probability space given as an explicit node list.

    Parameters
    ----------
    horizon : int
        Number of periods T; nodes live at times 0..T.
    nodes : sequence of (id, time, parent id or None, branch probability)
        One entry per node.  The root has parent ``None``.
    mu : mapping of node id to positive float, optional
        Reference time weights.  Along every root-to-leaf path they must sum
        to one.  Defaults to ``1 / (T + 1)`` at every node.
    """

    def __init__(self, horizon: int, nodes: Sequence, mu: Mapping | None = None):
        if int(horizon) != horizon or horizon < 0:
            raise MalformedTree(f"horizon must be a nonnegative integer, got {horizon!r}")
        horizon = int(horizon)
        rows = []
        seen = set()
        for pos, entry in enumerate(nodes):
            nid, time, parent, prob = entry
            if nid in seen:
                raise MalformedTree(f"duplicate node id {nid!r}")
            seen.add(nid)
            if int(time) != time or not 0 <= time <= horizon:
                raise MalformedTree(f"node {nid!r}: time {time!r} outside 0..{horizon}")
            rows.append((int(time), pos, nid, parent, 1.0 if prob is None else float(prob)))
        if not rows:
            raise MalformedTree("tree has no nodes")
        rows.sort(key=lambda r: (r[0], r[1]))

        ids = [r[2] for r in rows]
        index = {nid: i for i, nid in enumerate(ids)}
        n = len(rows)
        time = np.array([r[0] for r in rows], dtype=int)
        parent = np.full(n, -1, dtype=int)
        prob = np.array([r[4] for r in rows], dtype=float)

        roots = [i for i, r in enumerate(rows) if r[3] is None]
        if len(roots) != 1 or time[roots[0]] != 0:
            raise MalformedTree("exactly one root at time 0 is required")
        for i, (t, _, nid, par, _) in enumerate(rows):
            if par is None:
                continue
            if par not in index:
                raise MalformedTree(f"node {nid!r}: dangling parent {par!r}")
            j = index[par]
            if time[j] != t - 1:
                raise MalformedTree(f"node {nid!r} at time {t} has parent {par!r} at time {time[j]}")
            parent[i] = j
        if np.count_nonzero(time == 0) != 1:
            raise MalformedTree("time 0 must contain only the root")

        prob[roots[0]] = 1.0
        bad = np.nonzero(~((prob > 0.0) & (prob <= 1.0 + VALIDATION_TOL)))[0]
        if bad.size:
            raise BadProbabilities(f"node {ids[bad[0]]!r}: branch probability {prob[bad[0]]!r} not in (0, 1]")

        children = [[] for _ in range(n)]
        for i in range(n):
            if parent[i] >= 0:
                children[parent[i]].append(i)
        for i in range(n):
            if time[i] < horizon:
                if not children[i]:
                    raise MalformedTree(f"node {ids[i]!r} at time {time[i]} has no children before the horizon")
                total = prob[children[i]].sum()
                if abs(total - 1.0) > VALIDATION_TOL:
                    raise BadProbabilities(
                        f"children of node {ids[i]!r} have probabilities summing to {total!r}"
                    )
        if time.max() != horizon:
            raise MalformedTree(f"no node reaches the horizon {horizon}")

        self.horizon = horizon
        self.n = n
        self.ids = tuple(ids)
        self.index = index
        self.time = _frozen(time)
        self.parent = _frozen(parent)
        self.prob = _frozen(prob)
        self.children = tuple(_frozen(np.array(c, dtype=int)) for c in children)
        self._offsets = np.searchsorted(time, np.arange(horizon + 2))

        abs_prob = np.empty(n)
        for i in range(n):
            abs_prob[i] = 1.0 if parent[i] < 0 else abs_prob[parent[i]] * prob[i]
        self.abs_prob = _frozen(abs_prob)

        if mu is None:
            mu_arr = np.full(n, 1.0 / (horizon + 1))
        else:
            mu_arr = np.empty(n)
            for key, val in mu.items():
                key = _coerce_id(key, index)
                if key not in index:
                    raise BadMu(f"mu given for unknown node {key!r}")
            for i, nid in enumerate(ids):
                val = _lookup(mu, nid)
                if val is None:
                    raise BadMu(f"mu missing for node {nid!r}")
                mu_arr[i] = float(val)
        if np.any(~(mu_arr > 0)) or not np.all(np.isfinite(mu_arr)):
            i = int(np.nonzero(~(mu_arr > 0) | ~np.isfinite(mu_arr))[0][0])
            raise BadMu(f"mu at node {ids[i]!r} must be positive, got {mu_arr[i]!r}")
        spent = np.empty(n)
        for i in range(n):
            spent[i] = mu_arr[i] + (spent[parent[i]] if parent[i] >= 0 else 0.0)
        leaves = self.level(horizon)
        worst = np.max(np.abs(spent[leaves] - 1.0))
        if worst > VALIDATION_TOL:
            raise BadMu(f"mu sums along a path differ from 1 by {worst:.3g}")
        self.mu = _frozen(mu_arr)
        # mass of mu still to come at each node, i.e. sum of mu over times >= t
        self.mu_tail = _frozen(1.0 - spent + mu_arr)

    # -- structure -----------------------------------------------------

    def level(self, t: int) -> np.ndarray:
        """Indices of the nodes at time ``t``."""
        if not 0 <= t <= self.horizon:
            raise TimeOrder(f"time {t} outside 0..{self.horizon}")
        return np.arange(self._offsets[t], self._offsets[t + 1])

    def level_size(self, t: int) -> int:
        return int(self._offsets[t + 1] - self._offsets[t])

    def offset(self, t: int) -> int:
        return int(self._offsets[t])

    @property
    def root(self) -> int:
        return 0

    @property
    def leaves(self) -> np.ndarray:
        return self.level(self.horizon)

    @cached_property
    def parent_pos(self) -> tuple:
        """For t >= 1, position of each time-t node's parent inside level t-1."""
        out = [None]
        for t in range(1, self.horizon + 1):
            out.append(_frozen(self.parent[self.level(t)] - self._offsets[t - 1]))
        return tuple(out)

    @cached_property
    def paths(self) -> np.ndarray:
        """Node indices along each root-to-leaf path, shape (leaves, T + 1)."""
        leaves = self.leaves
        out = np.empty((leaves.size, self.horizon + 1), dtype=int)
        out[:, self.horizon] = leaves
        for t in range(self.horizon - 1, -1, -1):
            out[:, t] = self.parent[out[:, t + 1]]
        return _frozen(out)

    def ancestor_at(self, t: int) -> np.ndarray:
        """Index of the time-t ancestor of every node (-1 for earlier nodes)."""
        return self._ancestors[t]

    @cached_property
    def _ancestors(self) -> tuple:
        table = []
        for t in range(self.horizon + 1):
            anc = np.full(self.n, -1, dtype=int)
            anc[self.level(t)] = self.level(t)
            for s in range(t + 1, self.horizon + 1):
                lv = self.level(s)
                anc[lv] = anc[self.parent[lv]]
            table.append(_frozen(anc))
        return tuple(table)

    def subtree(self, v: int) -> np.ndarray:
        """Nodes of the subtree rooted at ``v`` (including ``v``), in time order."""
        return self._subtrees[v]

    @cached_property
    def _subtrees(self) -> tuple:
        out = []
        for v in range(self.n):
            anc = self.ancestor_at(int(self.time[v]))
            out.append(_frozen(np.nonzero(anc == v)[0]))
        return tuple(out)

    def cond_prob(self, v: int) -> np.ndarray:
        """P(w | v) for the nodes w of ``subtree(v)``."""
        return self.abs_prob[self.subtree(v)] / self.abs_prob[v]

    def leaves_under(self, v: int) -> np.ndarray:
        sub = self.subtree(v)
        return sub[self.time[sub] == self.horizon]

    def tail_weights(self, v: int) -> np.ndarray:
        """Reference weights of the optional atoms below ``v``.

        The atom of node w (time s >= t) gets P(w | v) mu_s(w) / sum_{j>=t} mu_j,
        and the weights over the subtree sum to one.
        """
        sub = self.subtree(v)
        return self.abs_prob[sub] / self.abs_prob[v] * self.mu[sub] / self.mu_tail[v]

    # -- expectations --------------------------------------------------

    def backward(self, values: np.ndarray, t: int) -> np.ndarray:
        """One-step conditional expectation: level ``t + 1`` values to level ``t``."""
        lv = self.level(t + 1)
        return np.bincount(
            self.parent_pos[t + 1], weights=self.prob[lv] * values, minlength=self.level_size(t)
        )

    @cached_property
    def _transitions(self) -> tuple:
        mats = []
        for t in range(self.horizon):
            A = np.zeros((self.level_size(t), self.level_size(t + 1)))
            lv = self.level(t + 1)
            A[self.parent_pos[t + 1], lv - self.offset(t + 1)] = self.prob[lv]
            mats.append(_frozen(A))
        return tuple(mats)

    def backward_batch(self, values: np.ndarray, t: int) -> np.ndarray:
        """Batched :meth:`backward` for arrays of shape (k, n_{t+1})."""
        return values @ self._transitions[t].T

    def backward_sum(self, values: np.ndarray, t: int) -> np.ndarray:
        """Plain sum of level ``t + 1`` values over the children of each time-t node."""
        return np.bincount(self.parent_pos[t + 1], weights=values, minlength=self.level_size(t))

    def to_spec(self) -> dict:
        nodes = []
        for i, nid in enumerate(self.ids):
            par = None if self.parent[i] < 0 else self.ids[self.parent[i]]
            nodes.append({"id": nid, "time": int(self.time[i]), "parent": par, "prob": float(self.prob[i])})
        return {
            "horizon": self.horizon,
            "nodes": nodes,
            "mu": {str(nid): float(self.mu[i]) for i, nid in enumerate(self.ids)},
        }

    def __repr__(self):
        return f"EventTree(horizon={self.horizon}, nodes={self.n})"


def _coerce_id(key, index):
    if key in index:
        return key
    if isinstance(key, str):
        try:
            k = int(key)
        except ValueError:
            return key
        if k in index:
            return k
    return key


def _lookup(mapping, nid):
    if nid in mapping:
        return mapping[nid]
    if str(nid) in mapping:
        return mapping[str(nid)]
    return None


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """One real value per tree node."""

    tree: EventTree
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.tree.n,):
            raise ValueError(f"expected {self.tree.n} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("process values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, tree: EventTree, c: float) -> "AdaptedProcess":
        return cls(tree, np.full(tree.n, float(c)))

    @classmethod
    def from_mapping(cls, tree: EventTree, mapping: Mapping, name: str = "process") -> "AdaptedProcess":
        vals = np.empty(tree.n)
        for i, nid in enumerate(tree.ids):
            v = _lookup(mapping, nid)
            if v is None:
                raise ValueError(f"{name}: missing value for node {nid!r}")
            vals[i] = float(v)
        return cls(tree, vals)

    def to_mapping(self) -> dict:
        return {str(nid): float(v) for nid, v in zip(self.tree.ids, self.values)}

    def at(self, t: int) -> np.ndarray:
        return self.values[self.tree.level(t)]

    def _other(self, other):
        if isinstance(other, AdaptedProcess):
            if other.tree is not self.tree:
                raise ValueError("processes live on different trees")
            return other.values
        return other

    def __add__(self, other):
        return AdaptedProcess(self.tree, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return AdaptedProcess(self.tree, self.values - self._other(other))

    def __rsub__(self, other):
        return AdaptedProcess(self.tree, self._other(other) - self.values)

    def __mul__(self, other):
        return AdaptedProcess(self.tree, self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return AdaptedProcess(self.tree, -self.values)

    def __repr__(self):
        return f"AdaptedProcess({self.tree!r}, {np.array2string(self.values, precision=6)})"


def as_values(tree: EventTree, X) -> np.ndarray:
    """Node values of ``X`` given as a process or a raw array."""
    if isinstance(X, AdaptedProcess):
        if X.tree is not tree:
            raise ValueError("process lives on a different tree")
        return X.values
    arr = np.asarray(X, dtype=float)
    if arr.shape != (tree.n,):
        raise ValueError(f"expected {tree.n} node values, got shape {arr.shape}")
    return arr


def validate_tree(spec: Mapping) -> EventTree:
    """Build an :class:`EventTree` from a parsed tree description.

    The description follows the JSON layout
    ``{"horizon": T, "nodes": [{"id", "time", "parent", "prob"}], "mu": {...}}``.
    """
    if not isinstance(spec, Mapping):
        raise MalformedTree("tree spec must be a mapping")
    for key in ("horizon", "nodes"):
        if key not in spec:
            raise MalformedTree(f"tree spec missing field {key!r}")
    nodes = []
    for k, entry in enumerate(spec["nodes"]):
        try:
            nodes.append((entry["id"], entry["time"], entry.get("parent"), entry.get("prob", 1.0)))
        except (KeyError, TypeError) as exc:
            raise MalformedTree(f"nodes[{k}] is missing a field: {exc}") from None
    return EventTree(spec["horizon"], nodes, spec.get("mu"))


def level_values(tree: EventTree, X, s: int) -> np.ndarray:
    return as_values(tree, X)[tree.level(s)]


def cond_expect(tree: EventTree, X, s: int, t: int, weights=None) -> np.ndarray:
    """Conditional expectation of X_s given F_t, one value per time-t node.

    Parameters
    ----------
    X : AdaptedProcess, full node array, or array over the time-s nodes
    s, t : int
        Times with ``s >= t``.
    weights : array over the leaves, optional
        Nonnegative density (mean one under P) of the measure to use instead
        of P.  Nodes where the reweighted measure has no mass get NaN.
    """
    if s < t:
        raise TimeOrder(f"cannot condition X_{s} on F_{t}")
    vals = np.asarray(X.values if isinstance(X, AdaptedProcess) else X, dtype=float)
    if vals.shape == (tree.n,):
        vals = vals[tree.level(s)]
    elif vals.shape != (tree.level_size(s),):
        raise ValueError("X must be a process or hold one value per time-s node")
    if weights is None:
        out = vals
        for r in range(s - 1, t - 1, -1):
            out = tree.backward(out, r)
        return out
    w = np.asarray(weights, dtype=float)
    if w.shape != (tree.level_size(tree.horizon),):
        raise BadDensity("weights must hold one value per leaf")
    if np.any(w < 0):
        raise BadDensity("weights must be nonnegative")
    dens = w
    for r in range(tree.horizon - 1, s - 1, -1):
        dens = tree.backward(dens, r)
    num = dens * vals
    den = dens
    for r in range(s - 1, t - 1, -1):
        num = tree.backward(num, r)
        den = tree.backward(den, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def density_process(tree: EventTree, weights) -> np.ndarray:
    """Node values of E_P[L | F_t] for a leaf density L."""
    w = np.asarray(weights, dtype=float)
    out = np.empty(tree.n)
    out[tree.leaves] = w
    for t in range(tree.horizon - 1, -1, -1):
        out[tree.level(t)] = tree.backward(out[tree.level(t + 1)], t)
    return out


def delta(X) -> AdaptedProcess:
    """Increments X_t - X_{t-1} with X_{-1} = 0."""
    tree = X.tree
    vals = X.values.copy()
    nonroot = tree.parent >= 0
    vals[nonroot] -= X.values[tree.parent[nonroot]]
    return AdaptedProcess(tree, vals)


def cumulate(dX) -> AdaptedProcess:
    """Inverse of :func:`delta`: partial sums along each path."""
    tree = dX.tree
    vals = np.array(dX.values, dtype=float)
    for t in range(1, tree.horizon + 1):
        lv = tree.level(t)
        vals[lv] += vals[tree.parent[lv]]
    return AdaptedProcess(tree, vals)


def spread(tree: EventTree, level_vals, t: int) -> np.ndarray:
    """Copy per-node time-t values to every node at times >= t below it (NaN before t)."""
    vals = np.asarray(level_vals, dtype=float)
    anc = tree.ancestor_at(t)
    out = np.full(tree.n, np.nan)
    mask = anc >= 0
    out[mask] = vals[anc[mask] - tree.offset(t)]
    return out


def _measurable_level(tree: EventTree, m, t: int) -> np.ndarray:
    """Coerce ``m`` into one value per time-t node, checking F_t-measurability."""
    if np.isscalar(m):
        return np.full(tree.level_size(t), float(m))
    arr = np.asarray(m.values if isinstance(m, AdaptedProcess) else m, dtype=float)
    if arr.shape == (tree.level_size(t),):
        return arr
    if arr.shape != (tree.n,):
        raise MeasurabilityViolation("m must be a scalar, a time-t vector, or a node process")
    level = arr[tree.level(t)]
    expected = spread(tree, level, t)
    later = tree.time >= t
    if np.any(np.abs(arr[later] - expected[later]) > VALIDATION_TOL):
        raise MeasurabilityViolation(f"m varies within a time-{t} subtree")
    return level


def shift_cash(X, m, t: int, s: int) -> AdaptedProcess:
    """Return X + m 1_{T_s} for an F_t-measurable amount m (s >= t)."""
    tree = X.tree
    if s < t:
        raise TimeOrder(f"shift time {s} precedes measurability time {t}")
    level = _measurable_level(tree, m, t)
    add = spread(tree, level, t)
    add[tree.time < s] = 0.0
    return AdaptedProcess(tree, X.values + add)


def tail_indicator(tree: EventTree, level_vals, t: int) -> AdaptedProcess:
    """The process m 1_{T_t} for per-node time-t amounts m."""
    add = spread(tree, level_vals, t)
    add[tree.time < t] = 0.0
    return AdaptedProcess(tree, add)


# -- builders ------------------------------------------------------------


def iid_tree(horizon: int, branch_probs: Sequence[float], mu: Sequence[float] | None = None) -> EventTree:
    """Non-recombining tree with identical branching at every node.

    ``mu`` optionally gives a deterministic per-time weight profile.
    """
    nodes = [(0, 0, None, 1.0)]
    frontier = [0]
    next_id = 1
    for t in range(1, horizon + 1):
        new = []
        for par in frontier:
            for p in branch_probs:
                nodes.append((next_id, t, par, float(p)))
                new.append(next_id)
                next_id += 1
        frontier = new
    mu_map = None
    if mu is not None:
        if len(mu) != horizon + 1:
            raise BadMu("mu profile needs one entry per time")
        mu_map = {nid: float(mu[t]) for nid, t, _, _ in nodes}
    return EventTree(horizon, nodes, mu_map)


def binomial_tree(horizon: int, p_up: float = 0.5, mu: Sequence[float] | None = None) -> EventTree:
    return iid_tree(horizon, [p_up, 1.0 - p_up], mu)


def random_tree(rng: np.random.Generator, horizon: int, max_branching: int = 2,
                random_mu: bool = True) -> EventTree:
    """Random tree with 1..max_branching children per node and random adapted mu."""
    nodes = [(0, 0, None, 1.0)]
    frontier = [0]
    next_id = 1
    for t in range(1, horizon + 1):
        new = []
        for par in frontier:
            k = int(rng.integers(1, max_branching + 1)) if max_branching > 1 else 1
            if t == 1 and max_branching > 1:
                k = max(k, 2)
            p = rng.dirichlet(np.ones(k)) * 0.9 + 0.1 / k
            p /= p.sum()
            p[-1] = 1.0 - p[:-1].sum()
            for q in p:
                nodes.append((next_id, t, par, float(q)))
                new.append(next_id)
                next_id += 1
        frontier = new
    tree = EventTree(horizon, nodes)
    if not random_mu:
        return tree
    # adapted mu: split the remaining mass at random at every node
    mu = np.empty(tree.n)
    left = np.empty(tree.n)
    for i in range(tree.n):
        rem = 1.0 if tree.parent[i] < 0 else left[tree.parent[i]]
        if tree.time[i] == horizon:
            mu[i] = rem
        else:
            frac = rng.uniform(0.15, 0.7)
            mu[i] = rem * frac
        left[i] = rem - mu[i]
    return EventTree(horizon, nodes, {tree.ids[i]: mu[i] for i in range(tree.n)})
