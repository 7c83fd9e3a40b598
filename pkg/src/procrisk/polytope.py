"""Small exact solvers over capped simplices.

The feasible set throughout is {q : 0 <= q <= caps, sum(q) = 1}.
"""

from __future__ import annotations

import numpy as np

from .errors import InfeasibleFamily

MAX_ENUMERATION_ATOMS = 20
_CHUNK = 1 << 15


def _check(caps):
    caps = np.asarray(caps, dtype=float)
    if caps.sum() < 1.0 - 1e-12:
        raise InfeasibleFamily("caps sum to less than one")
    return caps


def greedy_capped_max(values, caps) -> np.ndarray:
    """max q.a over the capped simplex, for each row of ``values``.

    Fills the largest entries first up to their caps.  Exact.
    """
    caps = _check(caps)
    a = np.atleast_2d(np.asarray(values, dtype=float))
    order = np.argsort(-a, axis=1, kind="stable")
    a_sorted = np.take_along_axis(a, order, axis=1)
    c_sorted = caps[order]
    before = np.cumsum(c_sorted, axis=1) - c_sorted
    q = np.clip(1.0 - before, 0.0, c_sorted)
    return (q * a_sorted).sum(axis=1)


def greedy_capped_argmax(values, caps) -> np.ndarray:
    caps = _check(caps)
    a = np.asarray(values, dtype=float)
    order = np.argsort(-a, kind="stable")
    before = np.cumsum(caps[order]) - caps[order]
    q = np.empty_like(a)
    q[order] = np.clip(1.0 - before, 0.0, caps[order])
    return q


def capped_simplex_vertices(caps, tol: float = 1e-12) -> np.ndarray:
    """All vertices of the capped simplex (at most 20 coordinates).

    A vertex has every coordinate at 0 or at its cap except at most one.
    """
    caps = _check(caps)
    m = caps.size
    if m > MAX_ENUMERATION_ATOMS:
        raise ValueError(f"vertex enumeration limited to {MAX_ENUMERATION_ATOMS} atoms, got {m}")
    shifts = np.arange(m)
    found = []
    for start in range(0, 1 << m, _CHUNK):
        masks = np.arange(start, min(start + _CHUNK, 1 << m))
        bits = ((masks[:, None] >> shifts) & 1).astype(bool)
        base = bits.astype(float) * caps
        resid = 1.0 - base.sum(axis=1)
        exact = np.abs(resid) <= tol
        if exact.any():
            found.append(base[exact])
        for j in range(m):
            sel = ~bits[:, j] & (resid > tol) & (resid < caps[j] - tol)
            if sel.any():
                v = base[sel].copy()
                v[:, j] = resid[sel]
                found.append(v)
    if not found:
        raise InfeasibleFamily("capped simplex has no vertices")
    verts = np.vstack(found)
    _, keep = np.unique(np.round(verts, 12), axis=0, return_index=True)
    return verts[np.sort(keep)]


def vertex_capped_max(values, caps) -> np.ndarray:
    """Same value as :func:`greedy_capped_max`, by enumerating vertices."""
    verts = capped_simplex_vertices(caps)
    a = np.atleast_2d(np.asarray(values, dtype=float))
    return (a @ verts.T).max(axis=1)


class ConcavePiecewise:
    """Concave piecewise-linear function on [0, L] with f(0) = 0.

    Stored as segment lengths with strictly non-increasing slopes.
    """

    __slots__ = ("lengths", "slopes")

    def __init__(self, lengths, slopes):
        self.lengths = np.asarray(lengths, dtype=float)
        self.slopes = np.asarray(slopes, dtype=float)

    @property
    def domain(self) -> float:
        return float(self.lengths.sum())

    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.lengths)])

    def __call__(self, d: float) -> float:
        if d > self.domain + 1e-12:
            return -np.inf
        used = np.clip(d - (np.cumsum(self.lengths) - self.lengths), 0.0, self.lengths)
        return float(np.dot(used, self.slopes))

    def restrict(self, length: float) -> "ConcavePiecewise":
        start = np.cumsum(self.lengths) - self.lengths
        keep = np.clip(length - start, 0.0, self.lengths)
        nz = keep > 0
        return ConcavePiecewise(keep[nz], self.slopes[nz])

    @staticmethod
    def add(funcs) -> "ConcavePiecewise":
        """Pointwise sum on the common domain."""
        dom = min(f.domain for f in funcs)
        cuts = np.unique(np.concatenate([f.breakpoints() for f in funcs]))
        cuts = cuts[cuts <= dom]
        if cuts[-1] < dom:
            cuts = np.append(cuts, dom)
        lengths = np.diff(cuts)
        slopes = np.zeros(lengths.size)
        mids = cuts[:-1] + lengths / 2
        for f in funcs:
            ends = np.cumsum(f.lengths)
            idx = np.minimum(np.searchsorted(ends, mids), f.slopes.size - 1)
            if f.slopes.size:
                slopes += f.slopes[idx]
        nz = lengths > 0
        return ConcavePiecewise(lengths[nz], slopes[nz])

    def sup_convolve_linear(self, length: float, slope: float) -> "ConcavePiecewise":
        """h(d) = max over g in [0, length] of slope*g + f(d - g)."""
        lengths = np.append(self.lengths, length)
        slopes = np.append(self.slopes, slope)
        order = np.argsort(-slopes, kind="stable")
        return ConcavePiecewise(lengths[order], slopes[order])
