"""Tensor-product B-spline features for Q-functions of (state, gap time, action).

States pass through the standard normal CDF and gap times through
x -> 1 - exp(-x), so every margin lives on [0, 1]. Each margin gets a clamped
B-spline basis with interior knots at sample quantiles of the transformed
data; the tensor product over margins is copied into the block of the taken
action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .core import ContractError, Dataset, DomainError, LinearPolicy, PolicySpec, ReferenceDistribution


def transform(s, x):
    """Map (s, x) into the unit cube: (Phi(s), 1 - exp(-x))."""
    return ndtr(np.asarray(s, dtype=float)), -np.expm1(-np.asarray(x, dtype=float))


def inverse_transform_x(u):
    return -np.log1p(-np.asarray(u, dtype=float))


def clamped_knots(interior, degree: int = 3) -> np.ndarray:
    interior = np.sort(np.asarray(interior, dtype=float))
    if interior.size and (interior[0] <= 0 or interior[-1] >= 1):
        raise ContractError("interior knots must lie strictly inside (0, 1)")
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def bspline_eval(u, knots, degree: int = 3) -> np.ndarray:
    """All B-spline basis functions at ``u`` by the Cox-de Boor recursion.

    ``knots`` is the full clamped knot vector on [0, 1]. Returns an array of
    shape ``u.shape + (len(knots) - degree - 1,)``. The right endpoint u = 1
    belongs to the last non-degenerate knot interval so the basis still sums
    to one there.
    """
    u = np.asarray(u, dtype=float)
    t = np.asarray(knots, dtype=float)
    if np.any(~((u >= 0) & (u <= 1))):
        raise DomainError("B-spline argument outside [0, 1]")
    nb = len(t) - degree - 1
    flat = u.reshape(-1)
    # degree-0 indicator of the knot span containing each point
    span = np.searchsorted(t, flat, side="right") - 1
    last = np.flatnonzero(t[1:] > t[:-1]).max()
    span = np.minimum(span, last)
    B = np.zeros((flat.size, len(t) - 1))
    B[np.arange(flat.size), span] = 1.0
    for p in range(1, degree + 1):
        n_p = len(t) - p - 1
        left_den = t[p:p + n_p] - t[:n_p]
        right_den = t[p + 1:p + 1 + n_p] - t[1:1 + n_p]
        with np.errstate(divide="ignore", invalid="ignore"):
            wl = np.where(left_den > 0, (flat[:, None] - t[:n_p]) / left_den, 0.0)
            wr = np.where(right_den > 0, (t[p + 1:p + 1 + n_p] - flat[:, None]) / right_den, 0.0)
        B = wl * B[:, :n_p] + wr * B[:, 1:n_p + 1]
    return B[:, :nb].reshape(u.shape + (nb,))


@dataclass(frozen=True)
class BasisSpec:
    degree: int = 3
    q_s: int = 1
    q_x: int = 1

    def __post_init__(self):
        if self.degree < 0 or self.q_s < 0 or self.q_x < 0:
            raise ContractError("degree and knot counts must be nonnegative")


def quantile_knots(u, q: int) -> np.ndarray:
    """Interior knots at the sample quantiles j/(q+1), j = 1..q."""
    if q == 0:
        return np.empty(0)
    return np.quantile(np.asarray(u, dtype=float), np.arange(1, q + 1) / (q + 1))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Frozen-knot feature map xi(s, x, a) of length m * L.

    Tensor ordering runs over state margins first and the gap-time margin
    last, so block a of a coefficient vector reshapes to (L_s..., L_x).
    """

    spec: BasisSpec
    state_knots: tuple
    gap_knots: np.ndarray
    m: int = 2

    @classmethod
    def from_data(cls, dataset: Dataset, spec: BasisSpec | None = None) -> "FeatureMap":
        spec = spec or BasisSpec()
        s_star, x_star = transform(dataset.all_states(), dataset.all_gaps())
        sk = tuple(clamped_knots(quantile_knots(s_star[:, j], spec.q_s), spec.degree) for j in range(dataset.d))
        xk = clamped_knots(quantile_knots(x_star, spec.q_x), spec.degree)
        return cls(spec, sk, xk, dataset.m)

    @classmethod
    def from_interior(cls, state_interior, gap_interior, spec: BasisSpec | None = None, m: int = 2):
        spec = spec or BasisSpec()
        sk = tuple(clamped_knots(k, spec.degree) for k in state_interior)
        return cls(spec, sk, clamped_knots(gap_interior, spec.degree), m)

    @property
    def d(self) -> int:
        return len(self.state_knots)

    @property
    def margin_sizes(self) -> tuple:
        p = self.spec.degree
        return tuple(len(k) - p - 1 for k in self.state_knots) + (len(self.gap_knots) - p - 1,)

    @property
    def L(self) -> int:
        return int(np.prod(self.margin_sizes))

    @property
    def size(self) -> int:
        return self.m * self.L

    def state_basis(self, s) -> np.ndarray:
        """Tensor product over state margins, shape (..., L_s). A scalar is a one-dimensional state."""
        s = np.asarray(s, dtype=float)
        if s.ndim == 0:
            s = s[None]
        s_star = ndtr(s)
        out = None
        for j, knots in enumerate(self.state_knots):
            b = bspline_eval(s_star[..., j], knots, self.spec.degree)
            out = b if out is None else (out[..., :, None] * b[..., None, :]).reshape(b.shape[:-1] + (-1,))
        return out

    def gap_basis(self, x) -> np.ndarray:
        return bspline_eval(-np.expm1(-np.asarray(x, dtype=float)), self.gap_knots, self.spec.degree)

    def phi(self, s, x) -> np.ndarray:
        """Action-free tensor basis Phi_L(s, x), shape (..., L)."""
        bs, bx = self.state_basis(s), self.gap_basis(x)
        out = bs[..., :, None] * bx[..., None, :]
        return out.reshape(out.shape[:-2] + (-1,))

    def xi(self, s, x, a) -> np.ndarray:
        """Block-indicator features, shape (..., m*L)."""
        a = np.asarray(a)
        if np.any((a < 0) | (a >= self.m)):
            raise DomainError(f"action outside 0..{self.m - 1}")
        ph = self.phi(s, x)
        out = np.zeros(ph.shape[:-1] + (self.m, self.L))
        onehot = np.arange(self.m) == a[..., None]
        out += onehot[..., None] * ph[..., None, :]
        return out.reshape(ph.shape[:-1] + (self.size,))

    def zeta(self, policy: PolicySpec, s, x) -> np.ndarray:
        """Policy-averaged features sum_a pi(a | s, x) xi(s, x, a)."""
        ph = self.phi(s, x)
        p = policy.probs(s, x)
        out = p[..., :, None] * ph[..., None, :]
        return out.reshape(ph.shape[:-1] + (self.size,))

    def to_dict(self) -> dict:
        p = self.spec.degree
        return {
            "degree": p,
            "state_interior_knots": [k[p + 1:len(k) - p - 1].tolist() for k in self.state_knots],
            "gap_interior_knots": self.gap_knots[p + 1:len(self.gap_knots) - p - 1].tolist(),
            "m": self.m,
        }


def feature_xi(fmap: FeatureMap, s, x, a) -> np.ndarray:
    return fmap.xi(s, x, a)


def zeta_policy(fmap: FeatureMap, policy: PolicySpec, s, x) -> np.ndarray:
    return fmap.zeta(policy, s, x)


def _panels(lo, hi, cuts, nodes, weights):
    """Gauss-Legendre nodes/weights on [lo, hi] split at the given interior cuts."""
    edges = np.unique(np.concatenate([[lo, hi], [c for c in cuts if lo < c < hi]]))
    a, b = edges[:-1, None], edges[1:, None]
    pts = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    w = 0.5 * (b - a) * weights
    return pts.ravel(), w.ravel()


def _interior(knots, degree):
    return knots[degree + 1:len(knots) - degree - 1]


def zeta_reference(fmap: FeatureMap, policy: PolicySpec, G: ReferenceDistribution,
                   nodes: int = 64) -> np.ndarray:
    """Integrate the policy-averaged features against the reference distribution.

    For a uniform box the integral uses tensor Gauss-Legendre quadrature with
    panels split at the knots (mapped back to the original scale) and, for a
    linear deterministic policy, at its decision boundary, so each panel
    integrates a polynomial in the transformed coordinates piecewise smoothly.
    """
    if G.kind == "point-mass":
        return fmap.zeta(policy, G.s_atom, G.x_atom)
    gl_x, gl_w = np.polynomial.legendre.leggauss(nodes)
    p = fmap.spec.degree
    x_cuts = list(inverse_transform_x(_interior(fmap.gap_knots, p)))
    linear = isinstance(policy, LinearPolicy)
    if fmap.d == 1:
        s_cuts = list(ndtri(_interior(fmap.state_knots[0], p)))
        if linear and policy.alpha2 == 0 and policy.alpha1[0] != 0:
            s_cuts.append(-policy.alpha0 / policy.alpha1[0])
        s_pts, s_w = _panels(G.s_lo[0], G.s_hi[0], s_cuts, gl_x, gl_w)
        s_pts = s_pts[:, None]
    else:
        grids = [_panels(G.s_lo[j], G.s_hi[j], ndtri(_interior(fmap.state_knots[j], p)), gl_x, gl_w)
                 for j in range(fmap.d)]
        mesh = np.meshgrid(*[g[0] for g in grids], indexing="ij")
        wmesh = np.meshgrid(*[g[1] for g in grids], indexing="ij")
        s_pts = np.stack([m.ravel() for m in mesh], axis=-1)
        s_w = np.prod([w.ravel() for w in wmesh], axis=0)
    total = np.zeros(fmap.size)
    for si, wi in zip(s_pts, s_w):
        cuts = list(x_cuts)
        if linear and policy.alpha2 != 0:
            cuts.append(-(policy.alpha0 + si @ policy.alpha1) / policy.alpha2)
        x_pts, x_w = _panels(G.x_lo, G.x_hi, cuts, gl_x, gl_w)
        z = fmap.zeta(policy, np.broadcast_to(si, (len(x_pts), fmap.d)), x_pts)
        total += wi * (x_w @ z)
    volume = np.prod(G.s_hi - G.s_lo) * (G.x_hi - G.x_lo)
    return total / volume
