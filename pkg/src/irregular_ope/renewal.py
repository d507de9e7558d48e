"""Cox-type modulated renewal model for gap times.

The intensity of the next gap time is lambda0(x) * exp(beta'Z) with Z built
from the current transition. beta is fitted from the partial-likelihood score,
Lambda0 by the Breslow estimator, lambda0 by kernel smoothing of Lambda0.
Everything downstream (conditional gap law, martingale residuals, information
matrix) reads off the fitted jump grid u_1 < ... < u_J of observed gaps <= tau.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import ContractError, Dataset, Transitions

log = logging.getLogger(__name__)


class ConditioningError(np.linalg.LinAlgError):
    """The score Jacobian is singular; ``covariate`` names the offender."""

    def __init__(self, msg, covariate=None):
        super().__init__(msg)
        self.covariate = covariate


class ConvergenceError(RuntimeError):
    def __init__(self, msg, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class CovariateBuilder:
    """Z = phi(S_{k+1}, S_k, X_k, A_k).

    scheme1: (S_{k+1}, S_k, X_k, A_k, S_k*A_k); scheme2 drops S_{k+1}.
    """

    scheme: str = "scheme1"

    def __post_init__(self):
        if self.scheme not in ("scheme1", "scheme2"):
            raise ContractError(f"unknown covariate scheme {self.scheme!r}")

    def names(self, d: int = 1) -> list[str]:
        idx = (lambda p: [p] if d == 1 else [f"{p}[{j}]" for j in range(d)])
        out = idx("s_next") if self.scheme == "scheme1" else []
        return out + idx("s") + ["x", "a"] + idx("s*a")

    def build(self, s_next, s, x, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float).reshape(len(x), -1))
        a = np.asarray(a, dtype=float)
        cols = []
        if self.scheme == "scheme1":
            cols.append(np.asarray(s_next, dtype=float).reshape(len(x), -1))
        cols += [s, np.asarray(x, dtype=float)[:, None], a[:, None], s * a[:, None]]
        return np.hstack(cols)

    def from_transitions(self, tr: Transitions) -> np.ndarray:
        return self.build(tr.s_next, tr.s, tr.x, tr.a)


def choose_tau(gaps, quantile: float = 1.0, min_risk: int = 5) -> float:
    """Sample quantile of the gaps, lowered if needed so >= min_risk gaps exceed it."""
    g = np.sort(np.asarray(gaps, dtype=float))
    if len(g) <= min_risk:
        raise ContractError(f"need more than {min_risk} gaps to choose tau")
    tau = float(np.quantile(g, quantile))
    if np.sum(g > tau) < min_risk:
        tau = float(g[len(g) - min_risk - 1])
    return tau


def kernel_sum(x, centres, weights, b):
    """sum_k weights_k * K_b(x - centres_k) for the Epanechnikov kernel.

    ``centres`` must be sorted. Only centres within b of x contribute, so the
    sum is assembled from prefix sums of w, w*c and w*c**2 over that window.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    wc = w * centres.reshape((-1,) + (1,) * (w.ndim - 1))
    wcc = wc * centres.reshape((-1,) + (1,) * (w.ndim - 1))
    pre = [np.concatenate([np.zeros((1,) + w.shape[1:]), np.cumsum(a, axis=0)]) for a in (w, wc, wcc)]
    lo = np.searchsorted(centres, x - b, side="left")
    hi = np.searchsorted(centres, x + b, side="right")
    W0, W1, W2 = (p[hi] - p[lo] for p in pre)
    xx = x.reshape(x.shape + (1,) * (w.ndim - 1))
    sq = xx * xx * W0 - 2 * xx * W1 + W2
    return 0.75 / b * (W0 - sq / (b * b))


class _RiskSums:
    """Risk-set sums S_j(u) = sum_{X >= u} w Z^{(x)j} on an event grid."""

    def __init__(self, X, u):
        self.order = np.argsort(X, kind="stable")
        self.start = np.searchsorted(X[self.order], u, side="left")

    def tail(self, values):
        v = values[self.order]
        csum = np.cumsum(v[::-1], axis=0)[::-1]
        csum = np.concatenate([csum, np.zeros((1,) + v.shape[1:])])
        return csum[self.start]


def _event_grid(X, tau):
    ev = X[X <= tau]
    u, d = np.unique(ev, return_counts=True)
    return u, d.astype(float)


def _score_info(beta, Z, X, u, d, sums, delta):
    eta = Z @ beta
    w = np.exp(eta)
    S0 = sums.tail(w)
    S1 = sums.tail(w[:, None] * Z)
    S2 = sums.tail(w[:, None, None] * Z[:, :, None] * Z[:, None, :])
    zbar = S1 / S0[:, None]
    score = (delta[:, None] * Z).sum(axis=0) - (d[:, None] * zbar).sum(axis=0)
    info = np.einsum("j,jab->ab", d, S2 / S0[:, None, None] - zbar[:, :, None] * zbar[:, None, :])
    loglik = float(delta @ eta - d @ np.log(S0))
    return score, info, loglik


def fit_beta(Z, X, tau, tol: float = 1e-10, max_iter: int = 50, max_halvings: int = 30,
             names=None):
    """Newton-Raphson for the partial-likelihood score; returns (beta, iterations)."""
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    n, q = Z.shape
    names = names or [f"z{j}" for j in range(q)]
    u, d = _event_grid(X, tau)
    if len(u) < q + 1:
        raise ContractError(f"need at least {q + 1} distinct gap times <= tau, got {len(u)}")
    sums = _RiskSums(X, u)
    delta = (X <= tau).astype(float)
    beta = np.zeros(q)
    score, info, ll = _score_info(beta, Z, X, u, d, sums, delta)
    info0 = np.diag(info).copy()
    for it in range(max_iter + 1):
        if np.max(np.abs(score)) / n <= tol:
            # a vanishing information means the score flattened out at infinity
            if np.any(np.diag(info) < 1e-8 * info0):
                raise ConvergenceError("partial likelihood has no finite maximiser", beta)
            return _polish(beta, score, info, Z, X, u, d, sums, delta), it
        if it == max_iter:
            break
        _check_info(info, names)
        step = np.linalg.solve(info, score)
        for _ in range(max_halvings + 1):
            cand = beta + step
            c_score, c_info, c_ll = _score_info(cand, Z, X, u, d, sums, delta)
            if np.isfinite(c_ll) and c_ll >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            raise ConvergenceError("step-halving failed to improve the partial likelihood", beta)
        beta, score, info, ll = cand, c_score, c_info, c_ll
    raise ConvergenceError(f"no convergence after {max_iter} Newton steps", beta)


def _polish(beta, score, info, Z, X, u, d, sums, delta):
    # one extra Newton step drives the score to rounding level when it helps
    try:
        cand = beta + np.linalg.solve(info, score)
    except np.linalg.LinAlgError:
        return beta
    c_score = _score_info(cand, Z, X, u, d, sums, delta)[0]
    return cand if np.max(np.abs(c_score)) < np.max(np.abs(score)) else beta


def _check_info(info, names):
    diag = np.diag(info)
    scale = max(np.max(np.abs(diag)), 1e-300)
    bad = np.flatnonzero(diag <= 1e-12 * scale)
    if bad.size:
        raise ConditioningError(f"covariate {names[bad[0]]!r} has no variation within risk sets",
                                names[bad[0]])
    dn = np.sqrt(diag)
    w, v = np.linalg.eigh(info / np.outer(dn, dn))
    if w[0] <= 1e-12 * w[-1]:
        j = int(np.argmax(np.abs(v[:, 0])))
        raise ConditioningError(f"covariate {names[j]!r} is collinear with the others", names[j])


@dataclass(frozen=True, eq=False)
class RenewalFit:
    """Fitted model with everything precomputed on the jump grid.

    ``u``: jump times; ``dLambda``/``Lambda``: Breslow increments and
    cumulative values at u; ``S0``: risk-weighted sum at u; ``zbar``: risk-set
    average of Z at u. Per-transition arrays (``Z``, ``X``, ``eta``) follow
    the dataset's transition order.
    """

    beta: np.ndarray
    tau: float
    bandwidth: float
    Z: np.ndarray
    X: np.ndarray
    u: np.ndarray
    d: np.ndarray
    dLambda: np.ndarray
    S0: np.ndarray
    zbar: np.ndarray
    S2: np.ndarray
    iterations: int = 0
    names: list = field(default_factory=list)
    scheme: str = "scheme1"
    kernel_tau: float | None = None

    @property
    def n_K(self) -> int:
        return len(self.X)

    @property
    def J(self) -> int:
        return len(self.u)

    @property
    def Lambda(self) -> np.ndarray:
        return np.cumsum(self.dLambda)

    @property
    def eta(self) -> np.ndarray:
        return self.Z @ self.beta

    @property
    def delta(self) -> np.ndarray:
        return (self.X <= self.tau).astype(float)

    @property
    def event_index(self) -> np.ndarray:
        """Grid index of each transition's own gap (-1 if censored at tau)."""
        idx = np.searchsorted(self.u, self.X)
        return np.where(self.X <= self.tau, idx, -1)

    @property
    def n_at_or_before(self) -> np.ndarray:
        """Number of grid points u_j <= X for each transition."""
        return np.searchsorted(self.u, self.X, side="right")

    # -- baseline and conditional law ------------------------------------

    def Lambda0(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = np.searchsorted(self.u, np.minimum(x, self.tau), side="right")
        return np.concatenate([[0.0], self.Lambda])[k]

    def Px(self, x, z) -> np.ndarray:
        """P(X' <= x | z) = 1 - exp(-Lambda0(min(x, tau)) exp(beta'z))."""
        z = np.asarray(z, dtype=float)
        return -np.expm1(-self.Lambda0(x) * np.exp(z @ self.beta))

    def masses(self, eta) -> np.ndarray:
        """Jump masses of the fitted gap law at u for linear predictors ``eta``, shape (..., J)."""
        c = np.exp(np.asarray(eta, dtype=float))[..., None]
        lam = np.concatenate([[0.0], self.Lambda])
        surv = np.exp(-lam * c)
        return surv[..., :-1] - surv[..., 1:]

    def stieltjes_expectation(self, z, g) -> float:
        """Sum_j g(u_j) * [P(u_j | z) - P(u_j- | z)]; no mass beyond tau."""
        w = self.masses(np.asarray(z, dtype=float) @ self.beta)
        return float(w @ np.asarray(g(self.u), dtype=float))

    # -- kernel intensity --------------------------------------------------

    @property
    def ktau(self) -> float:
        """Right end of the kernel estimate (defaults to tau)."""
        return self.tau if self.kernel_tau is None else min(self.kernel_tau, self.tau)

    @cached_property
    def _kernel_jumps(self) -> np.ndarray:
        return self.u <= self.ktau

    @cached_property
    def _reflected(self):
        """Kernel jump locations reflected about 0 and the kernel end, sorted, with increments."""
        u, w = self.u[self._kernel_jumps], self.dLambda[self._kernel_jumps]
        c = np.concatenate([u, -u, 2 * self.ktau - u])
        w = np.tile(w, 3)
        order = np.argsort(c, kind="stable")
        return c[order], w[order]

    def kernel_lambda0(self, x) -> np.ndarray:
        """Epanechnikov smoothing of dLambda0 with reflection at 0 and the kernel end.

        Only jumps up to the kernel end enter, and beyond it the estimate is
        held at its boundary value.
        """
        x = np.minimum(np.asarray(x, dtype=float), self.ktau)
        c, w = self._reflected
        return kernel_sum(x, c, w, self.bandwidth)

    def kernel_adjoint(self, x, v) -> np.ndarray:
        """sum_l K(x_l, u_j) v_l for every jump u_j, shape (J, ...).

        K is the reflected kernel with lambda0(x) = sum_j K(x, u_j) dLambda_j;
        rows for jumps beyond the kernel end are zero.
        """
        x = np.minimum(np.asarray(x, dtype=float), self.ktau)
        order = np.argsort(x, kind="stable")
        xs, vs = x[order], np.asarray(v, dtype=float)[order]
        b, u = self.bandwidth, self.u
        out = sum(kernel_sum(pts, xs, vs, b) for pts in (u, -u, 2 * self.ktau - u))
        out[~self._kernel_jumps] = 0.0
        return out

    def kernel_weights(self, x) -> np.ndarray:
        """Dense reflected kernel matrix K(x, u_j), shape (..., J)."""
        x = np.minimum(np.asarray(x, dtype=float), self.ktau)
        out = 0.0
        for centres in (self.u, -self.u, 2 * self.ktau - self.u):
            t = (x[..., None] - centres) / self.bandwidth
            out = out + np.where(np.abs(t) <= 1, 0.75 * (1 - t * t), 0.0) / self.bandwidth
        return np.where(self._kernel_jumps, out, 0.0)

    def intensity(self, x, z) -> np.ndarray:
        return self.kernel_lambda0(x) * np.exp(np.asarray(z, dtype=float) @ self.beta)

    # -- residuals and information ------------------------------------------

    def martingale_residual(self, x) -> np.ndarray:
        """M_i(x) = N_i(x) - exp(beta'Z_i) Lambda0(min(x, X_i)) for every transition."""
        x = np.minimum(float(x), self.tau)
        N = (self.X <= x).astype(float)
        return N - np.exp(self.eta) * self.Lambda0(np.minimum(x, self.X))

    def integrate_dM(self, f) -> np.ndarray:
        """int_0^tau f_i(u) dM_i(u) for each transition.

        ``f`` is either a length-J vector (shared integrand on the grid) or an
        (n_K, J) matrix of per-transition integrands.
        """
        f = np.asarray(f, dtype=float)
        idx = self.event_index
        k = self.n_at_or_before
        if f.ndim == 1:
            F = np.concatenate([[0.0], np.cumsum(f * self.dLambda)])
            jump = np.where(idx >= 0, f[np.maximum(idx, 0)], 0.0)
            return jump - np.exp(self.eta) * F[k]
        rows = np.arange(self.n_K)
        F = np.concatenate([np.zeros((self.n_K, 1)), np.cumsum(f * self.dLambda, axis=1)], axis=1)
        jump = np.where(idx >= 0, f[rows, np.maximum(idx, 0)], 0.0)
        return jump - np.exp(self.eta) * F[rows, k]

    def score_residuals(self) -> np.ndarray:
        """phi_z,i = int (Z_i - Zbar(u)) dM_i(u), shape (n_K, q)."""
        idx = self.event_index
        k = self.n_at_or_before
        C = np.vstack([np.zeros(self.Z.shape[1]), np.cumsum(self.zbar * self.dLambda[:, None], axis=0)])
        Lam = np.concatenate([[0.0], self.Lambda])[k]
        jump = np.where((idx >= 0)[:, None], self.Z - self.zbar[np.maximum(idx, 0)], 0.0)
        return jump - np.exp(self.eta)[:, None] * (self.Z * Lam[:, None] - C[k])

    def omega_z(self) -> np.ndarray:
        """(1/n_K) sum_j d_j [S2/S0 - zbar zbar'](u_j)."""
        v = self.S2 / self.S0[:, None, None] - self.zbar[:, :, None] * self.zbar[:, None, :]
        om = np.einsum("j,jab->ab", self.d, v) / self.n_K
        om = (om + om.T) / 2
        if np.linalg.eigvalsh(om)[0] < -1e-8:
            raise np.linalg.LinAlgError("information matrix is not positive semidefinite")
        return om

    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(self.omega_z())) / self.n_K)

    def score(self) -> np.ndarray:
        return self.score_residuals().sum(axis=0)

    def summary(self) -> dict:
        return {
            "scheme": self.scheme,
            "covariates": list(self.names),
            "beta": self.beta.tolist(),
            "se": self.beta_se().tolist(),
            "tau": self.tau,
            "kernel_tau": self.ktau,
            "bandwidth": self.bandwidth,
            "iterations": self.iterations,
            "n_transitions": self.n_K,
            "n_jumps": self.J,
        }

    def write_jump_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "ties", "dLambda0", "Lambda0"])
            for row in zip(self.u, self.d, self.dLambda, self.Lambda):
                w.writerow([repr(float(v)) for v in row])


def breslow(Z, X, beta, tau):
    """Breslow jump grid: (u, ties, dLambda, S0, zbar, S2)."""
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    u, d = _event_grid(X, tau)
    sums = _RiskSums(X, u)
    w = np.exp(Z @ beta)
    S0 = sums.tail(w)
    if np.any(S0 <= 0) or not len(u):
        raise ContractError("empty risk set before tau")
    S1 = sums.tail(w[:, None] * Z)
    S2 = sums.tail(w[:, None, None] * Z[:, :, None] * Z[:, None, :])
    return u, d, d / S0, S0, S1 / S0[:, None], S2


def breslow_Lambda0(dataset: Dataset, beta, tau, builder: CovariateBuilder | None = None):
    """Return (jump times, cumulative Lambda0 at those times)."""
    builder = builder or CovariateBuilder()
    tr = dataset.transitions
    u, _, dL, *_ = breslow(builder.from_transitions(tr), tr.x_next, np.asarray(beta, float), tau)
    return u, np.cumsum(dL)


def fit_renewal_arrays(Z, X, tau=None, tau_quantile: float = 1.0, min_risk: int = 5,
                       bandwidth=None, bandwidth_const=None, kernel_quantile: float | None = 0.95,
                       tol: float = 1e-10,
                       max_iter: int = 50, names=None, scheme="custom") -> RenewalFit:
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    if tau is None:
        tau = choose_tau(X, tau_quantile, min_risk)
    beta, iters = fit_beta(Z, X, tau, tol=tol, max_iter=max_iter, names=names)
    u, d, dL, S0, zbar, S2 = breslow(Z, X, beta, tau)
    if bandwidth is None:
        c = float(np.std(X, ddof=1)) if bandwidth_const is None else float(bandwidth_const)
        bandwidth = c * len(X) ** (-1.0 / 3.0)
    if not bandwidth > 0:
        raise ContractError("kernel bandwidth must be positive")
    kernel_tau = None if kernel_quantile is None else min(float(np.quantile(X, kernel_quantile)), tau)
    return RenewalFit(beta, float(tau), float(bandwidth), Z, X, u, d, dL, S0, zbar, S2,
                      iters, list(names or [f"z{j}" for j in range(Z.shape[1])]), scheme, kernel_tau)


def fit_renewal(dataset: Dataset, builder: CovariateBuilder | None = None, **kwargs) -> RenewalFit:
    builder = builder or CovariateBuilder()
    tr = dataset.transitions
    return fit_renewal_arrays(builder.from_transitions(tr), tr.x_next, names=builder.names(dataset.d),
                              scheme=builder.scheme, **kwargs)
