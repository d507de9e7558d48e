"""Policy-value estimators for irregularly observed decision processes.

Three estimators share one linear Q-model Q(s, x, a) = xi(s, x, a)'theta:

* standard: discounts each transition by gamma**X' at the observed next gap;
* modulated: replaces gamma**X' * zeta(S', X') by its expectation over the
  fitted conditional gap law, integrating out the observation process;
* naive: discounts every transition by gamma regardless of elapsed time.

Each works on raw rewards ("cumulative") or on rewards divided by the fitted
gap-time intensity ("integrated"). Standard errors come from sandwich
estimators built from per-transition influence terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.stats import norm

from .basis import FeatureMap, zeta_reference
from .core import ContractError, Dataset, LinearPolicy, PolicySpec, ReferenceDistribution
from .renewal import RenewalFit

log = logging.getLogger(__name__)

METHODS = ("naive", "standard", "modulated")
REWARD_MODES = ("cumulative", "integrated")
INTENSITY_FLOOR = 1e-6
COND_LIMIT = 1e10


class ConditioningError(np.linalg.LinAlgError):
    pass


# -- conditional gap laws ---------------------------------------------------------


class FittedGapLaw:
    """Gap law implied by a renewal fit: jump masses on the Breslow grid."""

    def __init__(self, fit: RenewalFit):
        self.fit = fit
        self.u = fit.u

    def masses(self, rows) -> np.ndarray:
        return self.fit.masses(self.fit.eta[rows])


class PointMassGapLaw:
    """Each transition's gap law is an atom at its own observed next gap."""

    def __init__(self, gaps):
        gaps = np.asarray(gaps, dtype=float)
        self.u, self.index = np.unique(gaps, return_inverse=True)

    def masses(self, rows) -> np.ndarray:
        rows = np.arange(len(self.index))[rows]
        out = np.zeros((len(rows), len(self.u)))
        out[np.arange(len(rows)), self.index[rows]] = 1.0
        return out


def _grid_policy(policy, s, u):
    """Action grid for a chunk: a boolean action-1 mask for linear rules, else (m, c, J) probabilities."""
    if isinstance(policy, LinearPolicy):
        return policy.grid_action(s, u)
    return policy.grid_probs(s, u)


def _split_by_action(P, W, B):
    """[(W * pi(a | s_l, u_j)) @ B for each action a] over a chunk of rows."""
    if P.dtype == bool:
        M1 = np.where(P, W, 0.0) @ B
        return [W @ B - M1, M1]
    return [(W * Pa) @ B for Pa in P]


def _policy_q_grid(P, Q):
    """sum_a pi(a | s_l, u_j) Q[a][l, j] over a chunk."""
    if P.dtype == bool:
        return np.where(P, Q[1], Q[0])
    return sum(Pa * Qa for Pa, Qa in zip(P, Q))


# -- problem setup ------------------------------------------------------------------


def inverse_intensity_weights(rewards, intensity, floor: float = INTENSITY_FLOOR):
    """R / max(lambda, floor); returns (weighted rewards, number floored)."""
    lam = np.asarray(intensity, dtype=float)
    floored = lam < floor
    n_floored = int(floored.sum())
    if n_floored:
        log.warning("%d intensity values floored at %g", n_floored, floor)
    return np.asarray(rewards, dtype=float) / np.where(floored, floor, lam), n_floored


class Problem:
    """Per-dataset arrays shared by all estimators and variance computations."""

    def __init__(self, dataset: Dataset, policy: PolicySpec, fmap: FeatureMap, gamma: float,
                 fit: RenewalFit | None = None, law=None, chunk: int = 512):
        if not 0 < gamma < 1:
            raise ContractError("gamma must lie in (0, 1)")
        if fmap.m != dataset.m or policy.m != dataset.m:
            raise ContractError("action counts of dataset, policy and features differ")
        self.dataset, self.policy, self.fmap, self.gamma = dataset, policy, fmap, gamma
        self.fit = fit
        self.law = law if law is not None else (FittedGapLaw(fit) if fit is not None else None)
        self.chunk = chunk
        tr = dataset.transitions
        self.tr = tr
        self.n_K = len(tr)
        self.Xi = fmap.xi(tr.s, tr.x, tr.a)
        self.zeta_next = fmap.zeta(policy, tr.s_next, tr.x_next)
        self.disc = gamma ** tr.x_next

    def _require_fit(self, what):
        if self.fit is None:
            raise ContractError(f"{what} needs a renewal fit")

    @cached_property
    def integrated_rewards(self):
        """(R_I, floored count, kernel baseline at X') using the fitted intensity."""
        self._require_fit("integrated reward")
        lam0 = self.fit.kernel_lambda0(self.tr.x_next)
        r, n_floor = inverse_intensity_weights(self.tr.r, lam0 * np.exp(self.fit.eta))
        return r, n_floor, lam0

    def rewards(self, mode: str) -> np.ndarray:
        if mode == "cumulative":
            return self.tr.r
        if mode == "integrated":
            return self.integrated_rewards[0]
        raise ContractError(f"unknown reward mode {mode!r}")

    @cached_property
    def U_mod(self) -> np.ndarray:
        """int gamma**x' zeta(S', x') dP(x' | Z) per transition, shape (n_K, m*L)."""
        if self.law is None:
            raise ContractError("modulated estimator needs a gap law or renewal fit")
        fm = self.fmap
        u = self.law.u
        gu = self.gamma ** u
        bx = fm.gap_basis(u)
        out = np.empty((self.n_K, fm.size))
        for start in range(0, self.n_K, self.chunk):
            rows = slice(start, min(start + self.chunk, self.n_K))
            sn = self.tr.s_next[rows]
            W = self.law.masses(rows) * gu
            bs = fm.state_basis(sn)
            blocks = []
            for Ma in _split_by_action(_grid_policy(self.policy, sn, u), W, bx):
                blocks.append((bs[:, :, None] * Ma[:, None, :]).reshape(len(sn), -1))
            out[rows] = np.hstack(blocks)
        return out

    def next_term(self, method: str) -> np.ndarray:
        """Discounted next-step feature that enters the design for a method."""
        if method == "standard":
            return self.disc[:, None] * self.zeta_next
        if method == "naive":
            return self.gamma * self.zeta_next
        if method == "modulated":
            return self.U_mod
        raise ContractError(f"unknown method {method!r}")

    def reward_term(self, method: str, mode: str) -> np.ndarray:
        r = self.rewards(mode)
        return self.gamma * r if method == "naive" else self.disc * r


# -- fitted models --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QModel:
    theta: np.ndarray
    method: str
    reward_mode: str
    D: np.ndarray
    cond: float
    orthogonality: float
    n_floored: int = 0
    fmap: FeatureMap | None = None

    def q(self, s, x, a) -> np.ndarray:
        return self.fmap.xi(s, x, a) @ self.theta


def _solve(D, b):
    cond = float(np.linalg.cond(D))
    if not np.isfinite(cond):
        raise np.linalg.LinAlgError("singular design matrix")
    if cond > COND_LIMIT:
        raise ConditioningError(f"design condition number {cond:.3g} exceeds {COND_LIMIT:.0e}; "
                                "use fewer knots")
    return np.linalg.solve(D, b), cond


def estimate(problem: Problem, method: str, reward_mode: str = "cumulative") -> QModel:
    """theta = [sum xi (xi - next)']^{-1} sum xi * discounted reward."""
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    n = problem.n_K
    Xi = problem.Xi
    nxt = problem.next_term(method)
    y = problem.reward_term(method, reward_mode)
    D = Xi.T @ (Xi - nxt) / n
    b = Xi.T @ y / n
    theta, cond = _solve(D, b)
    resid = y + nxt @ theta - Xi @ theta
    orth = float(np.max(np.abs(Xi.T @ resid / n)))
    n_floor = problem.integrated_rewards[1] if reward_mode == "integrated" else 0
    return QModel(theta, method, reward_mode, D, cond, orth, n_floor, problem.fmap)


def estimate_standard(dataset, policy, fmap, gamma, reward_mode="cumulative", fit=None) -> QModel:
    return estimate(Problem(dataset, policy, fmap, gamma, fit), "standard", reward_mode)


def estimate_modulated(dataset, policy, fmap, gamma, fit, reward_mode="cumulative", law=None) -> QModel:
    return estimate(Problem(dataset, policy, fmap, gamma, fit, law), "modulated", reward_mode)


def estimate_naive(dataset, policy, fmap, gamma, reward_mode="cumulative", fit=None) -> QModel:
    return estimate(Problem(dataset, policy, fmap, gamma, fit), "naive", reward_mode)


def value_at(model: QModel, policy: PolicySpec, fmap: FeatureMap, target, nodes: int = 64) -> float:
    """zeta' theta at a point (s, x) or integrated over a reference distribution."""
    if isinstance(target, ReferenceDistribution):
        z = zeta_reference(fmap, policy, target, nodes)
    else:
        s, x = target
        z = fmap.zeta(policy, np.atleast_1d(np.asarray(s, dtype=float)), float(x))
    return float(z @ model.theta)


# -- influence terms and sandwich variance --------------------------------------------


@dataclass(frozen=True, eq=False)
class InfluenceBundle:
    """psi_i = xi_i * resid_i + correction_i and Omega = mean of psi psi'."""

    resid: np.ndarray
    correction: np.ndarray
    D: np.ndarray
    psi: np.ndarray
    Omega: np.ndarray

    @classmethod
    def build(cls, Xi, resid, correction, D) -> "InfluenceBundle":
        psi = Xi * resid[:, None] + correction
        return cls(resid, correction, D, psi, psi.T @ psi / len(psi))


def _integrate_dM_matrix(fit: RenewalFit, F) -> np.ndarray:
    """int F(u) dM_i(u) for a shared (J, p) integrand; returns (n_K, p)."""
    idx = fit.event_index
    k = fit.n_at_or_before
    cum = np.vstack([np.zeros(F.shape[1]), np.cumsum(F * fit.dLambda[:, None], axis=0)])
    jump = np.where((idx >= 0)[:, None], F[np.maximum(idx, 0)], 0.0)
    return jump - np.exp(fit.eta)[:, None] * cum[k]


def _zbar_at(fit: RenewalFit, x) -> np.ndarray:
    j = np.clip(np.searchsorted(fit.u, np.minimum(x, fit.tau), side="right") - 1, 0, fit.J - 1)
    return fit.zbar[j]


def renewal_corrections(problem: Problem, thetas) -> list:
    """Influence of estimating the gap law on mean xi * U_mod' theta, one (n_K, p) array per theta.

    Combines the baseline part int [g1(x) - int_[x,tau] g2 dLambda0] / S0(x) dM_i(x)
    with the regression part (g3 - g4) Omega_z^{-1} phi_z,i. All thetas share
    one pass over the transition-by-grid arrays.
    """
    problem._require_fit("renewal correction")
    fit, fm = problem.fit, problem.fmap
    n, p, J, q = problem.n_K, fm.size, fit.J, fit.Z.shape[1]
    u, gu = fit.u, problem.gamma ** fit.u
    bx = fm.gap_basis(u)
    Lam = fit.Lambda
    C = np.cumsum(fit.zbar * fit.dLambda[:, None], axis=0)
    c_all = np.exp(fit.eta)
    Z = fit.Z
    blocks = [np.asarray(th).reshape(fm.m, -1, bx.shape[1]) for th in thetas]
    acc = [[np.zeros((p, J)), np.zeros((p, J)), np.zeros((p, q)), np.zeros((p, q))] for _ in thetas]
    lam0 = np.concatenate([[0.0], Lam])
    # right-hand factors for G3 and G4: [1, zbar, Lambda0, C]
    R34 = np.hstack([np.ones((J, 1)), fit.zbar, Lam[:, None], C])
    for start in range(0, n, problem.chunk):
        rows = slice(start, min(start + problem.chunk, n))
        sn = problem.tr.s_next[rows]
        c = c_all[rows]
        Xi = problem.Xi[rows]
        Xic = Xi * c[:, None]
        bs = fm.state_basis(sn)
        surv = np.exp(-np.outer(c, lam0))
        masses = surv[:, :-1] - surv[:, 1:]
        Ec = surv[:, 1:] * (c[:, None] * gu)
        P = _grid_policy(problem.policy, sn, u)
        for th, (G1, G2, G3, G4) in zip(blocks, acc):
            Hq = _policy_q_grid(P, [(bs @ th[a]) @ bx.T for a in range(fm.m)])
            HE = Hq * Ec
            G1 += Xi.T @ HE
            G2 += Xic.T @ HE
            T = (Hq * masses) @ (R34 * gu[:, None])
            Zr = Z[rows]
            G3 += Xi.T @ (T[:, :1] * Zr - T[:, 1:1 + q])
            G4 += Xic.T @ (T[:, 1 + q:2 + q] * Zr - T[:, 2 + q:])
    phi_z = fit.score_residuals()
    om = fit.omega_z()
    out = []
    for G1, G2, G3, G4 in acc:
        G1, G2, G3, G4 = G1 / n, G2 / n, G3 / n, G4 / n
        tail = np.cumsum((G2 * fit.dLambda)[:, ::-1], axis=1)[:, ::-1]
        F = ((G1 - tail) / (fit.S0 / n)).T
        out.append(_integrate_dM_matrix(fit, F) + phi_z @ np.linalg.solve(om, (G3 - G4).T))
    return out


def renewal_correction(problem: Problem, theta) -> np.ndarray:
    return renewal_corrections(problem, [theta])[0]


def weight_correction(problem: Problem) -> np.ndarray:
    """Influence of the fitted intensity in the weighted rewards on mean xi * gamma**X' * R_I.

    Dividing by a larger fitted intensity lowers the weighted reward, hence
    the leading minus sign.
    """
    problem._require_fit("weight correction")
    fit = problem.fit
    n = problem.n_K
    r_int, _, lam0 = problem.integrated_rewards
    ok = lam0 * np.exp(fit.eta) >= INTENSITY_FLOOR
    w = np.where(ok, problem.disc * r_int, 0.0)
    v = problem.Xi * (w / np.where(ok, lam0, 1.0))[:, None]
    g5 = fit.kernel_adjoint(problem.tr.x_next, v) / n
    zdev = fit.Z - _zbar_at(fit, problem.tr.x_next)
    g6 = problem.Xi.T @ (w[:, None] * zdev) / n
    base = _integrate_dM_matrix(fit, g5 / (fit.S0[:, None] / n))
    reg = fit.score_residuals() @ np.linalg.solve(fit.omega_z(), g6.T)
    return -(base + reg)


def influence_bundle(problem: Problem, model: QModel, renewal_corr=None) -> InfluenceBundle:
    if model.method == "naive":
        raise ContractError("the naive estimator has no variance formula")
    nxt = problem.next_term(model.method)
    y = problem.reward_term(model.method, model.reward_mode)
    resid = y + nxt @ model.theta - problem.Xi @ model.theta
    corr = np.zeros_like(problem.Xi)
    if model.method == "modulated":
        if renewal_corr is None:
            renewal_corr = renewal_correction(problem, model.theta)
        corr = corr + renewal_corr
    if model.reward_mode == "integrated":
        corr = corr + weight_correction(problem)
    return InfluenceBundle.build(problem.Xi, resid, corr, model.D)


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    se: float
    ci: tuple
    n_K: int
    method: str
    reward_mode: str
    reference: str
    ci_level: float = 0.95


def sandwich_se(zeta_G, bundle: InfluenceBundle, n_K: int) -> float:
    v = np.linalg.solve(bundle.D.T, zeta_G)
    var = float(v @ bundle.Omega @ v)
    return float(np.sqrt(max(var, 0.0) / n_K))


def value_with_ci(problem: Problem, method: str, reward_mode: str, target: ReferenceDistribution,
                  level: float = 0.95, zeta_G=None, model: QModel | None = None) -> ValueEstimate:
    model = model or estimate(problem, method, reward_mode)
    if zeta_G is None:
        zeta_G = zeta_reference(problem.fmap, problem.policy, target)
    value = float(zeta_G @ model.theta)
    if method == "naive":
        se, ci = float("nan"), (float("nan"), float("nan"))
    else:
        se = sandwich_se(zeta_G, influence_bundle(problem, model), problem.n_K)
        z = float(norm.ppf(0.5 + level / 2))
        ci = (value - z * se, value + z * se)
    return ValueEstimate(value, se, ci, problem.n_K, method, reward_mode, target.describe(), level)


def evaluate_all(problem: Problem, methods, reward_modes, targets: dict, zetas: dict | None = None,
                 level: float = 0.95) -> dict:
    """Estimate every (method, reward mode) pair; returns {(method, mode): ValueEstimate}.

    ``targets`` maps reward mode to its reference distribution. Modulated
    corrections for all reward modes are computed in a single pass.
    """
    zetas = dict(zetas or {})
    for mode in reward_modes:
        if mode not in zetas:
            zetas[mode] = zeta_reference(problem.fmap, problem.policy, targets[mode])
    models = {(m, r): estimate(problem, m, r) for m in methods for r in reward_modes}
    mod_keys = [k for k in models if k[0] == "modulated"]
    corr = dict(zip(mod_keys, renewal_corrections(problem, [models[k].theta for k in mod_keys]))) \
        if mod_keys else {}
    z = float(norm.ppf(0.5 + level / 2))
    out = {}
    for (m, r), model in models.items():
        value = float(zetas[r] @ model.theta)
        if m == "naive":
            se, ci = float("nan"), (float("nan"), float("nan"))
        else:
            se = sandwich_se(zetas[r], influence_bundle(problem, model, corr.get((m, r))), problem.n_K)
            ci = (value - z * se, value + z * se)
        out[(m, r)] = ValueEstimate(value, se, ci, problem.n_K, m, r, targets[r].describe(), level)
    return out, models
