"""Generative models for the simulation scenarios and the Monte Carlo truth.

States follow one of three noisy linear recursions (S1, S2, S3) and gap times
one of three proportional-intensity laws (X1, X2, X3) with a constant baseline.
A scenario pairs one state model with one gap model; the pair fixes which of
the next state and next gap time is drawn first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .core import (
    ContractError,
    Dataset,
    PolicySpec,
    ReferenceDistribution,
    TabularPolicy,
    Trajectory,
    sample_reference,
)

STATE_MODELS = ("S1", "S2", "S3")
GAP_MODELS = ("X1", "X2", "X3")

# (state model, gap model) for the four standard scenarios
SCENARIO_TABLE = {
    "scenario1": ("S1", "X1"),
    "scenario2": ("S2", "X2"),
    "scenario3": ("S2", "X3"),
    "scenario4": ("S3", "X2"),
}


@dataclass(frozen=True)
class ScenarioSpec:
    state_model: str
    gap_model: str
    baseline: float = 1.0
    # N(0, 1/4) read as standard deviation 1/4; this reproduces the reference truths
    state_noise_sd: float = 0.25
    reward_noise_sd: float = 0.25
    custom: bool = False
    # optional override: reward_fn(s, a, s_next, x_next, noise) -> reward
    reward_fn: Callable | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.state_model not in STATE_MODELS or self.gap_model not in GAP_MODELS:
            raise ContractError(f"unknown model pair ({self.state_model}, {self.gap_model})")
        if self.state_model == "S3" and self.gap_model == "X3":
            raise ContractError("S3 needs the next gap first and X3 the next state first")
        if not self.custom and (self.state_model, self.gap_model) not in SCENARIO_TABLE.values():
            raise ContractError(
                f"({self.state_model}, {self.gap_model}) is not a standard scenario; pass custom=True"
            )
        if not self.baseline > 0:
            raise ContractError("baseline intensity must be positive")

    @property
    def gap_first(self) -> bool:
        """True when X_{k+1} is drawn before S_{k+1}."""
        return self.state_model == "S3"


def scenario(name: str, **overrides) -> ScenarioSpec:
    try:
        sm, gm = SCENARIO_TABLE[name]
    except KeyError:
        raise ContractError(f"unknown scenario {name!r}") from None
    return replace(ScenarioSpec(sm, gm, name=name), **overrides)


def gen_state(model, s, x, a, x_next=None, rng=None, noise=None, noise_sd=0.25):
    """Draw S_{k+1} given (S_k, X_k, A_k) and, for S3 only, X_{k+1}.

    ``noise`` fixes the Gaussian innovation (for instance zeros) instead of
    drawing it from ``rng``.
    """
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    sign = 2.0 * np.asarray(a, dtype=float) - 1.0
    if model == "S3":
        if x_next is None:
            raise ContractError("S3 requires the next gap time")
    elif x_next is not None:
        raise ContractError(f"{model} must not see the next gap time")
    if model == "S1":
        coef = 0.75
    elif model in ("S2", "S3"):
        coef = 0.75 - 0.25 * (x < 0.5)
        if model == "S3":
            coef = coef + 0.25 * (np.asarray(x_next, dtype=float) > 1.0)
    else:
        raise ContractError(f"unknown state model {model!r}")
    coef = np.asarray(coef, dtype=float)
    if s.ndim == max(x.ndim, sign.ndim) + 1:
        coef, sign = coef[..., None], sign[..., None]
    if noise is None:
        noise = rng.normal(0.0, noise_sd, size=s.shape)
    return coef * sign * s + noise


def linear_predictor(model, s, x, a, s_next=None) -> np.ndarray:
    """Log relative intensity of the next gap time (first state coordinate enters)."""
    s = np.asarray(s, dtype=float)
    s0 = s[..., 0] if s.ndim and s.shape[-1:] != () and s.ndim > np.ndim(x) else s
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    if model == "X3":
        if s_next is None:
            raise ContractError("X3 requires the next state")
    elif s_next is not None:
        raise ContractError(f"{model} must not see the next state")
    if model == "X1":
        return np.zeros(np.broadcast(s0, x, a).shape)
    eta = -s0 + 0.5 * x + a - 0.5 * s0 * a
    if model == "X3":
        sn = np.asarray(s_next, dtype=float)
        sn0 = sn[..., 0] if sn.ndim > np.ndim(x) else sn
        eta = eta + 0.5 * sn0
    elif model != "X2":
        raise ContractError(f"unknown gap model {model!r}")
    return eta


def intensity(model, x_next, s, x, a, s_next=None, baseline=1.0) -> np.ndarray:
    """True intensity lambda(x'; ...) under a constant baseline."""
    eta = linear_predictor(model, s, x, a, s_next if model == "X3" else None)
    return baseline * np.exp(eta) * np.ones_like(np.asarray(x_next, dtype=float))


def sample_gap(model, s, x, a, s_next=None, baseline=1.0, rng=None, e=None):
    """Draw X_{k+1} by inverting the proportional-intensity survival function.

    With a constant baseline ``c`` the cumulative intensity is c*exp(eta)*x',
    so X_{k+1} = E / (c*exp(eta)) for E ~ Exp(1).
    """
    if not baseline > 0:
        raise ContractError("baseline intensity must be positive")
    eta = linear_predictor(model, s, x, a, s_next)
    rate = baseline * np.exp(eta)
    if np.any(~(rate > 0)):
        raise ContractError("non-positive intensity")
    if e is None:
        e = rng.exponential(1.0, size=np.shape(rate))
    return e / rate


def default_reward(s, a, s_next, x_next, noise):
    s0 = s[..., 0] if s.ndim > 1 else s
    sn0 = s_next[..., 0] if s_next.ndim > 1 else s_next
    return (sn0 - s0 - 0.5 * (2.0 * a - 1.0)) * x_next + noise


def step(spec: ScenarioSpec, s, x, a, rng):
    """One transition for a batch: returns (s_next, x_next, reward)."""
    if spec.gap_first:
        x_next = sample_gap(spec.gap_model, s, x, a, baseline=spec.baseline, rng=rng)
        s_next = gen_state(spec.state_model, s, x, a, x_next=x_next, rng=rng, noise_sd=spec.state_noise_sd)
    else:
        s_next = gen_state(spec.state_model, s, x, a, rng=rng, noise_sd=spec.state_noise_sd)
        sn = s_next if spec.gap_model == "X3" else None
        x_next = sample_gap(spec.gap_model, s, x, a, s_next=sn, baseline=spec.baseline, rng=rng)
    noise = rng.normal(0.0, spec.reward_noise_sd, size=np.shape(x_next))
    reward_fn = spec.reward_fn or default_reward
    r = reward_fn(s, a, s_next, x_next, noise)
    return s_next, x_next, r


def _draw_actions(policy: PolicySpec, s, x, rng) -> np.ndarray:
    p = policy.probs(s, x)
    if p.shape[-1] == 2:
        return (rng.uniform(size=p.shape[:-1]) < p[..., 1]).astype(np.int64)
    u = rng.uniform(size=p.shape[:-1] + (1,))
    return (u > np.cumsum(p, axis=-1)).sum(axis=-1).astype(np.int64)


def gen_dataset(spec: ScenarioSpec, n: int, K: int, behavior_policy: PolicySpec | None = None,
                seed=0) -> Dataset:
    """Simulate ``n`` trajectories with exactly ``K`` transitions each.

    Initial values: S_0 ~ U[-1.5, 1.5], X_0 ~ Exp(rate 1/2), actions from the
    behaviour policy (default fair coin). States are one-dimensional.
    """
    if n < 1 or K < 1:
        raise ContractError("need n >= 1 and K >= 1")
    rng = np.random.default_rng(seed)
    behavior = behavior_policy or TabularPolicy([0.5, 0.5])
    S = np.empty((n, K + 1, 1))
    X = np.empty((n, K + 1))
    A = np.empty((n, K + 1), dtype=np.int64)
    R = np.empty((n, K))
    S[:, 0, 0] = rng.uniform(-1.5, 1.5, size=n)
    X[:, 0] = rng.exponential(2.0, size=n)
    for k in range(K + 1):
        A[:, k] = _draw_actions(behavior, S[:, k], X[:, k], rng)
        if k == K:
            break
        s_next, x_next, r = step(spec, S[:, k, 0], X[:, k], A[:, k], rng)
        S[:, k + 1, 0], X[:, k + 1], R[:, k] = s_next, x_next, r
    T = np.concatenate([np.zeros((n, 1)), np.cumsum(X[:, 1:], axis=1)], axis=1)
    trajs = [Trajectory(T[i], X[i], S[i], A[i], R[i]) for i in range(n)]
    return Dataset(trajs, d=1, m=2)


@dataclass(frozen=True)
class TruthEstimate:
    value: float
    mc_standard_error: float
    N: int
    reward_mode: str


def monte_carlo_truth(spec: ScenarioSpec, policy: PolicySpec, G: ReferenceDistribution,
                      gamma: float, N: int, tail_tol: float = 1e-6, seed=0,
                      reward_mode: str = "cumulative", batch: int = 100_000,
                      max_steps: int = 100_000) -> TruthEstimate:
    """Average discounted reward sums over ``N`` rollouts under ``policy``.

    Each rollout starts from (S_0, X_0) ~ G and stops once gamma**T < tail_tol.
    In integrated mode every reward is divided by the true intensity of the gap
    that produced it.
    """
    if not 0 < gamma < 1:
        raise ContractError("gamma must lie in (0, 1)")
    if not tail_tol > 0:
        raise ContractError("tail_tol must be positive")
    if N < 1:
        raise ContractError("N must be at least 1")
    if reward_mode not in ("cumulative", "integrated"):
        raise ContractError(f"unknown reward mode {reward_mode!r}")
    rng = np.random.default_rng(seed)
    t_max = np.log(tail_tol) / np.log(gamma)
    totals = []
    for start in range(0, N, batch):
        b = min(batch, N - start)
        s, x = sample_reference(G, rng, size=b)
        s = s[:, 0]
        T = np.zeros(b)
        total = np.zeros(b)
        active = np.ones(b, dtype=bool)
        for _ in range(max_steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            si, xi = s[idx], x[idx]
            a = _draw_actions(policy, si[:, None], xi, rng)
            s_next, x_next, r = step(spec, si, xi, a, rng)
            if reward_mode == "integrated":
                sn = s_next if spec.gap_model == "X3" else None
                r = r / intensity(spec.gap_model, x_next, si, xi, a, s_next=sn, baseline=spec.baseline)
            T[idx] += x_next
            total[idx] += gamma ** T[idx] * r
            s[idx], x[idx] = s_next, x_next
            active[idx] = T[idx] <= t_max
        else:
            raise ContractError("rollout did not reach the discount horizon")
        totals.append(total)
    totals = np.concatenate(totals)
    se = float(totals.std(ddof=1) / np.sqrt(N)) if N > 1 else float("nan")
    return TruthEstimate(float(totals.mean()), se, N, reward_mode)
