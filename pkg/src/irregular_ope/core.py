"""Trajectory data model, policies and reference distributions."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One subject's observation sequence.

    ``times``, ``gaps`` and ``states`` are indexed by observation k = 0..K.
    ``actions`` holds A_0..A_{K-1} (an optional trailing A_K is kept but never
    used by the estimators) and ``rewards[k]`` is R(T_{k+1}), the reward of
    action A_k observed at the next observation time.
    """

    times: np.ndarray
    gaps: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "gaps", _frozen(self.gaps))
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "actions", _frozen(self.actions, dtype=np.int64))
        object.__setattr__(self, "rewards", _frozen(self.rewards))

    @property
    def K(self) -> int:
        return len(self.times) - 1

    @property
    def d(self) -> int:
        return self.states.shape[1]


def validate_trajectory(traj: Trajectory, m: int | None = None) -> list[str]:
    """Return a list of invariant violations (empty when the trajectory is valid)."""
    out = []
    T, X, S, A, R = traj.times, traj.gaps, traj.states, traj.actions, traj.rewards
    K = len(T) - 1
    if K < 0:
        return ["times: empty"]
    if len(X) != K + 1:
        out.append(f"gaps: expected {K + 1} values, got {len(X)}")
    if S.shape[0] != K + 1:
        out.append(f"states: expected {K + 1} rows, got {S.shape[0]}")
    if len(A) not in (K, K + 1):
        out.append(f"actions: expected {K} values, got {len(A)}")
    if len(R) != K:
        out.append(f"rewards: expected {K} values, got {len(R)}")
    if T[0] != 0:
        out.append(f"times: T_0 = {T[0]!r}, expected 0")
    for k in range(1, K + 1):
        if not T[k] > T[k - 1]:
            out.append(f"times not increasing at k={k}")
    for k in range(min(len(X), K + 1)):
        if not X[k] > 0:
            out.append(f"gap not positive at k={k}")
        if k >= 1 and abs(X[k] - (T[k] - T[k - 1])) > 1e-12:
            out.append(f"gap mismatch at k={k}")
    for name, arr in (("times", T), ("gaps", X), ("states", S), ("rewards", R)):
        if not np.all(np.isfinite(arr)):
            out.append(f"{name}: non-finite value")
    if m is not None:
        for k, a in enumerate(A):
            if not 0 <= a < m:
                out.append(f"action out of range at k={k}")
    return out


@dataclass(frozen=True)
class Transitions:
    """Flat arrays over all transitions (i, k), k = 0..K_i-1, in dataset order."""

    s: np.ndarray
    x: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    x_next: np.ndarray
    r: np.ndarray
    subject: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple
    d: int
    m: int = 2

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ContractError("dataset needs at least one trajectory")
        for i, tr in enumerate(self.trajectories):
            if tr.d != self.d:
                raise ContractError(f"trajectory {i} has state dimension {tr.d}, expected {self.d}")
        if self.n_transitions < 1:
            raise ContractError("dataset has no transitions")

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(tr.K for tr in self.trajectories)

    @cached_property
    def transitions(self) -> Transitions:
        trs = self.trajectories
        return Transitions(
            s=np.concatenate([t.states[:-1] for t in trs]),
            x=np.concatenate([t.gaps[:-1] for t in trs]),
            a=np.concatenate([t.actions[: t.K] for t in trs]),
            s_next=np.concatenate([t.states[1:] for t in trs]),
            x_next=np.concatenate([t.gaps[1:] for t in trs]),
            r=np.concatenate([t.rewards for t in trs]),
            subject=np.concatenate([np.full(t.K, i) for i, t in enumerate(trs)]),
        )

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])

    def all_gaps(self) -> np.ndarray:
        return np.concatenate([t.gaps for t in self.trajectories])


# -- policies ---------------------------------------------------------------


class PolicySpec:
    """Map (state, gap time) to a probability vector over ``m`` actions.

    Subclasses implement :meth:`probs`, which broadcasts: ``s`` has shape
    ``(..., d)``, ``x`` shape ``(...)`` and the result shape ``(..., m)``.
    """

    kind = "abstract"
    m = 2

    def probs(self, s, x) -> np.ndarray:
        raise NotImplementedError

    def grid_probs(self, s, u) -> np.ndarray:
        """pi(a | s_l, u_j) over all pairs: s (c, d), u (J,) -> (m, c, J)."""
        c, J = len(s), len(u)
        sb = np.broadcast_to(np.asarray(s, dtype=float)[:, None, :], (c, J, np.shape(s)[1]))
        return np.moveaxis(self.probs(sb, np.broadcast_to(u, (c, J))), -1, 0)

    @property
    def deterministic(self) -> bool:
        return False


@dataclass(frozen=True, eq=False)
class LinearPolicy(PolicySpec):
    """Deterministic threshold rule on alpha0 + alpha1's + alpha2 x.

    The indicator 1{score <= 0} picks ``indicator_action`` (default 1) and
    the other action is taken otherwise; a score of exactly 0 counts as <= 0.
    """

    alpha0: float
    alpha1: np.ndarray
    alpha2: float
    indicator_action: int = 1
    kind = "linear-deterministic"
    m = 2

    def __post_init__(self):
        object.__setattr__(self, "alpha1", _frozen(np.atleast_1d(self.alpha1)))
        if self.indicator_action not in (0, 1):
            raise ContractError("indicator_action must be 0 or 1")

    @classmethod
    def from_alpha(cls, alpha: Sequence[float], indicator_action: int = 1) -> "LinearPolicy":
        alpha = list(alpha)
        return cls(alpha[0], np.asarray(alpha[1:-1]), alpha[-1], indicator_action)

    @property
    def alpha(self) -> tuple:
        return (self.alpha0, *self.alpha1.tolist(), self.alpha2)

    @property
    def deterministic(self) -> bool:
        return True

    def score(self, s, x) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self.alpha0 + s @ self.alpha1 + self.alpha2 * np.asarray(x, dtype=float)

    def probs(self, s, x) -> np.ndarray:
        hit = (self.score(s, x) <= 0).astype(float)
        one = hit if self.indicator_action == 1 else 1.0 - hit
        return np.stack([1.0 - one, one], axis=-1)

    def grid_action(self, s, u) -> np.ndarray:
        """Boolean (c, J) grid: True where action 1 is taken at (s_l, u_j)."""
        base = self.alpha0 + np.asarray(s, dtype=float) @ self.alpha1
        hit = base[:, None] + self.alpha2 * np.asarray(u, dtype=float)[None, :] <= 0
        return hit if self.indicator_action == 1 else ~hit

    def grid_probs(self, s, u) -> np.ndarray:
        one = self.grid_action(s, u)
        return np.stack([~one, one]).astype(float)


@dataclass(frozen=True, eq=False)
class TabularPolicy(PolicySpec):
    """Fixed action distribution, independent of state and gap time."""

    weights: np.ndarray
    kind = "tabular-stochastic"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractError("tabular policy weights must be a probability vector")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def m(self):
        return len(self.weights)

    @property
    def deterministic(self) -> bool:
        return bool(np.isin(self.weights, (0.0, 1.0)).all())

    def probs(self, s, x) -> np.ndarray:
        shape = np.broadcast_shapes(np.shape(s)[:-1], np.shape(x))
        return np.broadcast_to(self.weights, shape + (self.m,)).copy()


@dataclass(frozen=True, eq=False)
class CallbackPolicy(PolicySpec):
    """Wrap ``fn(s, x) -> (..., m)`` probabilities."""

    fn: Callable
    m: int = 2
    kind = "callback"

    def probs(self, s, x) -> np.ndarray:
        p = np.asarray(self.fn(np.asarray(s, dtype=float), np.asarray(x, dtype=float)), dtype=float)
        if p.shape[-1] != self.m:
            raise ContractError(f"callback returned {p.shape[-1]} probabilities, expected {self.m}")
        return p


def policy_prob(policy: PolicySpec, s, x: float, a: int) -> float:
    if not 0 <= a < policy.m:
        raise DomainError(f"action {a} outside 0..{policy.m - 1}")
    if not x > 0:
        raise DomainError("gap time must be positive")
    return float(policy.probs(np.atleast_1d(np.asarray(s, dtype=float)), x)[a])


# -- reference distributions ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReferenceDistribution:
    """Uniform box over (state, gap time) or a point mass at (s, x)."""

    kind: str
    s_lo: np.ndarray | None = None
    s_hi: np.ndarray | None = None
    x_lo: float | None = None
    x_hi: float | None = None
    s_atom: np.ndarray | None = None
    x_atom: float | None = None

    @classmethod
    def uniform_box(cls, s_lo, s_hi, x_lo, x_hi) -> "ReferenceDistribution":
        s_lo, s_hi = np.atleast_1d(np.asarray(s_lo, float)), np.atleast_1d(np.asarray(s_hi, float))
        if np.any(s_lo >= s_hi) or not x_lo < x_hi or x_lo < 0:
            raise ContractError("box bounds must be strictly ordered with x_lo >= 0")
        return cls("uniform-box", _frozen(s_lo), _frozen(s_hi), float(x_lo), float(x_hi))

    @classmethod
    def point_mass(cls, s, x) -> "ReferenceDistribution":
        if not x > 0:
            raise ContractError("point-mass gap time must be positive")
        return cls("point-mass", s_atom=_frozen(np.atleast_1d(np.asarray(s, float))), x_atom=float(x))

    @property
    def d(self) -> int:
        return len(self.s_atom if self.kind == "point-mass" else self.s_lo)

    def describe(self) -> str:
        if self.kind == "point-mass":
            return f"point{self.s_atom.tolist()},{self.x_atom}"
        return f"box{self.s_lo.tolist()}x{self.s_hi.tolist()}x[{self.x_lo},{self.x_hi}]"


def sample_reference(G: ReferenceDistribution, rng: np.random.Generator, size: int | None = None):
    """Draw (s, x) from ``G``; with ``size`` returns arrays of shape (size, d) and (size,)."""
    n = 1 if size is None else size
    if G.kind == "point-mass":
        s = np.broadcast_to(G.s_atom, (n, G.d)).copy()
        x = np.full(n, G.x_atom)
    else:
        s = rng.uniform(G.s_lo, G.s_hi, size=(n, G.d))
        x = rng.uniform(G.x_lo, G.x_hi, size=n)
    if size is None:
        return s[0], float(x[0])
    return s, x
