import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irregular_ope import (
    ContractError,
    Dataset,
    DomainError,
    LinearPolicy,
    ReferenceDistribution,
    TabularPolicy,
    Trajectory,
    gen_dataset,
    scenario,
    validate_trajectory,
)
from irregular_ope.core import CallbackPolicy, policy_prob, sample_reference
from irregular_ope.io import FormatError, dumps_trajectories, loads_trajectories, read_trajectories, write_trajectories


def _traj(gaps, states=None, actions=None, rewards=None):
    gaps = np.asarray(gaps, dtype=float)
    K = len(gaps) - 1
    times = np.concatenate([[0.0], np.cumsum(gaps[1:])])
    states = np.zeros(K + 1) if states is None else states
    actions = np.zeros(K, dtype=int) if actions is None else actions
    rewards = np.zeros(K) if rewards is None else rewards
    return Trajectory(times, gaps, states, actions, rewards)


def test_trajectory_is_immutable():
    tr = _traj([1.0, 0.5, 2.0])
    with pytest.raises(ValueError):
        tr.times[0] = 3.0
    assert tr.K == 2 and tr.d == 1


def test_validate_flags_problems():
    tr = _traj([1.0, 0.5, 2.0])
    assert validate_trajectory(tr, 2) == []
    bad = Trajectory([0.0, 1.0, 0.5], [1.0, 1.0, 0.5], np.zeros(3), [0, 3], [0.0, 0.0])
    msgs = validate_trajectory(bad, 2)
    assert "times not increasing at k=2" in msgs
    assert any("gap mismatch at k=2" in m for m in msgs)
    assert any("action out of range" in m for m in msgs)


def test_dataset_transitions_use_first_K_actions():
    # trailing A_K is kept but never paired with a transition
    tr = _traj([1.0, 0.5, 2.0], states=[0.1, 0.2, 0.3], actions=[1, 0, 1], rewards=[5.0, 6.0])
    ds = Dataset([tr, tr], d=1)
    t = ds.transitions
    assert ds.n_transitions == 4
    np.testing.assert_array_equal(t.a, [1, 0, 1, 0])
    np.testing.assert_array_equal(t.r, [5.0, 6.0, 5.0, 6.0])
    np.testing.assert_array_equal(t.s_next[:2, 0], [0.2, 0.3])
    np.testing.assert_array_equal(t.x_next[:2], [0.5, 2.0])


def test_dataset_rejects_mixed_dimensions():
    a = _traj([1.0, 1.0])
    b = Trajectory([0.0, 1.0], [1.0, 1.0], np.zeros((2, 2)), [0], [0.0])
    with pytest.raises(ContractError):
        Dataset([a, b], d=1)


def test_linear_policy_indicator_and_action_choice():
    pol = LinearPolicy.from_alpha([-1.0, -1.0, 1.0], indicator_action=1)
    s, x = np.array([[0.0], [0.0]]), np.array([0.5, 2.0])
    # score = -1 - s + x: <= 0 at x = 0.5, > 0 at x = 2
    np.testing.assert_array_equal(pol.probs(s, x)[:, 1], [1.0, 0.0])
    flipped = LinearPolicy.from_alpha([-1.0, -1.0, 1.0], indicator_action=0)
    np.testing.assert_array_equal(flipped.probs(s, x)[:, 1], [0.0, 1.0])
    assert pol.deterministic


def test_grid_probs_match_pointwise_probs(rng):
    pol = LinearPolicy.from_alpha([0.2, -1.0, 0.5], indicator_action=0)
    s = rng.normal(size=(7, 1))
    u = np.linspace(0.0, 3.0, 11)
    grid = pol.grid_probs(s, u)
    for i in range(7):
        for j in range(11):
            np.testing.assert_array_equal(grid[:, i, j], pol.probs(s[i:i + 1], np.array([u[j]]))[0])


def test_tabular_and_callback_policies():
    tab = TabularPolicy([0.3, 0.7])
    assert policy_prob(tab, [0.0], 1.0, 1) == pytest.approx(0.7)
    cb = CallbackPolicy(lambda s, x: np.stack([1 - 0 * x, 0 * x], axis=-1))
    assert policy_prob(cb, [0.0], 1.0, 0) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        TabularPolicy([0.5, 0.6])


def test_reference_sampling_stays_in_box(rng):
    G = ReferenceDistribution.uniform_box([-1.0], [1.0], 0.0, 2.0)
    s, x = sample_reference(G, rng, size=1000)
    assert s.min() >= -1 and s.max() <= 1 and x.min() >= 0 and x.max() <= 2
    P = ReferenceDistribution.point_mass([0.3], 1.5)
    s, x = sample_reference(P, rng, size=3)
    np.testing.assert_array_equal(x, 1.5)


def test_reference_rejects_empty_box():
    with pytest.raises((ContractError, DomainError)):
        ReferenceDistribution.uniform_box([1.0], [-1.0], 0.0, 2.0)


def _datasets_equal(a, b):
    assert a.n == b.n and a.d == b.d and a.m == b.m
    for ta, tb in zip(a.trajectories, b.trajectories):
        for f in ("times", "gaps", "states", "actions", "rewards"):
            np.testing.assert_array_equal(getattr(ta, f), getattr(tb, f))


def test_csv_round_trip_is_exact(tmp_path):
    ds = gen_dataset(scenario("scenario2"), 7, 4, seed=3)
    path = tmp_path / "traj.csv"
    write_trajectories(ds, path)
    _datasets_equal(ds, read_trajectories(path))
    # R(T_0) is blank on the first row of every block
    lines = path.read_text().splitlines()
    assert lines[0] == "1,2"
    assert lines[1].endswith(",")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 50.0), min_size=2, max_size=6),
       st.floats(-1e6, 1e6, allow_nan=False), st.integers(0, 1))
def test_round_trip_property(gaps, reward, action):
    K = len(gaps) - 1
    tr = _traj(gaps, states=np.linspace(-1, 1, K + 1) * reward, actions=np.full(K, action),
               rewards=np.full(K, reward))
    ds = Dataset([tr], d=1)
    _datasets_equal(ds, loads_trajectories(dumps_trajectories(ds)))


def test_parser_errors():
    with pytest.raises(FormatError):
        loads_trajectories("")
    with pytest.raises(FormatError):
        loads_trajectories("1,2\n0,0.0,1.0,0.0,0\n")
    with pytest.raises(FormatError):
        loads_trajectories("1,2\n0,0.0,1.0,0.0,0,\n2,1.0,1.0,0.0,0,1.0\n")
