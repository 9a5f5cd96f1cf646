from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarouting.gnn import GnnParams, init_params
from sarouting.state_augmented import (
    TrainConfig,
    dual_update,
    execute,
    held_out_realization,
    held_out_realizations,
    realizations,
    knn_source,
    rollout_lagrangian,
    sample_duals,
    train,
    train_realizations,
)
from sarouting.topology import Topology, gen_random_geometric
from sarouting.traffic import FlowSet, make_flows, sample_arrival_sequence

SMALL = dict(nodes=5, flows=2, k=2, features=(2, 6, 4), taps=2, horizon=20, window=5, train_samples=4, test_samples=2)


def zero_params(features=(2, 4, 3), taps=2) -> GnnParams:
    p = init_params(features, taps, 0)
    return GnnParams.from_tensors([np.zeros_like(t) for t in p.tensors()])


def path3() -> tuple[Topology, FlowSet]:
    cap = np.zeros((3, 3))
    cap[0, 1] = cap[1, 0] = 0.8
    cap[1, 2] = cap[2, 1] = 0.6
    topo = Topology(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), cap)
    return topo, FlowSet([2], np.array([[0.3], [0.2], [0.0]]))


def test_sample_duals_deterministic():
    assert np.array_equal(sample_duals(1, 4, 2, 9), sample_duals(1, 4, 2, 9))
    # element b depends only on (seed, b)
    assert np.array_equal(sample_duals(3, 4, 2, 9)[:2], sample_duals(2, 4, 2, 9))


def test_sample_duals_law_of_large_numbers():
    mu = sample_duals(10, 100, 100, 1)
    assert mu.size == 10**5
    assert abs(mu.mean() - 0.5) < 0.01
    assert mu.min() >= 0 and mu.max() < 1


def test_sample_duals_custom_support():
    mu = sample_duals(4, 10, 10, 2, 0.0, 2.0)
    assert mu.min() >= 0 and mu.max() < 2 and mu.max() > 1


def test_rollout_single_step_zero_dual_is_utility_when_slack_nonnegative():
    topo, flows = path3()
    p = zero_params()
    value, trace = rollout_lagrangian(p, np.zeros((3, 1)), topo, flows, 1, 0.5, 3)
    # zero dual: the residual is min(g, 0), so nonnegative slack leaves only the utility
    g = trace.window_slack[0]
    util = float(np.sum(flows.source_mask * np.log(1e-6 + trace.admissions[0])))
    penalty = 0.25 * np.sum(np.minimum(g, 0.0) ** 2)
    assert value == pytest.approx(util - penalty, abs=1e-12)
    if np.all(g >= 0):
        assert value == pytest.approx(util)


def test_rollout_matches_independent_recomputation():
    topo, flows = path3()
    p = zero_params()
    mu = np.array([[0.4], [1.3], [0.0]])
    T, rho, seed = 10, 0.5, 4
    value, trace = rollout_lagrangian(p, mu, topo, flows, T, rho, seed)
    # zero parameters: every flow gets C / (K + 1) on each edge, admissions equal arrivals
    A = sample_arrival_sequence(flows, seed, T)
    a_bar = A.mean(axis=0)
    r = topo.capacity / 2
    g = np.zeros((3, 1))
    for i in range(2):
        g[i, 0] = r[i].sum() - r[:, i].sum() - a_bar[i, 0]
    util = math.log(1e-6 + a_bar[0, 0]) + math.log(1e-6 + a_bar[1, 0])
    d = np.minimum(g, mu / rho)[:2, 0]
    expected = util + float(mu[:2, 0] @ d) - rho / 2 * float(d @ d)
    assert value == pytest.approx(expected, rel=1e-12)
    assert np.allclose(trace.admissions, A * flows.source_mask)


def test_rollout_constant_stream_is_horizon_invariant():
    topo, flows = path3()
    flows = FlowSet([2], np.zeros((3, 1)))
    p = init_params((2, 4, 3), 2, 1)
    v1, _ = rollout_lagrangian(p, np.full((3, 1), 0.3), topo, flows, 5, 0.5, 0)
    v2, _ = rollout_lagrangian(p, np.full((3, 1), 0.3), topo, flows, 10, 0.5, 0)
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_rollout_rejects_bad_arguments():
    topo, flows = path3()
    with pytest.raises(ValueError):
        rollout_lagrangian(zero_params(), np.zeros((3, 1)), topo, flows, 0, 0.5, 0)
    with pytest.raises(ValueError):
        rollout_lagrangian(zero_params(), np.zeros((3, 1)), topo, flows, 5, 0.0, 0)


def test_train_zero_epochs_returns_initialization():
    cfg = TrainConfig(epochs=0, **SMALL)
    res = train(cfg)
    init = init_params(cfg.features, cfg.taps, cfg.seed)
    assert all(np.array_equal(a, b) for a, b in zip(res.params.tensors(), init.tensors()))
    assert res.history == []


def test_train_single_instance_overfits():
    cfg = TrainConfig(epochs=200, batch_size=1, train_samples=1, rho_decay=1.0, eta_theta=0.01, **{k: v for k, v in SMALL.items() if k != "train_samples"})
    res = train(cfg, fixed_duals=True)
    curve = np.array([r["lagrangian"] for r in res.history])
    windows = curve.reshape(10, 20).mean(axis=1)
    assert windows[-1] > windows[0]
    assert np.sum(np.diff(windows) > 0) >= 7


def test_train_history_and_rho_schedule(tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=2, **SMALL)
    seen = []
    res = train(cfg, progress=seen.append)
    assert len(res.history) == 6 and seen == res.history
    assert [r["rho"] for r in res.history[::2]] == pytest.approx([0.005, 0.005 * 0.97, 0.005 * 0.97**2])
    res.write_history(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "step,epoch,batch,rho,lagrangian"
    assert res.epoch_means().shape == (3,)


def test_train_deterministic():
    cfg = TrainConfig(epochs=2, batch_size=2, **SMALL)
    a, b = train(cfg), train(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.tensors(), b.params.tensors()))


def test_train_rejects_empty_sample_set():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1, **SMALL), samples=[])


def test_execute_window_count_and_initial_dual():
    t = gen_random_geometric(10, 4, 0)
    f = make_flows(10, 5, 0.1, 0)
    trace = execute(init_params((2, 32, 8), 3, 0), t, f, T=100, T0=5, eta_mu=0.5, seed=1)
    assert trace.M == 20 and trace.duals.shape == (21, 10, 5)
    assert np.all(trace.duals[0] == 0)
    assert trace.queues.shape == (101, 10, 5)


def test_execute_dual_recursion_matches_trace():
    t = gen_random_geometric(6, 2, 3)
    f = make_flows(6, 2, 0.5, 3)
    trace = execute(init_params((2, 4, 3), 2, 5), t, f, T=30, T0=3, eta_mu=0.7, seed=2)
    for m in range(trace.M):
        expected = np.maximum(trace.duals[m] - 0.7 * trace.window_slack[m], 0) * f.source_mask
        np.testing.assert_allclose(trace.duals[m + 1], expected)


def test_execute_persistent_violation_grows_dual_linearly():
    # zero parameters ignore the dual, so the slack only varies with arrivals;
    # a zero-capacity graph makes it exactly minus the window-mean arrival
    t = Topology(np.zeros((3, 2)), np.zeros((3, 3)))
    f = FlowSet([2], np.array([[1.0], [0.0], [0.0]]))
    trace = execute(zero_params(), t, f, T=20, T0=5, eta_mu=0.5, seed=0)
    A = sample_arrival_sequence(f, 0, 20)
    window_mean = A.reshape(4, 5, 3, 1).mean(axis=1)
    np.testing.assert_allclose(trace.window_slack, -window_mean * f.source_mask)
    np.testing.assert_allclose(np.diff(trace.duals[:, 0, 0]), 0.5 * window_mean[:, 0, 0])


def test_execute_feasible_window_keeps_zero_dual():
    assert np.array_equal(dual_update(np.zeros((2, 2)), np.array([[0.0, 1.0], [2.0, 0.5]]), 0.5), np.zeros((2, 2)))


def test_execute_deterministic_and_validated():
    t = gen_random_geometric(6, 2, 1)
    f = make_flows(6, 2, 0.3, 1)
    p = init_params((2, 4, 3), 2, 2)
    a, b = execute(p, t, f, 20, 5, 0.5, 3), execute(p, t, f, 20, 5, 0.5, 3)
    for name in ("admissions", "queues", "duals", "window_slack"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    with pytest.raises(ValueError):
        execute(p, t, f, 20, 3, 0.5, 3)
    with pytest.raises(ValueError):
        execute(p, t, f, 20, 5, 0.0, 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 3.0))
def test_duals_nonnegative_every_window(seed, eta):
    t = gen_random_geometric(6, 2, seed)
    f = make_flows(6, 2, 0.5, seed)
    trace = execute(init_params((2, 4, 3), 2, seed), t, f, 20, 2, eta, seed)
    assert np.all(trace.duals >= 0)
    assert np.all(trace.queues >= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 2.0), st.floats(0.0, 3.0))
def test_dual_update_monotone_in_violation(seed, eta, extra):
    rng = np.random.default_rng(seed)
    mu, g = rng.uniform(0, 2, (4, 3)), rng.normal(size=(4, 3))
    worse = g - extra
    assert np.all(dual_update(mu, worse, eta) - mu >= dual_update(mu, g, eta) - mu)


def test_trace_csv(tmp_path):
    t = gen_random_geometric(4, 2, 0)
    f = make_flows(4, 1, 0.3, 0)
    trace = execute(zero_params(), t, f, 4, 2, 0.5, 0)
    trace.write_csv(tmp_path / "s.csv", tmp_path / "w.csv")
    steps = (tmp_path / "s.csv").read_text().splitlines()
    windows = (tmp_path / "w.csv").read_text().splitlines()
    assert steps[0] == "t,node,flow,a,queue" and len(steps) == 1 + 4 * 4
    assert windows[0] == "m,node,flow,mu,slack" and len(windows) == 1 + 2 * 4


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(horizon=100, window=7)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(eta_theta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(dual_low=1.0, dual_high=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "colour": "red"})
    cfg = TrainConfig(epochs=7, features=(2, 16, 4))
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg


def same(r1, r2) -> bool:
    return (
        r1.topology == r2.topology
        and r1.arrival_seed == r2.arrival_seed
        and np.array_equal(r1.flows.destinations, r2.flows.destinations)
        and np.array_equal(r1.flows.mean_rates, r2.flows.mean_rates)
    )


def test_realization_streams():
    cfg = TrainConfig(**SMALL)
    train_set, test_set = train_realizations(cfg), held_out_realizations(cfg)
    assert len(train_set) == 4 and len(test_set) == 2
    assert same(held_out_realization(cfg, 1), test_set[1])
    assert train_set[0].topology != test_set[0].topology
    # a longer stream extends a shorter one
    src = knn_source(5, 2, 0)
    assert all(same(a, b) for a, b in zip(realizations(src, 3, 2, 0.1, 0), realizations(src, 2, 2, 0.1, 0)))
