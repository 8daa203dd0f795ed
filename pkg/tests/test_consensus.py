import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privplf.consensus import (
    AacParticipant,
    CommGraph,
    MaskedPayload,
    MessageBus,
    NoiseSchedule,
    aac_run,
    accelerate,
    circulant,
    metropolis,
    parse_graph,
    ring,
    rounds_for_tolerance,
    validate_graph,
    weights_for,
)
from privplf.errors import InputError


def complete(h):
    return CommGraph.from_edges(h, [(i, j) for i in range(1, h + 1) for j in range(i + 1, h + 1)])


@st.composite
def connected_graphs(draw, max_h=10):
    h = draw(st.integers(2, max_h))
    edges = set()
    for v in range(2, h + 1):  # random spanning tree
        edges.add((draw(st.integers(1, v - 1)), v))
    pairs = [(i, j) for i in range(1, h + 1) for j in range(i + 1, h + 1)]
    extra = draw(st.lists(st.sampled_from(pairs), max_size=h))
    edges.update(extra)
    return CommGraph.from_edges(h, sorted(edges))


def test_graph_parsing():
    g = parse_graph('{"h": 3, "edges": [[1, 2], [2, 3]]}')
    assert g.neighbors(1) == [0, 2]
    assert g.edges() == [(1, 2), (2, 3)]
    with pytest.raises(InputError):
        parse_graph('{"h": 3, "edges": [[1, 4]]}')
    with pytest.raises(InputError):
        parse_graph('{"h": 2, "edges": [[1, 1]]}')
    with pytest.raises(InputError):
        parse_graph('{"h": 2, "edges": [[1, 2]], "weights": []}')
    with pytest.raises(InputError, match="line 1"):
        parse_graph('{"h": 2,')


def test_validate_ring_and_circulant():
    assert validate_graph(ring(5)).ok
    assert validate_graph(ring(4)).ok
    assert validate_graph(circulant(9, [1, 2])).ok


def test_validate_star_and_small_graphs():
    star = CommGraph.from_edges(4, [(1, 2), (1, 3), (1, 4)])
    rep = validate_graph(star)
    assert rep.connected and not rep.ok
    # every leaf is a neighbor of the center whose own neighborhood the center sees entirely
    assert {(1, 2), (1, 3), (1, 4)} <= set(rep.violations)
    assert not validate_graph(CommGraph.from_edges(2, [(1, 2)])).ok
    assert not validate_graph(ring(3)).ok


def test_validate_disconnected():
    rep = validate_graph(CommGraph.from_edges(4, [(1, 2), (3, 4)]))
    assert not rep.connected
    assert "graph is not connected" in rep.lines()


def test_metropolis_examples():
    np.testing.assert_array_equal(metropolis(CommGraph.from_edges(2, [(1, 2)])), [[0.5, 0.5], [0.5, 0.5]])
    w = metropolis(CommGraph.from_edges(3, [(1, 2), (2, 3)]))
    assert w[0, 1] == pytest.approx(1 / 3)
    assert w[0, 0] == pytest.approx(2 / 3)
    assert w[1, 1] == pytest.approx(1 / 3)


@settings(max_examples=60, deadline=None)
@given(connected_graphs())
def test_metropolis_doubly_stochastic(g):
    w = metropolis(g)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-14)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_array_equal(w, w.T)
    assert np.all((w >= 0) & (w <= 1))
    off = ~np.eye(g.h, dtype=bool)
    np.testing.assert_array_equal(w[off] > 0, g.adjacency[off])


def test_accelerate_examples():
    two = accelerate(metropolis(CommGraph.from_edges(2, [(1, 2)])))
    assert two.epsilon == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(two.w_star, two.w, atol=1e-15)
    k3 = accelerate(metropolis(complete(3)))
    np.testing.assert_allclose(k3.w, np.full((3, 3), 1 / 3), atol=1e-15)
    assert k3.epsilon == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(connected_graphs())
def test_accelerated_contracts_disagreement(g):
    wm = weights_for(g)
    np.testing.assert_allclose(wm.w_star.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(wm.w_star, wm.w_star.T, atol=1e-15)
    assert wm.disagreement_rate(True) <= wm.disagreement_rate(False) + 1e-12


def test_aac_constant_is_fixed_point():
    wm = weights_for(ring(5))
    c = np.array([[1.5, -2.0]])
    out = aac_run([c] * 5, wm, NoiseSchedule(rho=0.0), rounds=20)
    for y in out:
        np.testing.assert_allclose(y, c, atol=1e-14)


def test_aac_two_agents_one_round():
    wm = weights_for(CommGraph.from_edges(2, [(1, 2)]))
    out = aac_run([np.array([0.0]), np.array([2.0])], wm, NoiseSchedule(rho=0.0), rounds=1)
    assert out[0][0] == pytest.approx(1.0) and out[1][0] == pytest.approx(1.0)


def test_aac_ring5_with_noise():
    rng = np.random.default_rng(3)
    init = [rng.normal(size=4) for _ in range(5)]
    mean = np.mean(init, axis=0)
    out = aac_run(init, weights_for(ring(5)), NoiseSchedule(1.0, 0.5, seed=9), rounds=200)
    assert max(np.max(np.abs(y - mean)) for y in out) < 1e-6


@settings(max_examples=40, deadline=None)
@given(connected_graphs(), st.integers(0, 2**31 - 1))
def test_aac_zero_noise_exact_mean(g, seed):
    rng = np.random.default_rng(seed)
    init = [rng.normal(size=3) for _ in range(g.h)]
    mean = np.mean(init, axis=0)
    out = aac_run(init, weights_for(g), NoiseSchedule(rho=0.0), rounds=500)
    assert max(np.max(np.abs(y - mean)) for y in out) < 1e-8


@settings(max_examples=30, deadline=None)
@given(connected_graphs(max_h=8), st.integers(1, 40), st.integers(0, 1000))
def test_noise_telescoping_bound(g, t, seed):
    rho, sigma = 1.0, 0.5
    rng = np.random.default_rng(seed)
    init = [rng.normal(size=2) for _ in range(g.h)]
    out = aac_run(init, weights_for(g), NoiseSchedule(rho, sigma, seed), rounds=t)
    drift = np.abs(np.sum(out, axis=0) - np.sum(init, axis=0))
    bound = g.h * rho * sigma**t / (1 - sigma)
    assert np.all(drift <= bound + 1e-12)


def test_masking_soundness():
    g = complete(4)
    wm = weights_for(g)
    rng = np.random.default_rng(1)
    init = [rng.normal(size=3) for _ in range(4)]
    rho, sigma, rounds = 1.0, 0.5, 30
    noisy, published = aac_run(init, wm, NoiseSchedule(rho, sigma, 2), rounds, record=True)
    clean = aac_run(init, wm, NoiseSchedule(0.0), rounds)
    for i in range(4):
        assert np.all(published[i][0] != init[i])
        bound = 10 * rho * sigma**rounds / (1 - sigma)
        assert np.max(np.abs(noisy[i] - clean[i])) < bound


def test_bus_only_carries_masked_payloads():
    g = ring(4)
    bus = MessageBus(g)
    with pytest.raises(TypeError):
        bus.publish(np.zeros(3))
    wm = weights_for(g)
    aac_run([np.full(2, float(i)) for i in range(4)], wm, NoiseSchedule(), 5, bus=bus)
    # one delivery per directed edge per round
    assert bus.audit() == {"MaskedPayload:aac": 5 * int(g.degrees.sum())}
    msg = bus.inbox(0)[1]
    assert isinstance(msg, MaskedPayload)
    with pytest.raises(ValueError):
        msg.value[0] = 1.0


def test_inbox_holds_only_neighbors():
    g = ring(5)
    bus = MessageBus(g)
    wm = weights_for(g)
    parts = [AacParticipant(i, np.zeros(1), wm.w_star[i], np.random.default_rng(i), 1.0, 0.5) for i in range(5)]
    for p in parts:
        bus.publish(p.publish(0))
    bus.deliver()
    assert sorted(bus.inbox(0)) == [1, 4]


def test_aac_input_checks():
    wm = weights_for(ring(4))
    with pytest.raises(InputError):
        aac_run([np.zeros(2)] * 3, wm, NoiseSchedule(), 5)
    with pytest.raises(InputError):
        aac_run([np.zeros(2)] * 3 + [np.zeros(3)], wm, NoiseSchedule(), 5)
    with pytest.raises(InputError):
        aac_run([np.zeros(2)] * 4, wm, NoiseSchedule(), 0)
    with pytest.raises(InputError):
        NoiseSchedule(rho=1.0, sigma=1.0)


def test_round_budget():
    wm = weights_for(ring(6))
    t_loose = rounds_for_tolerance(wm, 1e-6)
    t_tight = rounds_for_tolerance(wm, 1e-12)
    assert 1 <= t_loose < t_tight
    lam = wm.disagreement_rate()
    assert lam**t_tight / (1 - lam) <= 1e-12
    # noise decay can dominate the budget
    assert rounds_for_tolerance(wm, 1e-12, NoiseSchedule(1.0, 0.9)) > t_tight
    assert rounds_for_tolerance(weights_for(complete(3)), 1e-12) == 1
