import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privplf.errors import CaseSyntaxError, CaseValidationError, SingularSystemError
from privplf.network import (
    BusClass,
    admittance_matrices,
    assemble_dlpf,
    branch_flow_map,
    load_case,
    parse_case,
    partition_system,
    region_flow_map,
)

from conftest import DATA, case_text, three_bus_w

TWO_BUS = [
    {"id": 1, "class": "slack", "v": 1.0, "theta": 0.0},
    {"id": 2, "class": "pq", "p": -0.5, "q": -0.2},
]


def reference_dlpf(net):
    """Loop-by-loop assembly of the DLPF system, independent of the matrix code."""
    ids = [b.id for b in net.buses]
    g = {(i, j): 0.0 for i in ids for j in ids}
    bfull = dict(g)
    bser = dict(g)
    for br in net.branches:
        y = 1.0 / complex(br.resistance, br.reactance)
        f, t = br.from_bus, br.to_bus
        for a, c in ((f, t), (t, f)):
            g[a, a] += y.real
            g[a, c] -= y.real
            bfull[a, a] += y.imag + br.charging_b / 2
            bfull[a, c] -= y.imag
            bser[a, a] += y.imag
            bser[a, c] -= y.imag
    for b in net.buses:
        g[b.id, b.id] += b.shunt_g
        bfull[b.id, b.id] += b.shunt_b

    def of(kind):
        return sorted(b.id for b in net.buses if b.kind is kind)

    pv, pq, w = of(BusClass.PV), of(BusClass.PQ), of(BusClass.UNCERTAIN)
    (slack,) = of(BusClass.SLACK)
    ang, vol = pv + pq + w, pq + w
    n = len(ang) + len(vol)
    a = np.zeros((n, n))
    rhs = np.zeros(n)
    fixed_v = {b.id: b.v_setpoint for b in net.buses if b.kind in (BusClass.PV, BusClass.SLACK)}
    th_r = net.bus(slack).angle_setpoint
    for r, i in enumerate(ang):
        for c, j in enumerate(ang):
            a[r, c] = -bser[i, j]
        for c, j in enumerate(vol):
            a[r, len(ang) + c] = g[i, j]
        bus = net.bus(i)
        rhs[r] = 0.0 if bus.kind is BusClass.UNCERTAIN else bus.p_inject
        rhs[r] += bser[i, slack] * th_r - sum(g[i, k] * v for k, v in fixed_v.items())
    for r, i in enumerate(vol):
        row = len(ang) + r
        for c, j in enumerate(ang):
            a[row, c] = -g[i, j]
        for c, j in enumerate(vol):
            a[row, len(ang) + c] = -bfull[i, j]
        bus = net.bus(i)
        rhs[row] = 0.0 if bus.kind is BusClass.UNCERTAIN else bus.q_inject
        rhs[row] += g[i, slack] * th_r + sum(bfull[i, k] * v for k, v in fixed_v.items())
    return a, rhs


def test_two_bus_minimal_case():
    net = parse_case(case_text(TWO_BUS, [{"from": 1, "to": 2, "r": 0.0, "x": 0.1}]))
    assert net.classification() == {"R": [1], "S": [], "L": [2], "W": []}
    sys_ = assemble_dlpf(net)
    # lossless 2-bus line: both diagonal entries are 1/x, no angle/voltage coupling
    np.testing.assert_allclose(sys_.a_matrix, [[10.0, 0.0], [0.0, 10.0]], atol=1e-12)
    theta, v = sys_.solve()
    assert theta == pytest.approx(-0.5 * 0.1)
    assert v == pytest.approx(1.0 - 0.2 * 0.1)


def test_shipped_118_case():
    net = load_case(DATA / "case118_9region.json")
    cls = net.classification()
    assert len(cls["W"]) == 9
    assert len(net.buses) - len(cls["W"]) == 118
    sys_ = assemble_dlpf(net)
    part = partition_system(sys_, net)
    assert part.h == 9
    assert sum(part.sizes()) == sys_.n
    regions_of_w = sorted(net.regions[w] for w in cls["W"])
    assert regions_of_w == list(range(1, 10))


@pytest.mark.parametrize(
    "buses,branches,message",
    [
        (
            TWO_BUS + [{"id": 3, "class": "slack"}],
            [{"from": 1, "to": 2, "x": 0.1}, {"from": 2, "to": 3, "x": 0.1}],
            "exactly one slack",
        ),
        ([{"id": 1, "class": "pq"}, {"id": 2, "class": "pq"}], [{"from": 1, "to": 2, "x": 0.1}], "no slack bus"),
        (TWO_BUS + [{"id": 3, "class": "pq"}], [{"from": 1, "to": 2, "x": 0.1}], "disconnected graph"),
        (TWO_BUS, [{"from": 1, "to": 2, "r": 0.1, "x": 0.0}], "zero reactance"),
        (TWO_BUS, [{"from": 1, "to": 1, "x": 0.1}, {"from": 1, "to": 2, "x": 0.1}], "self-loop"),
        (TWO_BUS, [{"from": 1, "to": 7, "x": 0.1}], "missing bus"),
        ([{"id": 1, "class": "slack", "v": 0.0}], [], "voltage setpoint"),
    ],
)
def test_validation_errors(buses, branches, message):
    with pytest.raises(CaseValidationError, match=message):
        parse_case(case_text(buses, branches))


def test_unknown_keys_rejected():
    text = json.dumps({"buses": TWO_BUS, "branches": [], "extra": 1})
    with pytest.raises(CaseValidationError, match="unknown top-level"):
        parse_case(text)
    bad_bus = [dict(TWO_BUS[0], colour="red"), TWO_BUS[1]]
    with pytest.raises(CaseValidationError, match="unknown keys"):
        parse_case(case_text(bad_bus, [{"from": 1, "to": 2, "x": 0.1}]))


def test_syntax_error_has_location():
    with pytest.raises(CaseSyntaxError) as info:
        parse_case('{\n  "buses": [\n  }')
    assert info.value.line == 3
    assert info.value.column is not None


def test_assembly_matches_loop_reference(case6):
    net, sys_, _ = case6
    a, rhs = reference_dlpf(net)
    np.testing.assert_allclose(sys_.a_matrix, a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sys_.rhs_base, rhs, rtol=0, atol=1e-12)


def test_three_bus_solve_matches_direct():
    net = three_bus_w()
    sys_ = assemble_dlpf(net)
    a, rhs = reference_dlpf(net)
    pw, qw = np.array([0.37]), np.array([0.12])
    rhs = rhs.copy()
    rhs[sys_.w_p_rows] += pw
    rhs[sys_.w_q_rows] += qw
    np.testing.assert_allclose(sys_.solve(pw, qw), np.linalg.solve(a, rhs), rtol=0, atol=1e-12)


def test_lossless_case_reduces_to_dc_flow():
    # with r = 0 and no shunts the angle rows are plain DC power flow
    buses = [
        {"id": 1, "class": "slack"},
        {"id": 2, "class": "pq", "p": -0.4},
        {"id": 3, "class": "pq", "p": 0.1},
        {"id": 4, "class": "pq", "p": -0.3},
    ]
    branches = [
        {"from": 1, "to": 2, "x": 0.1},
        {"from": 2, "to": 3, "x": 0.2},
        {"from": 3, "to": 4, "x": 0.25},
        {"from": 1, "to": 4, "x": 0.15},
    ]
    net = parse_case(case_text(buses, branches))
    sys_ = assemble_dlpf(net)
    x = sys_.solve()
    theta = {1: 0.0}
    theta.update({b: x[sys_.state_index(b, "angle")] for b in (2, 3, 4)})
    f_mat, f0 = branch_flow_map(net, sys_)
    flows = f_mat @ x + f0
    for k, br in enumerate(branches):
        assert flows[k] == pytest.approx((theta[br["from"]] - theta[br["to"]]) / br["x"], abs=1e-12)
    # power balance at every PQ bus
    for b in buses[1:]:
        out = sum(flows[k] for k, br in enumerate(branches) if br["from"] == b["id"])
        out -= sum(flows[k] for k, br in enumerate(branches) if br["to"] == b["id"])
        assert out == pytest.approx(b["p"], abs=1e-12)


def test_dimension_law_and_ordering(case6):
    net, sys_, _ = case6
    cls = net.classification()
    assert sys_.n == len(cls["S"]) + 2 * len(cls["L"]) + 2 * len(cls["W"])
    expected = (
        [(b, "angle") for b in cls["S"] + cls["L"] + cls["W"]]
        + [(b, "voltage") for b in cls["L"] + cls["W"]]
    )
    assert list(sys_.state_order) == expected


def test_row_blocks_reconstruct_system(case6):
    net, sys_, part = case6
    rows = np.concatenate(part.row_blocks)
    assert sorted(rows) == list(range(sys_.n))
    stacked = np.vstack([part.a_block(sys_, r) for r in range(1, part.h + 1)])
    np.testing.assert_array_equal(stacked, sys_.a_matrix[rows])
    b = np.concatenate([part.b_block(sys_, r) for r in range(1, part.h + 1)])
    np.testing.assert_array_equal(b, sys_.rhs_base[rows])


def test_single_region_partition(case6):
    net, sys_, _ = case6
    part = partition_system(sys_, net, {b: 1 for b in net.bus_ids})
    assert part.h == 1
    np.testing.assert_array_equal(part.theta_sets[0], np.arange(sys_.n))


def test_partition_errors(case6):
    net, sys_, _ = case6
    with pytest.raises(CaseValidationError, match="does not cover"):
        partition_system(sys_, net, {b: 1 for b in net.bus_ids[:-1]})
    # region 2 = {1, 3}: slack and uncertain only
    bad = {1: 2, 2: 1, 3: 2, 4: 1, 5: 1, 6: 1}
    with pytest.raises(CaseValidationError, match="no PQ bus"):
        partition_system(sys_, net, bad)


def test_determinism():
    text = (DATA / "case6_2region.json").read_text()
    s1, s2 = assemble_dlpf(parse_case(text)), assemble_dlpf(parse_case(text))
    assert s1.a_matrix.tobytes() == s2.a_matrix.tobytes()
    assert s1.rhs_base.tobytes() == s2.rhs_base.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_rhs_linearity(vals):
    from privplf.network import load_case

    net = load_case(DATA / "case6_2region.json")
    sys_ = assemble_dlpf(net)
    pw, qw = np.array(vals[:2]), np.array(vals[2:])
    diff = sys_.rhs(pw, qw) - sys_.rhs()
    expected = sys_.injection_matrix() @ np.concatenate([pw, qw])
    np.testing.assert_allclose(diff, expected, atol=1e-15)
    outside = np.setdiff1d(np.arange(sys_.n), np.concatenate([sys_.w_p_rows, sys_.w_q_rows]))
    assert np.all(diff[outside] == 0)


def test_singular_system_rejected():
    # parallel lines with opposite reactance cancel: bus 2 is electrically floating
    buses = TWO_BUS
    branches = [{"from": 1, "to": 2, "x": 0.1}, {"from": 1, "to": 2, "x": -0.1}]
    with pytest.raises(SingularSystemError):
        assemble_dlpf(parse_case(case_text(buses, branches)))


def test_admittance_shunt_conventions():
    net = three_bus_w()
    g, b, bp = admittance_matrices(net)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)  # no gs shunts here
    # B' has zero row sums (no shunts); B differs by charging and bus shunts only
    np.testing.assert_allclose(bp.sum(axis=1), 0.0, atol=1e-12)
    extra = np.diag(b - bp)
    np.testing.assert_allclose(extra, [0.015 + 0.005, 0.015 + 0.02, 0.005], atol=1e-12)


def test_region_flows_use_own_states(case6):
    net, sys_, part = case6
    for r in (1, 2):
        f_mat, f0, idx = region_flow_map(net, sys_, part, r)
        assert f_mat.shape == (len(idx), len(part.theta_sets[r - 1]))
        full, full0 = branch_flow_map(net, sys_, idx)
        x = sys_.solve([0.3, 0.2], [0.1, 0.05])
        np.testing.assert_allclose(f_mat @ x[part.theta_sets[r - 1]] + f0, full @ x + full0)
