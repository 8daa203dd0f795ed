"""Grid case parsing, DLPF assembly and per-region row partitioning.

The decoupled linearized power flow (DLPF) used here relates nodal injections to
voltage angles and magnitudes through

    P = G V - B' theta
    Q = -G theta - B V

where ``G`` and ``B`` are the real and imaginary parts of the bus admittance
matrix (with shunts and line charging) and ``B'`` is the susceptance matrix of
the series elements only.  Moving the known slack/PV setpoints to the right-hand
side gives the square system ``A x = b`` with the state vector ordered as
``[theta_S, theta_L, theta_W, V_L, V_W]``.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CaseSyntaxError, CaseValidationError, SingularSystemError

logger = logging.getLogger(__name__)

# A with a condition number above this is treated as singular.
MAX_CONDITION = 1e13


class BusClass(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusClass
    p_inject: float = 0.0
    q_inject: float = 0.0
    v_setpoint: float = 1.0
    angle_setpoint: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    charging_b: float = 0.0

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.resistance, self.reactance)


@dataclass(frozen=True)
class PowerNetwork:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    regions: Mapping[int, int] = field(default_factory=dict)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index_of(bus_id)]

    def index_of(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except AttributeError:
            object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})
            return self._index[bus_id]

    def ids_of(self, kind: BusClass) -> list[int]:
        return sorted(b.id for b in self.buses if b.kind is kind)

    def classification(self) -> dict[str, list[int]]:
        """Bus ids per DLPF class: R (slack), S (PV), L (PQ), W (uncertain)."""
        return {
            "R": self.ids_of(BusClass.SLACK),
            "S": self.ids_of(BusClass.PV),
            "L": self.ids_of(BusClass.PQ),
            "W": self.ids_of(BusClass.UNCERTAIN),
        }


_TOP_KEYS = {"base_mva", "buses", "branches", "regions"}
_BUS_KEYS = {"id", "class", "p", "q", "v", "theta", "gs", "bs"}
_BRANCH_KEYS = {"from", "to", "r", "x", "b"}


def _num(obj: Mapping, key: str, default: float, where: str) -> float:
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseValidationError(f"{where}: field '{key}' must be a number")
    value = float(value)
    if not np.isfinite(value):
        raise CaseValidationError(f"{where}: field '{key}' is not finite")
    return value


def parse_case(text: str) -> PowerNetwork:
    """Parse and validate a JSON case description."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(raw, dict):
        raise CaseSyntaxError("case file must contain a JSON object", 1, 1)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise CaseValidationError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("buses", "branches"):
        if not isinstance(raw.get(key), list):
            raise CaseValidationError(f"'{key}' must be an array")

    base_mva = _num(raw, "base_mva", 100.0, "case")
    if base_mva <= 0:
        raise CaseValidationError("base_mva must be positive")

    buses = []
    for k, item in enumerate(raw["buses"]):
        where = f"buses[{k}]"
        if not isinstance(item, dict):
            raise CaseValidationError(f"{where} must be an object")
        bad = set(item) - _BUS_KEYS
        if bad:
            raise CaseValidationError(f"{where}: unknown keys {sorted(bad)}")
        bus_id = item.get("id")
        if isinstance(bus_id, bool) or not isinstance(bus_id, int):
            raise CaseValidationError(f"{where}: 'id' must be an integer")
        try:
            kind = BusClass(item.get("class"))
        except ValueError:
            raise CaseValidationError(
                f"{where}: 'class' must be one of slack, pv, pq, uncertain"
            ) from None
        buses.append(
            Bus(
                id=bus_id,
                kind=kind,
                p_inject=_num(item, "p", 0.0, where),
                q_inject=_num(item, "q", 0.0, where),
                v_setpoint=_num(item, "v", 1.0, where),
                angle_setpoint=_num(item, "theta", 0.0, where),
                shunt_g=_num(item, "gs", 0.0, where),
                shunt_b=_num(item, "bs", 0.0, where),
            )
        )

    branches = []
    for k, item in enumerate(raw["branches"]):
        where = f"branches[{k}]"
        if not isinstance(item, dict):
            raise CaseValidationError(f"{where} must be an object")
        bad = set(item) - _BRANCH_KEYS
        if bad:
            raise CaseValidationError(f"{where}: unknown keys {sorted(bad)}")
        ends = item.get("from"), item.get("to")
        if any(isinstance(e, bool) or not isinstance(e, int) for e in ends):
            raise CaseValidationError(f"{where}: 'from' and 'to' must be integers")
        branches.append(
            Branch(
                from_bus=ends[0],
                to_bus=ends[1],
                resistance=_num(item, "r", 0.0, where),
                reactance=_num(item, "x", 0.0, where),
                charging_b=_num(item, "b", 0.0, where),
            )
        )

    regions = {}
    raw_regions = raw.get("regions", {})
    if not isinstance(raw_regions, dict):
        raise CaseValidationError("'regions' must be an object mapping bus id to region")
    for key, value in raw_regions.items():
        try:
            bus_id = int(key)
        except ValueError:
            raise CaseValidationError(f"regions: key '{key}' is not a bus id") from None
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise CaseValidationError(f"regions: bus {bus_id} has invalid region {value!r}")
        regions[bus_id] = value

    net = PowerNetwork(
        buses=tuple(sorted(buses, key=lambda b: b.id)),
        branches=tuple(branches),
        base_mva=base_mva,
        regions=regions,
    )
    validate_network(net)
    return net


def load_case(path: str | Path) -> PowerNetwork:
    return parse_case(Path(path).read_text(encoding="utf-8"))


def validate_network(net: PowerNetwork) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    if not ids:
        raise CaseValidationError("case has no buses")
    n_slack = sum(b.kind is BusClass.SLACK for b in net.buses)
    if n_slack == 0:
        raise CaseValidationError("no slack bus")
    if n_slack > 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {n_slack}")
    for b in net.buses:
        if b.kind in (BusClass.SLACK, BusClass.PV) and b.v_setpoint <= 0:
            raise CaseValidationError(f"bus {b.id}: voltage setpoint must be positive")
    known = set(ids)
    for k, br in enumerate(net.branches):
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseValidationError(
                f"branch {k} ({br.from_bus}-{br.to_bus}) references a missing bus"
            )
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k} is a self-loop on bus {br.from_bus}")
        if br.reactance == 0:
            raise CaseValidationError(f"branch {k} ({br.from_bus}-{br.to_bus}) has zero reactance")
    if not _is_connected(net):
        raise CaseValidationError("disconnected graph")
    unknown = set(net.regions) - known
    if unknown:
        raise CaseValidationError(f"regions reference missing buses {sorted(unknown)}")


def _is_connected(net: PowerNetwork) -> bool:
    n = len(net.buses)
    if n == 1:
        return True
    rows = [net.index_of(br.from_bus) for br in net.branches]
    cols = [net.index_of(br.to_bus) for br in net.branches]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def admittance_matrices(net: PowerNetwork) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(G, B, B')`` indexed by bus position in ``net.buses``."""
    n = len(net.buses)
    y_full = np.zeros((n, n), dtype=complex)
    y_series = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        if br.reactance == 0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} has zero reactance")
        f, t = net.index_of(br.from_bus), net.index_of(br.to_bus)
        y = br.series_admittance
        for ys in (y_series, y_full):
            ys[f, f] += y
            ys[t, t] += y
            ys[f, t] -= y
            ys[t, f] -= y
        y_full[f, f] += 0.5j * br.charging_b
        y_full[t, t] += 0.5j * br.charging_b
    for k, bus in enumerate(net.buses):
        y_full[k, k] += complex(bus.shunt_g, bus.shunt_b)
    return y_full.real.copy(), y_full.imag.copy(), y_series.imag.copy()


@dataclass(frozen=True)
class DlpfSystem:
    """Dense DLPF system ``A x = rhs_base + E [P_W; Q_W]``."""

    a_matrix: np.ndarray
    state_order: tuple[tuple[int, str], ...]
    rhs_base: np.ndarray
    w_bus_order: tuple[int, ...]
    condition: float = float("nan")

    @property
    def n(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def m(self) -> int:
        return len(self.w_bus_order)

    def state_index(self, bus_id: int, quantity: str) -> int:
        try:
            return self._state_pos[(bus_id, quantity)]
        except AttributeError:
            object.__setattr__(
                self, "_state_pos", {s: k for k, s in enumerate(self.state_order)}
            )
            return self._state_pos[(bus_id, quantity)]

    @property
    def w_p_rows(self) -> np.ndarray:
        return np.array([self.state_index(b, "angle") for b in self.w_bus_order], dtype=int)

    @property
    def w_q_rows(self) -> np.ndarray:
        return np.array([self.state_index(b, "voltage") for b in self.w_bus_order], dtype=int)

    def injection_matrix(self) -> np.ndarray:
        """Placement ``E`` (N x 2M) of ``[P_W; Q_W]`` into the right-hand side."""
        e = np.zeros((self.n, 2 * self.m))
        e[self.w_p_rows, np.arange(self.m)] = 1.0
        e[self.w_q_rows, self.m + np.arange(self.m)] = 1.0
        return e

    def rhs(self, p_w=None, q_w=None) -> np.ndarray:
        b = self.rhs_base.copy()
        if p_w is not None:
            b[self.w_p_rows] += np.asarray(p_w, dtype=float)
        if q_w is not None:
            b[self.w_q_rows] += np.asarray(q_w, dtype=float)
        return b

    def solve(self, p_w=None, q_w=None) -> np.ndarray:
        return np.linalg.solve(self.a_matrix, self.rhs(p_w, q_w))


def assemble_dlpf(net: PowerNetwork) -> DlpfSystem:
    """Build the DLPF matrix ``A`` and the injection-independent right-hand side."""
    g, b, bp = admittance_matrices(net)
    cls = net.classification()
    slack = net.bus(cls["R"][0])
    angle_buses = cls["S"] + cls["L"] + cls["W"]
    volt_buses = cls["L"] + cls["W"]
    state_order = tuple([(i, "angle") for i in angle_buses] + [(i, "voltage") for i in volt_buses])
    n = len(state_order)
    if n == 0:
        raise CaseValidationError("case has no unknown states")

    ang = [net.index_of(i) for i in angle_buses]
    vol = [net.index_of(i) for i in volt_buses]
    r = net.index_of(slack.id)
    pv = [net.index_of(i) for i in cls["S"]]
    v_pv = np.array([net.bus(i).v_setpoint for i in cls["S"]])

    a = np.empty((n, n))
    # active-power rows, one per angle state
    a[: len(ang), : len(ang)] = -bp[np.ix_(ang, ang)]
    a[: len(ang), len(ang) :] = g[np.ix_(ang, vol)]
    # reactive-power rows, one per voltage state
    a[len(ang) :, : len(ang)] = -g[np.ix_(vol, ang)]
    a[len(ang) :, len(ang) :] = -b[np.ix_(vol, vol)]

    p_const = np.array([net.buses[k].p_inject for k in ang])
    p_const += bp[ang, r] * slack.angle_setpoint - g[ang, r] * slack.v_setpoint
    if pv:
        p_const -= g[np.ix_(ang, pv)] @ v_pv
    q_const = np.array([net.buses[k].q_inject for k in vol])
    q_const += g[vol, r] * slack.angle_setpoint + b[vol, r] * slack.v_setpoint
    if pv:
        q_const += b[np.ix_(vol, pv)] @ v_pv
    rhs = np.concatenate([p_const, q_const])

    w_ids = set(cls["W"])
    w_pos = [k for k, bid in enumerate(angle_buses) if bid in w_ids]
    w_qpos = [len(ang) + k for k, bid in enumerate(volt_buses) if bid in w_ids]
    # W-bus injections are random; only the setpoint contribution stays in rhs_base
    rhs[w_pos] -= [net.bus(i).p_inject for i in cls["W"]]
    rhs[w_qpos] -= [net.bus(i).q_inject for i in cls["W"]]

    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystemError(f"DLPF matrix is singular (condition estimate {cond:.3e})", cond)
    a.setflags(write=False)
    rhs.setflags(write=False)
    return DlpfSystem(
        a_matrix=a,
        state_order=state_order,
        rhs_base=rhs,
        w_bus_order=tuple(cls["W"]),
        condition=cond,
    )


def w_injection_means(net: PowerNetwork, sys: DlpfSystem) -> np.ndarray:
    """Deterministic ``[P_W; Q_W]`` read from the case (Monte Carlo fallback mean)."""
    p = [net.bus(i).p_inject for i in sys.w_bus_order]
    q = [net.bus(i).q_inject for i in sys.w_bus_order]
    return np.array(p + q, dtype=float)


@dataclass(frozen=True)
class RegionPartition:
    region_of_bus: Mapping[int, int]
    h: int
    row_blocks: tuple[np.ndarray, ...]
    theta_sets: tuple[np.ndarray, ...]

    def sizes(self) -> list[int]:
        return [len(r) for r in self.row_blocks]

    def region_buses(self, region: int) -> list[int]:
        return sorted(b for b, r in self.region_of_bus.items() if r == region)

    def a_block(self, sys: DlpfSystem, region: int) -> np.ndarray:
        return sys.a_matrix[self.row_blocks[region - 1]]

    def b_block(self, sys: DlpfSystem, region: int) -> np.ndarray:
        return sys.rhs_base[self.row_blocks[region - 1]]


def partition_system(
    sys: DlpfSystem, net: PowerNetwork, region_map: Mapping[int, int] | None = None
) -> RegionPartition:
    """Assign every row of ``A`` (and every state) to the ISO owning its bus.

    Regions are numbered ``1..H``.  Row ``k`` and state ``k`` both belong to the
    bus in ``sys.state_order[k]``, so row blocks and state sets coincide.
    """
    region_map = dict(net.regions if region_map is None else region_map)
    missing = [b for b in net.bus_ids if b not in region_map]
    if missing:
        raise CaseValidationError(f"region map does not cover buses {missing}")
    labels = sorted(set(region_map[b] for b in net.bus_ids))
    h = len(labels)
    if labels != list(range(1, h + 1)):
        raise CaseValidationError(f"regions must be numbered 1..H, got {labels}")
    for reg in labels:
        if not any(net.bus(b).kind is BusClass.PQ for b in net.bus_ids if region_map[b] == reg):
            raise CaseValidationError(f"region {reg} has no PQ bus")
    owner = np.array([region_map[bus] for bus, _ in sys.state_order])
    blocks = tuple(np.flatnonzero(owner == reg) for reg in labels)
    for blk in blocks:
        blk.setflags(write=False)
    return RegionPartition(
        region_of_bus={b: region_map[b] for b in net.bus_ids},
        h=h,
        row_blocks=blocks,
        theta_sets=blocks,
    )


def branch_flow_map(
    net: PowerNetwork, sys: DlpfSystem, branches: Sequence[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Affine map ``(F, f0)`` from the full state to DLPF active branch flows.

    The from-end flow of a branch with series admittance ``g + jb`` is
    ``g (V_f - V_t) - b (theta_f - theta_t)``; fixed angles and voltages of
    slack and PV buses fold into ``f0``.
    """
    idx = range(len(net.branches)) if branches is None else branches
    idx = list(idx)
    f_mat = np.zeros((len(idx), sys.n))
    f0 = np.zeros(len(idx))
    for row, k in enumerate(idx):
        br = net.branches[k]
        y = br.series_admittance
        for bus_id, sign in ((br.from_bus, 1.0), (br.to_bus, -1.0)):
            bus = net.bus(bus_id)
            coef_v, coef_a = sign * y.real, -sign * y.imag
            if bus.kind is BusClass.SLACK:
                f0[row] += coef_a * bus.angle_setpoint + coef_v * bus.v_setpoint
                continue
            f_mat[row, sys.state_index(bus_id, "angle")] += coef_a
            if bus.kind is BusClass.PV:
                f0[row] += coef_v * bus.v_setpoint
            else:
                f_mat[row, sys.state_index(bus_id, "voltage")] += coef_v
    return f_mat, f0


def region_branches(net: PowerNetwork, partition: RegionPartition, region: int) -> list[int]:
    """Indices of branches with both ends inside ``region``."""
    own = partition.region_of_bus
    return [
        k
        for k, br in enumerate(net.branches)
        if own[br.from_bus] == region and own[br.to_bus] == region
    ]


def region_flow_map(
    net: PowerNetwork, sys: DlpfSystem, partition: RegionPartition, region: int
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Flow map restricted to a region's own states (columns ``theta_sets[region-1]``)."""
    idx = region_branches(net, partition, region)
    f_mat, f0 = branch_flow_map(net, sys, idx)
    cols = partition.theta_sets[region - 1]
    outside = np.setdiff1d(np.arange(sys.n), cols)
    assert not np.any(f_mat[:, outside]), "intra-region flow touches foreign states"
    return f_mat[:, cols], f0, idx


def state_kinds(sys: DlpfSystem, indices: Sequence[int] | None = None) -> np.ndarray:
    """Array of ``'angle'``/``'voltage'`` labels for the given state indices."""
    kinds = np.array([q for _, q in sys.state_order])
    return kinds if indices is None else kinds[np.asarray(indices)]
