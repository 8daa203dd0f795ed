"""End-to-end privacy-preserving distributed probabilistic load flow.

Every ISO is an :class:`IsoAgent` holding only its own rows of the DLPF model.
The pipeline per agent is:

 1. form ``A_i`` and ``B_i`` from public observations (the plan ``Pi``)
 2. solve ``A X = B`` by distributed APC
 3. recover ``Lambda = X Pi^{-1} = [alpha beta eps gamma']``
 4-9. obtain its own constant vector ``gamma_i`` by an AAC run with a fake input
 10-12. push the injection mixture through ``x_i = [alpha_i beta_i] z + gamma_i``
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .apc import ApcAgent, ApcConfig, ApcResult, run_apc
from .consensus import (
    AacParticipant,
    CommGraph,
    MessageBus,
    NoiseSchedule,
    WeightMatrices,
    rounds_for_tolerance,
    run_rounds,
    validate_graph,
    weights_for,
)
from .errors import InputError, NumericalError, PlfError, ProtocolError
from .gmm import AffineMap, Gmm, fit_em, transform
from .network import BusClass, DlpfSystem, PowerNetwork, RegionPartition

logger = logging.getLogger(__name__)

DEFAULT_POWER_FACTOR = 0.95


class PrivacyWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class AugmentedPlan:
    """Public observations stacked into ``Pi`` (last row all ones)."""

    pw_obs: np.ndarray
    qw_obs: np.ndarray
    pl_obs: np.ndarray
    pi_matrix: np.ndarray
    condition: float
    condition_bound: float = 1e8
    attempts: int = 1
    artificial_rows: tuple[str, ...] = ()

    @property
    def m(self) -> int:
        return self.pw_obs.shape[0]

    @property
    def h(self) -> int:
        return self.pl_obs.shape[0]

    @property
    def m_hat(self) -> int:
        return self.pi_matrix.shape[0]

    def to_dict(self) -> dict:
        return {
            "pi": self.pi_matrix.tolist(),
            "condition": self.condition,
            "attempts": self.attempts,
            "artificial_rows": list(self.artificial_rows),
        }


def _stack_pi(pw, qw, pl) -> np.ndarray:
    return np.vstack([pw, qw, pl, np.ones((1, pw.shape[1]))])


def build_plan(
    m: int,
    h: int,
    seed: int,
    *,
    observations: np.ndarray | None = None,
    gmm: Gmm | None = None,
    pl_range: tuple[float, float] = (-1.0, 1.0),
    condition_bound: float = 1e8,
    max_retries: int = 20,
) -> AugmentedPlan:
    """Pick ``2M + H + 1`` public observations and assemble ``Pi``.

    ``observations`` holds historical ``[P_W, Q_W]`` rows (preferred source);
    otherwise observations are drawn from ``gmm``.  When the source is
    rank-deficient (e.g. reactive power tied to active power by a constant
    power factor) the offending block is replaced by public artificial values
    spanning the observed range, since ``Pi`` must be invertible.
    """
    if m < 1 or h < 1:
        raise InputError("need at least one W bus and one ISO")
    m_hat = 2 * m + h + 1
    if observations is None and gmm is None:
        raise InputError("build_plan needs historical observations or an injection GMM")
    if observations is not None:
        pool = np.asarray(observations, dtype=float)
        if pool.ndim != 2 or pool.shape[1] != 2 * m:
            raise InputError(f"observations must have {2 * m} columns (P_W then Q_W)")
        if pool.shape[0] < m_hat:
            raise InputError(f"need at least {m_hat} observations, got {pool.shape[0]}")
    elif gmm.dim != 2 * m:
        raise InputError(f"injection GMM has dimension {gmm.dim}, expected {2 * m}")

    lo, hi = pl_range
    last_cond = float("inf")
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        if observations is not None:
            rows = rng.choice(pool.shape[0], size=m_hat, replace=False)
            obs = pool[rows]
            if len(np.unique(obs, axis=0)) < m_hat:
                logger.debug("plan attempt %d: duplicate observations", attempt)
                continue
            source = pool
        else:
            from .gmm import sample

            obs = sample(gmm, m_hat, rng)
            source = obs
        pw, qw = obs[:, :m].T.copy(), obs[:, m:].T.copy()
        artificial = []
        centred = source - source.mean(axis=0)
        if np.linalg.matrix_rank(centred) < 2 * m:
            replace = [("Q_W", qw, source[:, m:])]
            if np.linalg.matrix_rank(centred[:, :m]) < m:
                replace.insert(0, ("P_W", pw, source[:, :m]))
            for name, block, cols in replace:
                lo_b, hi_b = cols.min(axis=0), cols.max(axis=0)
                flat = hi_b - lo_b <= 0
                lo_b = np.where(flat, -1.0, lo_b)
                hi_b = np.where(flat, 1.0, hi_b)
                block[:] = rng.uniform(lo_b[:, None], hi_b[:, None], size=block.shape)
                artificial.append(name)
        pl = rng.uniform(lo, hi, size=(h, m_hat))
        pi = _stack_pi(pw, qw, pl)
        cond = float(np.linalg.cond(pi))
        last_cond = cond
        if np.isfinite(cond) and cond < condition_bound:
            for arr in (pw, qw, pl, pi):
                arr.setflags(write=False)
            return AugmentedPlan(
                pw_obs=pw,
                qw_obs=qw,
                pl_obs=pl,
                pi_matrix=pi,
                condition=cond,
                condition_bound=condition_bound,
                attempts=attempt + 1,
                artificial_rows=tuple(artificial),
            )
        logger.debug("plan attempt %d: condition %.3e", attempt, cond)
    raise NumericalError(
        f"could not build a well-conditioned plan in {max_retries} attempts "
        f"(last condition {last_cond:.3e}, bound {condition_bound:.1e})"
    )


@dataclass(frozen=True)
class IsoSecret:
    p_tilde: float
    p_hat: float
    chosen_bus: int
    chosen_row: int


def choose_secret(
    net: PowerNetwork,
    sys: DlpfSystem,
    partition: RegionPartition,
    region: int,
    rng: np.random.Generator,
    spread: float = 5.0,
) -> IsoSecret:
    """Pick the region's PQ bus with the largest ``|p|`` and a random fake value."""
    pq = [b for b in partition.region_buses(region) if net.bus(b).kind is BusClass.PQ]
    if not pq:
        raise InputError(f"region {region} has no PQ bus")
    bus = min(pq, key=lambda b: (-abs(net.bus(b).p_inject), b))
    row = sys.state_index(bus, "angle")
    p_tilde = float(sys.rhs_base[row])
    while True:
        p_hat = float(rng.uniform(p_tilde - spread, p_tilde + spread))
        if abs(p_hat - p_tilde) > 1e-6:
            break
    return IsoSecret(p_tilde=p_tilde, p_hat=p_hat, chosen_bus=bus, chosen_row=row)


@dataclass(frozen=True, eq=False)
class LambdaDecomposition:
    alpha: np.ndarray
    beta: np.ndarray
    eps_matrix: np.ndarray
    gamma_prime: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.alpha, self.beta, self.eps_matrix, self.gamma_prime[:, None]])


def solve_lambda(x_est: np.ndarray, plan: AugmentedPlan) -> LambdaDecomposition:
    """``Lambda = X Pi^{-1}`` split into ``alpha | beta | eps | gamma'``."""
    pi = plan.pi_matrix
    if plan.condition >= plan.condition_bound:
        raise NumericalError(f"plan matrix is ill-conditioned ({plan.condition:.3e})")
    lam = np.linalg.solve(pi.T, np.asarray(x_est).T).T
    m, h = plan.m, plan.h
    return LambdaDecomposition(
        alpha=lam[:, :m],
        beta=lam[:, m : 2 * m],
        eps_matrix=lam[:, 2 * m : 2 * m + h],
        gamma_prime=lam[:, -1],
    )


@dataclass
class GammaRecovery:
    psi: np.ndarray
    gamma_i: np.ndarray


def fake_initial(eps_column: np.ndarray, theta: np.ndarray, secret: IsoSecret) -> np.ndarray:
    """``y_i(0)``: ``eps_ni * P~_i`` off the agent's own states, ``eps_ni * P^_i`` on them."""
    y0 = eps_column * secret.p_tilde
    y0[theta] = eps_column[theta] * secret.p_hat
    return y0


def correct_psi(
    y_limit: np.ndarray, eps_column: np.ndarray, theta: np.ndarray, secret: IsoSecret, h: int
) -> np.ndarray:
    """Undo the agent's own fake input on its own rows."""
    e = eps_column[theta]
    return y_limit[theta] - e * secret.p_hat / h + e * secret.p_tilde / h


def build_b_block(
    sys: DlpfSystem,
    partition: RegionPartition,
    plan: AugmentedPlan,
    region: int,
    secret: IsoSecret,
) -> np.ndarray:
    """Region ``i``'s rows of ``[b(1) ... b(M^)]``."""
    local = _LocalRows.extract(sys, partition, region, secret)
    return local.b_block(plan)


@dataclass(frozen=True, eq=False)
class _LocalRows:
    """What an ISO knows about its own right-hand side."""

    b_local: np.ndarray
    w_p: tuple[tuple[int, int], ...]  # (local row, W position)
    w_q: tuple[tuple[int, int], ...]
    chosen_local: int
    region: int

    @classmethod
    def extract(cls, sys, partition, region, secret):
        rows = partition.row_blocks[region - 1]
        pos = {int(r): k for k, r in enumerate(rows)}
        w_p = tuple((pos[int(r)], k) for k, r in enumerate(sys.w_p_rows) if int(r) in pos)
        w_q = tuple((pos[int(r)], k) for k, r in enumerate(sys.w_q_rows) if int(r) in pos)
        if secret.chosen_row not in pos:
            raise InputError(f"secret bus {secret.chosen_bus} is not in region {region}")
        return cls(
            b_local=np.array(sys.rhs_base[rows]),
            w_p=w_p,
            w_q=w_q,
            chosen_local=pos[secret.chosen_row],
            region=region,
        )

    def b_block(self, plan: AugmentedPlan) -> np.ndarray:
        out = np.repeat(self.b_local[:, None], plan.m_hat, axis=1)
        for local, k in self.w_p:
            out[local] += plan.pw_obs[k]
        for local, k in self.w_q:
            out[local] += plan.qw_obs[k]
        out[self.chosen_local] = plan.pl_obs[self.region - 1]
        return out


class IsoAgent:
    """One ISO: private model rows, secrets, and everything derived from them."""

    def __init__(
        self,
        region: int,
        h: int,
        theta: np.ndarray,
        a_block: np.ndarray,
        local: _LocalRows,
        secret: IsoSecret,
        rng: np.random.Generator,
        state_offset: np.ndarray | None = None,
    ):
        self.region = region
        self.index = region - 1
        self.h = h
        self.theta = np.array(theta)
        self.a_block = np.array(a_block)
        self._local = local
        self.secret = secret
        self.rng = rng
        self.state_offset = None if state_offset is None else np.array(state_offset, dtype=float)
        self.apc: ApcAgent | None = None
        self.lam: LambdaDecomposition | None = None
        self.gamma_i: np.ndarray | None = None
        self.alpha_i: np.ndarray | None = None
        self.beta_i: np.ndarray | None = None
        self.output: Gmm | None = None

    @classmethod
    def from_system(cls, sys, partition, region, secret, rng, state_offset=None) -> "IsoAgent":
        rows = partition.row_blocks[region - 1]
        offset = None if state_offset is None else np.asarray(state_offset)[rows]
        return cls(
            region=region,
            h=partition.h,
            theta=rows,
            a_block=sys.a_matrix[rows],
            local=_LocalRows.extract(sys, partition, region, secret),
            secret=secret,
            rng=rng,
            state_offset=offset,
        )

    # step 1
    def form_blocks(self, plan: AugmentedPlan) -> None:
        self.apc = ApcAgent(self.index, self.a_block, self._local.b_block(plan), self.rng)

    # step 3
    def acquire_lambda(self, plan: AugmentedPlan) -> None:
        self.lam = solve_lambda(self.apc.x_local, plan)

    # steps 4-5
    def fake_input(self) -> np.ndarray:
        return fake_initial(self.lam.eps_matrix[:, self.index], self.theta, self.secret)

    # steps 8-9
    def finish_gamma(self, y_limit: np.ndarray) -> GammaRecovery:
        col = self.lam.eps_matrix[:, self.index]
        psi = correct_psi(y_limit, col, self.theta, self.secret, self.h)
        gamma = self.lam.gamma_prime[self.theta] + self.h * psi
        if self.state_offset is not None:
            gamma = gamma + self.state_offset
        self.gamma_i = gamma
        return GammaRecovery(psi=psi, gamma_i=gamma)

    # steps 10-12
    def derive_plf(self, injection: Gmm) -> Gmm:
        self.alpha_i = self.lam.alpha[self.theta]
        self.beta_i = self.lam.beta[self.theta]
        amap = AffineMap(np.hstack([self.alpha_i, self.beta_i]), self.gamma_i)
        self.output = transform(injection, amap)
        return self.output

    def private_arrays(self) -> dict[str, np.ndarray]:
        """Every array reachable from this agent's state, keyed by attribute path."""
        found = {}

        def walk(obj, prefix, depth):
            if depth > 3:
                return
            if isinstance(obj, np.ndarray):
                found[prefix] = obj
            elif isinstance(obj, (IsoAgent, ApcAgent, _LocalRows, LambdaDecomposition, IsoSecret, Gmm)):
                items = vars(obj).items() if hasattr(obj, "__dict__") else ()
                for k, v in items:
                    walk(v, f"{prefix}.{k}" if prefix else k, depth + 1)
            elif isinstance(obj, float):
                found[prefix] = np.array([obj])

        walk(self, "", 0)
        return found


def recover_gamma(
    agents: Sequence[IsoAgent],
    wm: WeightMatrices,
    noise: NoiseSchedule,
    bus: MessageBus,
    rounds: int,
) -> list[GammaRecovery]:
    """One masked AAC run over the fake-input vectors, then local correction."""
    h = len(agents)
    if h == 1:
        warnings.warn(
            "single ISO: the fake-input masking protects nothing", PrivacyWarning, stacklevel=2
        )
    parts = [
        AacParticipant(a.index, a.fake_input(), wm.w_star[a.index], a.rng, noise.rho, noise.sigma)
        for a in agents
    ]
    run_rounds(parts, bus, rounds)
    return [a.finish_gamma(p.value) for a, p in zip(agents, parts)]


def recover_gamma_arrays(
    eps_matrix: np.ndarray,
    gamma_prime: np.ndarray,
    thetas: Sequence[np.ndarray],
    secrets: Sequence[IsoSecret],
    wm: WeightMatrices,
    noise: NoiseSchedule,
    rounds: int = 200,
) -> list[GammaRecovery]:
    """Array-level entry point for fake-input recovery (used with hand-built ``eps``)."""
    h = len(thetas)
    lam = LambdaDecomposition(
        alpha=np.zeros((len(gamma_prime), 0)),
        beta=np.zeros((len(gamma_prime), 0)),
        eps_matrix=np.asarray(eps_matrix, dtype=float),
        gamma_prime=np.asarray(gamma_prime, dtype=float),
    )
    rngs = noise.generators(h)
    agents = []
    for i in range(h):
        agent = IsoAgent(
            region=i + 1,
            h=h,
            theta=np.asarray(thetas[i]),
            a_block=np.zeros((0, 0)),
            local=None,
            secret=secrets[i],
            rng=rngs[i],
        )
        agent.lam = lam
        agents.append(agent)
    graph = CommGraph(h, (wm.w != 0) & ~np.eye(h, dtype=bool))
    return recover_gamma(agents, wm, noise, MessageBus(graph), rounds)


@dataclass
class PlfConfig:
    rho: float = 1.0
    sigma: float = 0.5
    seed: int = 0
    apc: ApcConfig = field(default_factory=ApcConfig)
    pl_range: tuple[float, float] = (-1.0, 1.0)
    condition_bound: float = 1e8
    plan_retries: int = 20
    fake_spread: float = 5.0
    state_offset: np.ndarray | None = None


@dataclass
class RegionalOutput:
    region: int
    theta_indices: np.ndarray
    gmm: Gmm
    gamma: np.ndarray
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "theta_indices": [int(k) for k in self.theta_indices],
            "gmm": self.gmm.to_dict(),
            "gamma": self.gamma.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegionalOutput":
        return cls(
            region=int(data["region"]),
            theta_indices=np.array(data["theta_indices"], dtype=int),
            gmm=Gmm.from_dict(data["gmm"]),
            gamma=np.array(data["gamma"], dtype=float),
            diagnostics=dict(data.get("diagnostics", {})),
        )


@dataclass
class DistributedRun:
    outputs: list[RegionalOutput]
    agents: list[IsoAgent]
    plan: AugmentedPlan
    apc: ApcResult
    bus: MessageBus
    aac_rounds: int


def _step(n: int):
    """Decorator-free helper: run ``fn`` and tag failures with step ``n``."""

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and isinstance(ev, (PlfError, np.linalg.LinAlgError)) and not isinstance(
                ev, ProtocolError
            ):
                raise ProtocolError(n, ev) from ev
            return False

    return _Ctx()


def run_distributed_plf(
    net: PowerNetwork,
    sys: DlpfSystem,
    partition: RegionPartition,
    graph: CommGraph,
    injection: Gmm,
    config: PlfConfig | None = None,
    observations: np.ndarray | None = None,
) -> DistributedRun:
    """Simulate every ISO executing the distributed PLF method.

    The orchestrator only slices the model into per-agent pieces and routes
    masked messages; all numerical work happens inside the agents.
    """
    cfg = PlfConfig() if config is None else config
    h = partition.h
    if graph.h != h:
        raise InputError(f"graph has {graph.h} nodes but the case has {h} regions")
    if injection.dim != 2 * sys.m:
        raise InputError(f"injection GMM has dimension {injection.dim}, expected {2 * sys.m}")
    report = validate_graph(graph)
    if not report.connected:
        raise InputError("communication graph is not connected")
    if report.violations:
        warnings.warn("; ".join(report.lines()), PrivacyWarning, stacklevel=2)

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    plan_seed = int(seeds[0].generate_state(1)[0])
    noise = NoiseSchedule(cfg.rho, cfg.sigma, int(seeds[1].generate_state(1)[0]))
    agent_rngs = noise.generators(h)
    secret_rngs = [np.random.default_rng(s) for s in seeds[2].spawn(h)]

    wm = weights_for(graph)
    bus = MessageBus(graph)

    with _step(1):
        plan = build_plan(
            sys.m,
            h,
            plan_seed,
            observations=observations,
            gmm=None if observations is not None else injection,
            pl_range=cfg.pl_range,
            condition_bound=cfg.condition_bound,
            max_retries=cfg.plan_retries,
        )
        agents = []
        for r in range(1, h + 1):
            secret = choose_secret(net, sys, partition, r, secret_rngs[r - 1], cfg.fake_spread)
            agent = IsoAgent.from_system(
                sys, partition, r, secret, agent_rngs[r - 1], cfg.state_offset
            )
            agent.form_blocks(plan)
            agents.append(agent)

    with _step(2):
        apc_cfg = ApcConfig(
            tol=cfg.apc.tol,
            max_iters=cfg.apc.max_iters,
            inner_tol=cfg.apc.inner_tol,
            distributed_stop=cfg.apc.distributed_stop,
        )
        apc_result = run_apc([a.apc for a in agents], wm, noise, apc_cfg, bus=bus)

    with _step(3):
        for a in agents:
            a.acquire_lambda(plan)

    rounds = rounds_for_tolerance(wm, cfg.apc.inner_tol, noise)
    with _step(6):
        recover_gamma(agents, wm, noise, bus, rounds)

    outputs = []
    with _step(12):
        for a in agents:
            g = a.derive_plf(injection)
            outputs.append(
                RegionalOutput(
                    region=a.region,
                    theta_indices=a.theta,
                    gmm=g,
                    gamma=a.gamma_i,
                    diagnostics={
                        "apc_iters": apc_result.iterations,
                        "aac_rounds": apc_result.aac_rounds + rounds,
                        "residuals": {
                            "local_feasibility": a.apc.local_residual(),
                            "final_relative_change": a.apc.last_change,
                        },
                    },
                )
            )
    return DistributedRun(
        outputs=outputs,
        agents=agents,
        plan=plan,
        apc=apc_result,
        bus=bus,
        aac_rounds=apc_result.aac_rounds + rounds,
    )


def power_factor_lift(m: int, power_factor: float = DEFAULT_POWER_FACTOR) -> np.ndarray:
    """``[I; tan(acos(pf)) I]``: maps ``P_W`` to ``[P_W; Q_W]`` at constant power factor."""
    if not 0 < power_factor <= 1:
        raise InputError("power factor must lie in (0, 1]")
    tan_phi = math.tan(math.acos(power_factor))
    return np.vstack([np.eye(m), tan_phi * np.eye(m)])


def injection_from_samples(
    samples: np.ndarray,
    m: int,
    k: int = 3,
    seed: int = 0,
    power_factor: float = DEFAULT_POWER_FACTOR,
) -> tuple[Gmm, np.ndarray]:
    """Fit the injection mixture and return it with the ``[P_W, Q_W]`` observation rows.

    ``samples`` has either ``M`` columns (active power; reactive power follows
    from the power factor) or ``2M`` columns (``P_W`` then ``Q_W``).
    """
    x = np.asarray(samples, dtype=float)
    if x.shape[1] == 2 * m:
        return fit_em(x, k, seed), x
    if x.shape[1] != m:
        raise InputError(f"sample file has {x.shape[1]} columns; expected {m} or {2 * m}")
    lift = power_factor_lift(m, power_factor)
    g = transform(fit_em(x, k, seed), AffineMap(lift, np.zeros(2 * m)))
    return g, x @ lift.T
