"""Privacy-preserving distributed accelerated projection-based consensus (APC).

Each agent holds a row block ``A_i X = B_i`` of a square system and converges to
the global solution ``X = A^{-1} B``.  Averages over agents are obtained only
through masked average consensus (:func:`privplf.consensus.run_rounds`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .consensus import (
    AacParticipant,
    MessageBus,
    NoiseSchedule,
    WeightMatrices,
    rounds_for_tolerance,
    run_rounds,
)
from .errors import ConvergenceError, InputError, RankDeficientError

logger = logging.getLogger(__name__)

_RANK_TOL = 1e-12


def _row_space(a_block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis ``Q`` of the row space and ``R`` with ``A^T = Q R``."""
    a = np.atleast_2d(np.asarray(a_block, dtype=float))
    if a.shape[0] > a.shape[1]:
        raise RankDeficientError(f"block has more rows ({a.shape[0]}) than columns ({a.shape[1]})")
    q, r = scipy.linalg.qr(a.T, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= _RANK_TOL * max(diag.max(), 1.0):
        raise RankDeficientError("row block is not full row rank")
    return q, r


def init_solution(a_block: np.ndarray, b_block: np.ndarray) -> np.ndarray:
    """Minimum-Frobenius-norm ``X`` with ``A_i X = B_i``, i.e. ``A_i^T (A_i A_i^T)^{-1} B_i``."""
    q, r = _row_space(a_block)
    b = np.asarray(b_block, dtype=float)
    vec = b.ndim == 1
    coeff = scipy.linalg.solve_triangular(r, b.reshape(len(b), -1), trans="T")
    x = q @ coeff
    return x[:, 0] if vec else x


def projection(a_block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(Gamma_i, Phi_i)``: projectors onto the nullspace and the row space of ``A_i``."""
    q, _ = _row_space(a_block)
    phi = q @ q.T
    phi = 0.5 * (phi + phi.T)
    gamma = np.eye(phi.shape[0]) - phi
    return gamma, phi


def optimal_params(upsilon_max: float, upsilon_min: float) -> tuple[float, float]:
    """Step sizes ``(phi, eta)`` solving

        upsilon_max * phi * eta = (1 + s)^2
        upsilon_min * phi * eta = (1 - s)^2,   s = sqrt((phi - 1)(eta - 1)).

    Dividing the equations fixes ``s``; then ``phi * eta`` and ``phi + eta``
    follow and the pair are the roots of a quadratic.  Both roots are >= 1;
    disagreement modes contract like ``|1 - phi|``, so ``phi`` takes the root
    closer to 1 and ``eta`` the other.
    """
    if upsilon_min <= 0 or upsilon_min / max(upsilon_max, 1e-300) < 1e-15:
        logger.warning("upsilon_min=%g is not positive; using plain projected consensus", upsilon_min)
        return 1.0, 1.0
    if upsilon_min > upsilon_max:
        raise InputError("upsilon_min exceeds upsilon_max")
    rmax, rmin = math.sqrt(upsilon_max), math.sqrt(upsilon_min)
    s = (rmax - rmin) / (rmax + rmin)
    prod = (1.0 + s) ** 2 / upsilon_max
    total = prod + 1.0 - s * s
    disc = max(total * total - 4.0 * prod, 0.0)
    big = 0.5 * (total + math.sqrt(disc))
    small = prod / big
    return small, big


def convergence_rate(upsilon_max: float, upsilon_min: float) -> float:
    return 1.0 - 2.0 * upsilon_min / upsilon_max


@dataclass
class ApcConfig:
    tol: float = 1e-9
    max_iters: int = 5000
    inner_tol: float = 1e-13
    distributed_stop: bool = False
    # filled in by run_apc from the agents' local computations
    phi: float = float("nan")
    eta: float = float("nan")
    upsilon_max: float = float("nan")
    upsilon_min: float = float("nan")

    @property
    def rate(self) -> float:
        return convergence_rate(self.upsilon_max, self.upsilon_min)


class ApcAgent:
    """Agent-private APC state.  Nothing here is ever sent unmasked."""

    def __init__(self, index: int, a_block: np.ndarray, b_block: np.ndarray, rng=None):
        self.index = index
        self.a_block = np.array(a_block, dtype=float)
        self.b_block = np.array(b_block, dtype=float)
        if self.b_block.ndim == 1:
            self.b_block = self.b_block[:, None]
        if self.b_block.shape[0] != self.a_block.shape[0]:
            raise InputError(f"agent {index}: A_i and B_i row counts differ")
        self.rng = rng if rng is not None else np.random.default_rng(index)
        self.x_local = init_solution(self.a_block, self.b_block)
        self.gamma_proj, self.phi_proj = projection(self.a_block)
        self.x_bar: np.ndarray | None = None
        self.upsilon: np.ndarray | None = None
        self.phi = self.eta = float("nan")
        self.last_change = float("inf")

    def local_residual(self) -> float:
        return float(np.max(np.abs(self.a_block @ self.x_local - self.b_block)))

    def set_parameters(self) -> None:
        vals = np.linalg.eigvalsh(0.5 * (self.upsilon + self.upsilon.T))
        self.upsilon_max = float(min(vals[-1], 1.0))
        self.upsilon_min = float(vals[0])
        self.phi, self.eta = optimal_params(self.upsilon_max, self.upsilon_min)

    def step(self) -> np.ndarray:
        step = self.phi * (self.gamma_proj @ (self.x_bar - self.x_local))
        new = self.x_local + step
        self.last_change = float(np.linalg.norm(step) / max(np.linalg.norm(new), 1e-300))
        self.x_local = new
        return new

    def damped_payload(self) -> np.ndarray:
        """Agent's share of ``(1 - eta) Xbar(t-1) + eta/H sum_i X_i(t)``.

        Averaging this (rather than damping locally after averaging ``X_i``)
        keeps the agents' copies of ``Xbar`` in consensus: with ``eta > 2`` a
        local ``(1 - eta)`` factor would amplify any residual disagreement.
        """
        return (1.0 - self.eta) * self.x_bar + self.eta * self.x_local


@dataclass
class ApcResult:
    agents: list[ApcAgent]
    iterations: int
    aac_runs: int
    aac_rounds: int
    converged: bool
    config: ApcConfig
    change_history: list[float] = field(default_factory=list)

    def estimates(self) -> list[np.ndarray]:
        return [a.x_local for a in self.agents]


def _average(agents, payloads, bus, wm, noise, rounds) -> list[np.ndarray]:
    parts = [
        AacParticipant(a.index, p, wm.w_star[a.index], a.rng, noise.rho, noise.sigma)
        for a, p in zip(agents, payloads)
    ]
    run_rounds(parts, bus, rounds)
    return [p.value for p in parts]


def run_apc(
    agents: Sequence[ApcAgent],
    wm: WeightMatrices,
    noise: NoiseSchedule,
    cfg: ApcConfig | None = None,
    *,
    bus: MessageBus,
    callback: Callable[[int, Sequence[ApcAgent]], None] | None = None,
) -> ApcResult:
    """Run the distributed APC iteration until every agent's relative change is below ``cfg.tol``."""
    cfg = ApcConfig() if cfg is None else cfg
    agents = list(agents)
    h = len(agents)
    if h != wm.h:
        raise InputError(f"{h} agents for a {wm.h}-node graph")
    m_hat = agents[0].x_local.shape[1]
    rounds = rounds_for_tolerance(wm, cfg.inner_tol, noise)
    aac_runs = 0

    # averages of X_i(0) and Phi_i share one consensus run
    joint = _average(
        agents, [np.hstack([a.x_local, a.phi_proj]) for a in agents], bus, wm, noise, rounds
    )
    aac_runs += 1
    for a, y in zip(agents, joint):
        a.x_bar = y[:, :m_hat].copy()
        a.upsilon = y[:, m_hat:].copy()
        a.set_parameters()
    cfg.phi, cfg.eta = agents[0].phi, agents[0].eta
    cfg.upsilon_max, cfg.upsilon_min = agents[0].upsilon_max, agents[0].upsilon_min
    logger.debug("APC: phi=%.6g eta=%.6g rate=%.6g rounds/avg=%d", cfg.phi, cfg.eta, cfg.rate, rounds)

    history = []
    converged = False
    t = 0
    while t < cfg.max_iters:
        t += 1
        for a in agents:
            a.step()
        changes = [a.last_change for a in agents]
        history.append(max(changes))
        if callback is not None:
            callback(t, agents)
        if cfg.distributed_stop:
            flags = [np.array([1.0 if c < cfg.tol else 0.0]) for c in changes]
            votes = _average(agents, flags, bus, wm, noise, rounds)
            aac_runs += 1
            done = all(v[0] > 1.0 - 0.5 / h for v in votes)
        else:
            done = max(changes) < cfg.tol
        if done:
            converged = True
            break
        means = _average(agents, [a.damped_payload() for a in agents], bus, wm, noise, rounds)
        aac_runs += 1
        for a, mu in zip(agents, means):
            a.x_bar = mu

    result = ApcResult(
        agents=agents,
        iterations=t,
        aac_runs=aac_runs,
        aac_rounds=aac_runs * rounds,
        converged=converged,
        config=cfg,
        change_history=history,
    )
    if not converged:
        residuals = {a.index + 1: a.local_residual() for a in agents}
        err = ConvergenceError(
            f"APC did not converge in {cfg.max_iters} iterations "
            f"(last relative change {history[-1]:.3e})",
            residuals,
        )
        err.result = result
        raise err
    return result


def solve_distributed(
    a_blocks: Sequence[np.ndarray],
    b_blocks: Sequence[np.ndarray],
    wm: WeightMatrices,
    noise: NoiseSchedule,
    cfg: ApcConfig | None = None,
    bus: MessageBus | None = None,
    **kwargs,
) -> ApcResult:
    """Convenience wrapper: build one :class:`ApcAgent` per row block and run APC."""
    from .consensus import CommGraph

    h = len(a_blocks)
    rngs = noise.generators(h)
    agents = [ApcAgent(i, a, b, rngs[i]) for i, (a, b) in enumerate(zip(a_blocks, b_blocks))]
    if bus is None:
        bus = MessageBus(CommGraph(h, (wm.w != 0) & ~np.eye(h, dtype=bool)))
    return run_apc(agents, wm, noise, cfg, bus=bus, **kwargs)
