"""Star-topology message passing for the per-slot solve.

A substation coordinator holds the flow vector and the stopping logic;
one agent per phase holds everything private (cost curves, drift
weight, charge bounds, its multiplier). Per iteration the coordinator
sends each phase its current flow value and receives back a single
scalar m_i; no cost parameter, energy state, or weight ever crosses
the wire. Agents run the same block-minimization kernel as the
centralized solve, with the same operation order, so the two
executions produce identical iterates.

The multiplier update needs the next flow value, which arrives with
the following downlink; each agent therefore completes its multiplier
update at the start of the next round, keeping the update equations
intact at the cost of one round of latency. The coordinator mirrors
every multiplier itself: with lambda^0 = 0,
lambda^{k+1} = lambda^k + rho*(f^{k+1} + m^k - lambda^k/rho)
uses only exchanged quantities, so residual-based stopping needs no
extra disclosure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MissingUplink, Nonconverged, ProtocolOrderViolation
from . import solver as _solver
from .solver import PerSlotProblem


@dataclass(frozen=True)
class DownlinkMsg:
    """Coordinator -> phase: current flow iterate for that phase."""

    k: int
    f: float


@dataclass(frozen=True)
class UplinkMsg:
    """Phase -> coordinator: the coupling scalar m_i for iteration k."""

    k: int
    m: float


class PhaseAgent:
    """One phase's private side of the protocol.

    Never reads other phases' data; emits nothing beyond
    :class:`UplinkMsg`. Deterministic: identical inputs produce
    identical uplinks.
    """

    def __init__(self, problem_slice: PerSlotProblem, rho: float):
        self._pr = problem_slice
        self._rho = rho
        self._ideal = problem_slice.mode == "ideal"
        self._kernel = _solver._make_kernel(problem_slice, rho)
        self._r = float(problem_slice.r[0])
        self._eta_p = float(problem_slice.eta_p[0])
        self._eta_m = float(problem_slice.eta_m[0])
        self._lam = 0.0
        self._expected_k = 0
        self._m_prev: Optional[float] = None
        self._l = 0.0
        self._u = 0.0
        self._up = 0.0
        self._um = 0.0

    @property
    def lam(self) -> float:
        return self._lam

    def _complete_dual(self, f: float) -> None:
        res = f + self._m_prev - self._lam / self._rho
        self._lam = self._lam + self._rho * res

    def round(self, msg: DownlinkMsg) -> UplinkMsg:
        """Process one downlink: finish the pending multiplier update,
        minimize the local block, and report the coupling scalar."""
        if msg.k != self._expected_k:
            raise ProtocolOrderViolation(
                f"expected iteration {self._expected_k}, got {msg.k}")
        if msg.k > 0:
            self._complete_dual(msg.f)
        if self._ideal:
            self._l, self._u = self._kernel.block_one(0, msg.f, self._lam)
            m = self._r + self._l - self._u + self._lam / self._rho
        else:
            self._l, self._up, self._um = self._kernel.block_one(0, msg.f,
                                                                 self._lam)
            m = (self._r + self._l + self._eta_m * self._um
                 - self._up / self._eta_p + self._lam / self._rho)
        self._m_prev = m
        self._expected_k += 1
        return UplinkMsg(k=msg.k, m=m)

    def finalize(self, f_final: float):
        """Convergence report: sync the trailing multiplier update and
        hand the coordinator the local variables it needs for
        bookkeeping. Not part of the iterative message exchange."""
        self._complete_dual(f_final)
        if self._ideal:
            return self._l, max(self._u, 0.0), max(-self._u, 0.0)
        return self._l, self._up, self._um


class SubstationCoordinator:
    """Coordinator side: flow updates, mirrored multipliers, stopping.

    Termination is decided here from residuals computable from the
    exchanged (f, m) pairs alone; phases never see global state.
    """

    def __init__(self, problem: PerSlotProblem, rho: float,
                 tol_primal: float = _solver.DEFAULT_TOL,
                 tol_dual: float = _solver.DEFAULT_TOL):
        self._pr = problem
        self._rho = rho
        self._tol_primal = tol_primal
        self._tol_dual = tol_dual
        self.n = problem.n
        self.k = 0
        self.f = np.zeros(self.n)
        self.lam = np.zeros(self.n)
        self.primal_residual = float("inf")
        self.dual_residual = float("inf")

    def downlinks(self):
        return [DownlinkMsg(k=self.k, f=float(self.f[i])) for i in range(self.n)]

    def round(self, uplinks):
        """Consume one uplink per phase; returns True when residuals
        are below tolerance."""
        by_phase = {}
        for i, msg in enumerate(uplinks):
            if msg is None or msg.k != self.k:
                raise MissingUplink(f"phase {i}: missing or stale uplink for k={self.k}")
            by_phase[i] = msg.m
        if len(by_phase) != self.n:
            raise MissingUplink("uplink count does not match phase count")
        m = np.array([by_phase[i] for i in range(self.n)])
        f_new = _solver.flow_update(self._pr, m, self._rho)
        res = f_new + m - self.lam / self._rho
        self.lam = _solver.dual_update(self.lam, self._rho, res)
        self.primal_residual = float(np.max(np.abs(res)))
        self.dual_residual = float(self._rho * np.max(np.abs(f_new - self.f)))
        self.f = f_new
        self.k += 1
        return (self.primal_residual <= self._tol_primal
                and self.dual_residual <= self._tol_dual)


@dataclass
class DistributedResult:
    l: np.ndarray
    u_plus: np.ndarray
    u_minus: np.ndarray
    f: np.ndarray
    iterations: int
    message_count: int
    primal_residual: float
    dual_residual: float
    objective: float
    message_log: Optional[list] = None


def run_distributed_solve(problem: PerSlotProblem, rho: float = _solver.DEFAULT_RHO,
                          tol_primal: float = _solver.DEFAULT_TOL,
                          tol_dual: float = _solver.DEFAULT_TOL,
                          max_iter: int = _solver.DEFAULT_MAX_ITER,
                          log_messages: bool = False) -> DistributedResult:
    """Solve one slot via the message-passing protocol.

    Synchronous rounds with deterministic delivery order (phase index);
    message_count counts exactly the 2*N messages per iteration. The
    returned action matches the centralized solve componentwise because
    both run the same update algebra in the same order.
    """
    coord = SubstationCoordinator(problem, rho, tol_primal, tol_dual)
    agents = [PhaseAgent(problem.slice(i), rho) for i in range(problem.n)]
    log = [] if log_messages else None
    messages = 0
    done = False
    for _ in range(max_iter):
        downs = coord.downlinks()
        ups = []
        for i, (agent, dl) in enumerate(zip(agents, downs)):
            if log is not None:
                log.append({"dir": "down", "k": dl.k, "phase": i, "f": dl.f})
            ul = agent.round(dl)
            if log is not None:
                log.append({"dir": "up", "k": ul.k, "phase": i, "m": ul.m})
            ups.append(ul)
        messages += 2 * problem.n
        done = coord.round(ups)
        if done:
            break
    if not done:
        raise Nonconverged(
            f"distributed solve hit max_iter={max_iter}",
            primal_residual=coord.primal_residual,
            dual_residual=coord.dual_residual, iterations=coord.k)

    n = problem.n
    l = np.zeros(n)
    up = np.zeros(n)
    um = np.zeros(n)
    for i, agent in enumerate(agents):
        l[i], up[i], um[i] = agent.finalize(float(coord.f[i]))
    obj = problem.objective_action(l, up, um, coord.f)
    return DistributedResult(l=l, u_plus=up, u_minus=um, f=coord.f.copy(),
                             iterations=coord.k, message_count=messages,
                             primal_residual=coord.primal_residual,
                             dual_residual=coord.dual_residual,
                             objective=obj, message_log=log)
