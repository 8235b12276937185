"""Greedy benchmark: myopic per-slot cost minimization.

The greedy policy minimizes the current system cost subject to the
slot's physical constraints, with the charge variables capped by the
current energy state so the trajectory stays feasible by construction.
It reuses the same per-slot solver as the controller (drift weight set
to zero, charge bounds tightened by state), so comparisons isolate the
control policy rather than solver quality.
"""

from __future__ import annotations

import numpy as np

from .controller import SolverOptions, StepInfo, _adjust_arrays, _advance
from .model import Action, SystemConfig, SystemState
from . import solver as _solver


def greedy_step_ideal(cfg: SystemConfig, s: np.ndarray, state: SystemState,
                      options: SolverOptions = SolverOptions(), warm=None):
    """Minimize the slot cost with u_i in [max(-u_max, s_min - s), min(u_max, s_max - s)]."""
    n = cfg.n
    u_lo = np.zeros(n)
    u_hi = np.zeros(n)
    for i, ph in enumerate(cfg.phases):
        if ph.has_storage:
            st = ph.storage
            u_lo[i] = max(-st.u_max, st.s_min - float(s[i]))
            u_hi[i] = min(st.u_max, st.s_max - float(s[i]))
    problem = _solver.build_problem(cfg, state, "ideal", u_lo=u_lo, u_hi=u_hi)
    res = _solver.solve(problem, rho=options.rho, tol_primal=options.tol_primal,
                        tol_dual=options.tol_dual, max_iter=options.max_iter,
                        init=warm if options.warm_start else None)
    action = Action(l=res.l, u_plus=res.u_plus, u_minus=res.u_minus, f=res.f)
    s_next = _advance(cfg, s, res.u_plus, res.u_minus)
    info = StepInfo(iterations=res.iterations,
                    primal_residual=res.primal_residual,
                    dual_residual=res.dual_residual,
                    objective=res.objective, result=res)
    return action, s_next, info


def greedy_step_nonideal(cfg: SystemConfig, s: np.ndarray, state: SystemState,
                         options: SolverOptions = SolverOptions(), warm=None):
    """Non-ideal greedy step: state bounds on the net charge, then adjustment.

    The relaxed problem keeps u_plus, u_minus in their boxes and bounds
    u_plus - u_minus within [s_min - s, s_max - s]; the adjustment
    collapses simultaneous charge/discharge without changing the net,
    so the updated state stays within bounds.
    """
    n = cfg.n
    diff_lo = np.full(n, -np.inf)
    diff_hi = np.full(n, np.inf)
    for i, ph in enumerate(cfg.phases):
        if ph.has_storage:
            st = ph.storage
            diff_lo[i] = st.s_min - float(s[i])
            diff_hi[i] = st.s_max - float(s[i])
    problem = _solver.build_problem(cfg, state, "nonideal",
                                    diff_lo=diff_lo, diff_hi=diff_hi)
    res = _solver.solve(problem, rho=options.rho, tol_primal=options.tol_primal,
                        tol_dual=options.tol_dual, max_iter=options.max_iter,
                        init=warm if options.warm_start else None)
    l, up, um = _adjust_arrays(cfg, res.l, res.u_plus, res.u_minus)
    action = Action(l=l, u_plus=up, u_minus=um, f=res.f)
    s_next = _advance(cfg, s, up, um)
    info = StepInfo(iterations=res.iterations,
                    primal_residual=res.primal_residual,
                    dual_residual=res.dual_residual,
                    objective=res.objective, result=res)
    return action, s_next, info


def greedy_step(cfg, s, state, mode, options=SolverOptions(), warm=None):
    if mode == "ideal":
        return greedy_step_ideal(cfg, s, state, options, warm)
    return greedy_step_nonideal(cfg, s, state, options, warm)
