"""Real-time storage controllers built on drift-plus-penalty weighting.

Each storage phase carries a control weight ``v`` and an energy offset
``beta``. The per-slot problem adds the drift pressure
``(s - beta)/v * (net charge)`` to the system cost; with ``beta`` and
``v <= v_max`` chosen by the formulas below, the resulting trajectory
keeps every energy state inside its hard bounds without knowing any
statistics of the exogenous process.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidConfig, NonpositiveNumerator, StateBoundViolation
from .model import (Action, PhaseConfig, PhaseRanges, StorageParams,
                    SystemConfig, SystemState, derive_ranges)
from . import solver as _solver

MODES = ("ideal", "nonideal")


@dataclass(frozen=True)
class ControllerParams:
    """Per-phase control weight and energy offset (zeros without storage)."""

    mode: str
    v: tuple
    beta: tuple


@dataclass(frozen=True)
class ControllerState:
    """Energy states at the start of a slot (zero entries without storage)."""

    s: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class StepInfo:
    """Solver diagnostics carried alongside each slot's action."""

    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    result: object


def compute_v_max(storage: StorageParams, ranges: PhaseRanges,
                  p_min: float, p_max: float, mode: str) -> float:
    """Largest admissible control weight for one storage phase.

    numerator: s_max - s_min - 2*u_max (must be positive).
    denominator, ideal mode:
        (p_max - p_min) + (D'_max - D'_min) + (C'_max - C'_min)
    non-ideal mode:
        p_max/eta_plus - p_min*eta_minus + (D'_max - D'_min)
        + C'_max/eta_plus - eta_minus*C'_min
    With unit efficiencies the two coincide.
    """
    numerator = storage.s_max - storage.s_min - 2.0 * storage.u_max
    if numerator <= 0:
        raise NonpositiveNumerator(
            f"s_max - s_min - 2*u_max = {numerator} must be positive")
    if mode == "ideal":
        denom = (p_max - p_min + ranges.dp_max - ranges.dp_min
                 + ranges.cp_max - ranges.cp_min)
    elif mode == "nonideal":
        denom = (p_max / storage.eta_plus - p_min * storage.eta_minus
                 + ranges.dp_max - ranges.dp_min
                 + ranges.cp_max / storage.eta_plus
                 - storage.eta_minus * ranges.cp_min)
    else:
        raise InvalidConfig(f"unknown mode {mode!r}")
    return numerator / denom


def compute_beta(storage: StorageParams, ranges: PhaseRanges,
                 p_max: float, v: float, mode: str) -> float:
    """Energy offset keeping the state away from both hard bounds.

    ideal:     s_min + u_max + v*(p_max + D'_max + C'_max)
    non-ideal: s_min + u_max + v*(p_max/eta_plus + C'_max/eta_plus + D'_max)
    """
    if mode == "ideal":
        pressure = p_max + ranges.dp_max + ranges.cp_max
    elif mode == "nonideal":
        pressure = (p_max / storage.eta_plus
                    + ranges.cp_max / storage.eta_plus + ranges.dp_max)
    else:
        raise InvalidConfig(f"unknown mode {mode!r}")
    return storage.s_min + storage.u_max + v * pressure


def compute_epsilon(cfg: SystemConfig, ranges=None) -> float:
    """Adjustment-gap constant of the non-ideal performance bound.

    Sum over storage phases of
    p_max*u_max*(1/eta_plus + eta_minus) + 2*D_max + C_max.
    """
    if ranges is None:
        ranges = derive_ranges(cfg)
    total = 0.0
    for ph, rg in zip(cfg.phases, ranges):
        if not ph.has_storage:
            continue
        st = ph.storage
        total += cfg.p_max * st.u_max * (1.0 / st.eta_plus + st.eta_minus)
        total += 2.0 * rg.d_max + rg.c_max
    return total


def make_params(cfg: SystemConfig, mode: str, v_values=None,
                ranges=None) -> ControllerParams:
    """Controller parameters with ``v = v_max`` per phase unless overridden.

    Explicit ``v_values`` must satisfy 0 < v <= v_max for each storage
    phase (entries for phases without storage are ignored).
    """
    if mode not in MODES:
        raise InvalidConfig(f"mode must be one of {MODES}")
    if ranges is None:
        ranges = derive_ranges(cfg)
    v_out, beta_out = [], []
    for i, (ph, rg) in enumerate(zip(cfg.phases, ranges)):
        if not ph.has_storage:
            v_out.append(0.0)
            beta_out.append(0.0)
            continue
        vmax = compute_v_max(ph.storage, rg, cfg.p_min, cfg.p_max, mode)
        v = vmax if v_values is None else float(v_values[i])
        if not 0.0 < v <= vmax + 1e-12:
            raise InvalidConfig(
                f"phase {i}: v {v} outside (0, v_max={vmax}]")
        v_out.append(v)
        beta_out.append(compute_beta(ph.storage, rg, cfg.p_max, v, mode))
    return ControllerParams(mode=mode, v=tuple(v_out), beta=tuple(beta_out))


def initial_state(cfg: SystemConfig) -> ControllerState:
    s = np.array([ph.storage.s_initial if ph.has_storage else 0.0
                  for ph in cfg.phases])
    return ControllerState(s=s, t=0)


def update_energy_state(storage: StorageParams, s: float,
                        u_plus: float, u_minus: float) -> float:
    """s' = s + u_plus - u_minus, guarded against leaving the hard bounds.

    A violation beyond 1e-9 kWh signals a controller bug (the designed
    offsets must prevent it); smaller excursions are solver round-off
    and are clipped away.
    """
    s_next = s + u_plus - u_minus
    if s_next < storage.s_min - 1e-9 or s_next > storage.s_max + 1e-9:
        raise StateBoundViolation(
            f"energy state {s_next} outside [{storage.s_min}, {storage.s_max}]")
    return float(min(max(s_next, storage.s_min), storage.s_max))


def drift_weights(cfg: SystemConfig, params: ControllerParams,
                  s: np.ndarray) -> np.ndarray:
    """(s - beta)/v per storage phase, zero elsewhere."""
    w = np.zeros(cfg.n)
    for i, ph in enumerate(cfg.phases):
        if ph.has_storage:
            w[i] = (s[i] - params.beta[i]) / params.v[i]
    return w


def adjust_solution(phase: PhaseConfig, l_hat: float, up_hat: float,
                    um_hat: float):
    """Collapse simultaneous charge/discharge and restore balance.

    u_plus = max(up_hat - um_hat, 0); u_minus = max(um_hat - up_hat, 0);
    l absorbs the difference between the intermediate and final storage
    flows, so the net internal charge and the balance residual are both
    preserved exactly.
    """
    st = phase.storage
    up = max(up_hat - um_hat, 0.0)
    um = max(um_hat - up_hat, 0.0)
    l = (l_hat + st.eta_minus * um_hat - up_hat / st.eta_plus
         - st.eta_minus * um + up / st.eta_plus)
    return l, up, um


def _adjust_arrays(cfg: SystemConfig, l_hat, up_hat, um_hat):
    l = l_hat.copy()
    up = up_hat.copy()
    um = um_hat.copy()
    for i, ph in enumerate(cfg.phases):
        if ph.has_storage:
            l[i], up[i], um[i] = adjust_solution(ph, float(l_hat[i]),
                                                 float(up_hat[i]),
                                                 float(um_hat[i]))
    return l, up, um


def _advance(cfg, state_s, up, um):
    s_next = state_s.copy()
    for i, ph in enumerate(cfg.phases):
        if ph.has_storage:
            s_next[i] = update_energy_state(ph.storage, float(state_s[i]),
                                            float(up[i]), float(um[i]))
    return s_next


@dataclass(frozen=True)
class SolverOptions:
    rho: float = _solver.DEFAULT_RHO
    tol_primal: float = _solver.DEFAULT_TOL
    tol_dual: float = _solver.DEFAULT_TOL
    max_iter: int = _solver.DEFAULT_MAX_ITER
    warm_start: bool = False


def step_ideal(cfg: SystemConfig, params: ControllerParams,
               ctrl: ControllerState, state: SystemState,
               options: SolverOptions = SolverOptions(),
               warm: Optional[object] = None):
    """One slot of the ideal-storage controller.

    Solves the drift-weighted per-slot problem over (l, u, f), updates
    the energy states with the net charge, and returns
    (action, next controller state, diagnostics).
    """
    weight = drift_weights(cfg, params, ctrl.s)
    problem = _solver.build_problem(cfg, state, "ideal", weight=weight)
    res = _solver.solve(problem, rho=options.rho, tol_primal=options.tol_primal,
                        tol_dual=options.tol_dual, max_iter=options.max_iter,
                        init=warm if options.warm_start else None)
    action = Action(l=res.l, u_plus=res.u_plus, u_minus=res.u_minus, f=res.f)
    s_next = _advance(cfg, ctrl.s, res.u_plus, res.u_minus)
    info = StepInfo(iterations=res.iterations,
                    primal_residual=res.primal_residual,
                    dual_residual=res.dual_residual,
                    objective=res.objective, result=res)
    return action, ControllerState(s=s_next, t=ctrl.t + 1), info


def step_nonideal(cfg: SystemConfig, params: ControllerParams,
                  ctrl: ControllerState, state: SystemState,
                  options: SolverOptions = SolverOptions(),
                  warm: Optional[object] = None):
    """One slot of the non-ideal-storage controller.

    Solves the relaxed per-slot problem (simultaneity allowed), then
    collapses any overlapping charge/discharge with
    :func:`adjust_solution`; the final action satisfies
    u_plus * u_minus = 0 per phase and the same net charge drives the
    energy update.
    """
    weight = drift_weights(cfg, params, ctrl.s)
    problem = _solver.build_problem(cfg, state, "nonideal", weight=weight)
    res = _solver.solve(problem, rho=options.rho, tol_primal=options.tol_primal,
                        tol_dual=options.tol_dual, max_iter=options.max_iter,
                        init=warm if options.warm_start else None)
    l, up, um = _adjust_arrays(cfg, res.l, res.u_plus, res.u_minus)
    action = Action(l=l, u_plus=up, u_minus=um, f=res.f)
    s_next = _advance(cfg, ctrl.s, up, um)
    info = StepInfo(iterations=res.iterations,
                    primal_residual=res.primal_residual,
                    dual_residual=res.dual_residual,
                    objective=res.objective, result=res)
    return action, ControllerState(s=s_next, t=ctrl.t + 1), info


def step(cfg, params, ctrl, state, options=SolverOptions(), warm=None):
    if params.mode == "ideal":
        return step_ideal(cfg, params, ctrl, state, options, warm)
    return step_nonideal(cfg, params, ctrl, state, options, warm)
