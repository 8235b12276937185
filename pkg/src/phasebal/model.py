"""Domain types, cost evaluation, and derived feasible ranges.

Units: power in kW, energy in kWh, prices in cents/kWh. The slot duration
is normalized to one, so per-slot power and energy are numerically
interchangeable. All types are immutable after validation and safe to
share across concurrent simulation runs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BalanceViolation, InvalidConfig

#: Absolute tolerance (kW) on per-phase power balance. Iterative inner
#: solvers terminate at finite precision and all experiment magnitudes
#: are O(10) kW, so this is comfortably below any cost-relevant scale.
BALANCE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CostFunction:
    """Convex, continuously differentiable scalar cost curve.

    ``quadratic`` holds coefficients ``(a, b, c)`` for ``a*x**2 + b*x + c``
    with ``a >= 0``. ``custom`` is the extension point for general convex
    differentiable functions supplied as (value, derivative) callables;
    both must accept numpy arrays, and convexity is the caller's
    responsibility.
    """

    kind: str = "quadratic"
    coefficients: tuple = (0.0, 0.0, 0.0)
    value_fn: Optional[Callable] = None
    deriv_fn: Optional[Callable] = None

    @staticmethod
    def quadratic(a: float, b: float = 0.0, c: float = 0.0) -> "CostFunction":
        return CostFunction(kind="quadratic",
                            coefficients=(float(a), float(b), float(c)))

    @staticmethod
    def custom(value: Callable, derivative: Callable) -> "CostFunction":
        return CostFunction(kind="custom", coefficients=(),
                            value_fn=value, deriv_fn=derivative)

    @property
    def is_quadratic(self) -> bool:
        return self.kind == "quadratic"

    def value(self, x):
        if self.kind == "quadratic":
            a, b, c = self.coefficients
            return a * x * x + b * x + c
        return self.value_fn(x)

    def derivative(self, x):
        if self.kind == "quadratic":
            a, b, _ = self.coefficients
            return 2.0 * a * x + b
        return self.deriv_fn(x)


def eval_cost(fn: CostFunction, x):
    """Evaluate a cost curve at ``x`` (scalar or array)."""
    return fn.value(x)


def eval_derivative(fn: CostFunction, x):
    """Evaluate the derivative of a cost curve at ``x``."""
    return fn.derivative(x)


@dataclass(frozen=True)
class StorageParams:
    """Energy storage limits and efficiencies for one phase."""

    s_min: float
    s_max: float
    u_max: float
    eta_plus: float = 1.0
    eta_minus: float = 1.0
    s_initial: float = 0.0


@dataclass(frozen=True)
class PhaseConfig:
    """One phase: optional storage, cost curves, and flow intervals."""

    cost_l: CostFunction
    r_min: float
    r_max: float
    f_min: float
    f_max: float
    storage: Optional[StorageParams] = None
    cost_deg: Optional[CostFunction] = None

    @property
    def has_storage(self) -> bool:
        return self.storage is not None


@dataclass(frozen=True)
class SystemConfig:
    """Substation with N >= 2 phases, an imbalance loss, and price bounds."""

    phases: tuple
    loss: CostFunction
    p_min: float
    p_max: float
    slot_duration: float = 1.0

    @property
    def n(self) -> int:
        return len(self.phases)

    def storage_indices(self) -> tuple:
        return tuple(i for i, ph in enumerate(self.phases) if ph.has_storage)


@dataclass(frozen=True)
class SystemState:
    """Exogenous randomness for one slot: uncontrollable flows and price."""

    r: np.ndarray
    p: float
    slot: int = 0


@dataclass(frozen=True)
class Action:
    """One slot's decision across phases.

    ``u_plus``/``u_minus`` are zero for phases without storage; in ideal
    mode they hold the complementary split of the net charge amount.
    """

    l: np.ndarray
    u_plus: np.ndarray
    u_minus: np.ndarray
    f: np.ndarray

    @property
    def u_net(self) -> np.ndarray:
        return self.u_plus - self.u_minus


@dataclass(frozen=True)
class CostBreakdown:
    """System cost for one slot, split into its four additive terms."""

    arbitrage: float
    degradation: float
    controllable: float
    imbalance: float
    total: float


@dataclass(frozen=True)
class PhaseRanges:
    """Feasible-set extrema used by parameter and bound calculators.

    The controllable-flow interval is implied by power balance and the
    boxes on r, f, and the charge variables; derivative extrema of the
    convex curves are attained at interval endpoints.
    """

    l_min: float
    l_max: float
    cp_min: float
    cp_max: float
    dp_min: float
    dp_max: float
    c_max: float
    d_max: float


def _check_cost(fn, name: str) -> None:
    if not isinstance(fn, CostFunction):
        raise InvalidConfig(f"{name}: expected a CostFunction")
    if fn.kind == "quadratic":
        if len(fn.coefficients) != 3:
            raise InvalidConfig(f"{name}: quadratic needs (a, b, c) coefficients")
        if fn.coefficients[0] < 0:
            raise InvalidConfig(f"{name}: quadratic coefficient a must be >= 0 for convexity")
    elif fn.kind == "custom":
        if fn.value_fn is None or fn.deriv_fn is None:
            raise InvalidConfig(f"{name}: custom cost needs value and derivative callables")
    else:
        raise InvalidConfig(f"{name}: unsupported cost kind {fn.kind!r}")


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Check every model invariant; return ``cfg`` or raise InvalidConfig.

    The error message names the first violated invariant.
    """
    if cfg.n < 2:
        raise InvalidConfig(f"need at least 2 phases, got {cfg.n}")
    if cfg.p_min > cfg.p_max:
        raise InvalidConfig(f"p_min {cfg.p_min} > p_max {cfg.p_max}")
    if cfg.slot_duration != 1.0:
        raise InvalidConfig("slot_duration must be 1 (normalized)")
    _check_cost(cfg.loss, "loss")
    for i, ph in enumerate(cfg.phases):
        _check_cost(ph.cost_l, f"phase {i} cost_l")
        if ph.r_min >= ph.r_max:
            raise InvalidConfig(f"phase {i}: r_min {ph.r_min} >= r_max {ph.r_max}")
        if ph.f_min >= ph.f_max:
            raise InvalidConfig(f"phase {i}: f_min {ph.f_min} >= f_max {ph.f_max}")
        st = ph.storage
        if st is None:
            continue
        if ph.cost_deg is None:
            raise InvalidConfig(f"phase {i}: storage requires a degradation cost")
        _check_cost(ph.cost_deg, f"phase {i} cost_deg")
        if not 0.0 <= st.s_min < st.s_max:
            raise InvalidConfig(f"phase {i}: need 0 <= s_min < s_max")
        if st.u_max <= 0:
            raise InvalidConfig(f"phase {i}: u_max must be positive")
        if st.s_max - st.s_min - 2.0 * st.u_max <= 0:
            raise InvalidConfig(
                f"phase {i}: s_max - s_min - 2*u_max = "
                f"{st.s_max - st.s_min - 2.0 * st.u_max} must be positive")
        if not 0.0 < st.eta_plus <= 1.0:
            raise InvalidConfig(f"phase {i}: eta_plus must be in (0, 1]")
        if not 0.0 < st.eta_minus <= 1.0:
            raise InvalidConfig(f"phase {i}: eta_minus must be in (0, 1]")
        if not st.s_min <= st.s_initial <= st.s_max:
            raise InvalidConfig(f"phase {i}: s_initial outside [s_min, s_max]")
    return cfg


def derive_phase_ranges(phase: PhaseConfig) -> PhaseRanges:
    """Feasible extrema for a single phase by endpoint enumeration.

    ``l`` must satisfy balance l = u_plus/eta_plus - eta_minus*u_minus - f - r
    for some feasible (u_plus, u_minus, f, r); the extrema over that box
    are attained at corner combinations, enumerated exhaustively.
    """
    st = phase.storage
    if st is not None:
        up_vals = (0.0, st.u_max)
        um_vals = (0.0, st.u_max)
        eta_p, eta_m = st.eta_plus, st.eta_minus
    else:
        up_vals = um_vals = (0.0,)
        eta_p = eta_m = 1.0
    corners = [up / eta_p - eta_m * um - f - r
               for up, um, f, r in itertools.product(
                   up_vals, um_vals,
                   (phase.f_min, phase.f_max), (phase.r_min, phase.r_max))]
    l_min, l_max = min(corners), max(corners)

    cp_ends = (float(phase.cost_l.derivative(l_min)),
               float(phase.cost_l.derivative(l_max)))
    c_max = max(float(phase.cost_l.value(l_min)),
                float(phase.cost_l.value(l_max)))
    if st is not None:
        dfn = phase.cost_deg
        dp_ends = (float(dfn.derivative(-st.u_max)),
                   float(dfn.derivative(st.u_max)))
        d_max = max(float(dfn.value(-st.u_max)), float(dfn.value(st.u_max)))
    else:
        dp_ends = (0.0, 0.0)
        d_max = 0.0
    return PhaseRanges(
        l_min=l_min, l_max=l_max,
        cp_min=min(cp_ends), cp_max=max(cp_ends),
        dp_min=min(dp_ends), dp_max=max(dp_ends),
        c_max=c_max, d_max=d_max)


def derive_ranges(cfg: SystemConfig) -> tuple:
    """Per-phase :class:`PhaseRanges` for a validated config."""
    return tuple(derive_phase_ranges(ph) for ph in cfg.phases)


def balance_residuals(state: SystemState, action: Action, cfg: SystemConfig) -> np.ndarray:
    """Per-phase balance residual f + r + l + eta_minus*u_minus - u_plus/eta_plus."""
    eta_p = np.array([ph.storage.eta_plus if ph.has_storage else 1.0
                      for ph in cfg.phases])
    eta_m = np.array([ph.storage.eta_minus if ph.has_storage else 1.0
                      for ph in cfg.phases])
    return (action.f + state.r + action.l
            + eta_m * action.u_minus - action.u_plus / eta_p)


def system_cost(cfg: SystemConfig, state: SystemState, action: Action,
                check_balance: bool = True) -> CostBreakdown:
    """Evaluate the one-slot system cost and its decomposition.

    total = sum over storage phases of
                p*(u_plus/eta_plus - eta_minus*u_minus)
                + D(u_plus) + D(-u_minus)
          + sum over all phases of C(l) + F(f - mean(f))

    The four breakdown terms sum to the total exactly (the total is
    computed as their sum).
    """
    if check_balance:
        res = balance_residuals(state, action, cfg)
        worst = float(np.max(np.abs(res)))
        if worst > BALANCE_TOLERANCE:
            raise BalanceViolation(
                f"balance residual {worst:.3e} kW exceeds {BALANCE_TOLERANCE:.0e}")
    arbitrage = 0.0
    degradation = 0.0
    for i, ph in enumerate(cfg.phases):
        if not ph.has_storage:
            continue
        st = ph.storage
        up = float(action.u_plus[i])
        um = float(action.u_minus[i])
        arbitrage += state.p * (up / st.eta_plus - st.eta_minus * um)
        degradation += float(ph.cost_deg.value(up)) + float(ph.cost_deg.value(-um))
    controllable = float(sum(ph.cost_l.value(float(action.l[i]))
                             for i, ph in enumerate(cfg.phases)))
    f_bar = float(np.mean(action.f))
    imbalance = float(np.sum(cfg.loss.value(action.f - f_bar)))
    total = arbitrage + degradation + controllable + imbalance
    return CostBreakdown(arbitrage=arbitrage, degradation=degradation,
                         controllable=controllable, imbalance=imbalance,
                         total=total)
