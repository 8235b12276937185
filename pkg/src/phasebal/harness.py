"""Experiment orchestration: runs, sweeps, traces, and file outputs.

JSON configs in, CSV/JSON out. Floats are written with 17 significant
digits so repeated identical runs produce byte-identical files. All
costs are cents per (normalized) slot.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import baseline, controller, scenario, solver
from .errors import AssumptionViolation, InvalidConfig, PhasebalError
from .model import (BALANCE_TOLERANCE, Action, CostBreakdown, CostFunction,
                    PhaseConfig, StorageParams, SystemConfig, system_cost,
                    validate_config, derive_ranges)
from .scenario import ScenarioSpec

SLOT_SCHEMA = "slot-record/1"
SWEEP_SCHEMA = "sweep-row/1"

ALGORITHMS = ("proposed", "greedy")

SWEEP_PARAMETERS = ("s_max", "u_max", "eta_roundtrip", "rho1", "rho1_both",
                    "rho2", "n_phases", "s1_max")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig
    scenario: ScenarioSpec
    algorithm: str = "proposed"
    mode: str = "ideal"
    v_policy: str = "v_max"
    v_values: Optional[tuple] = None
    rho: float = solver.DEFAULT_RHO
    horizon: Optional[int] = None
    tol_primal: float = solver.DEFAULT_TOL
    tol_dual: float = solver.DEFAULT_TOL
    max_iter: int = solver.DEFAULT_MAX_ITER
    warm_start: bool = False

    def effective_horizon(self) -> int:
        return self.horizon if self.horizon is not None else self.scenario.horizon

    def solver_options(self) -> controller.SolverOptions:
        return controller.SolverOptions(
            rho=self.rho, tol_primal=self.tol_primal, tol_dual=self.tol_dual,
            max_iter=self.max_iter, warm_start=self.warm_start)


def validate_run_config(run: RunConfig) -> RunConfig:
    validate_config(run.system)
    scenario.validate_spec(run.scenario, run.system)
    if run.algorithm not in ALGORITHMS:
        raise InvalidConfig(f"algorithm must be one of {ALGORITHMS}")
    if run.mode not in controller.MODES:
        raise InvalidConfig(f"mode must be one of {controller.MODES}")
    if run.v_policy not in ("v_max", "explicit"):
        raise InvalidConfig("v_policy must be 'v_max' or 'explicit'")
    if run.v_policy == "explicit" and run.v_values is None:
        raise InvalidConfig("v_policy='explicit' requires v_values")
    if run.rho <= 0:
        raise InvalidConfig("rho must be positive")
    if run.effective_horizon() <= 0:
        raise InvalidConfig("horizon must be positive")
    return run


def controller_params(run: RunConfig) -> controller.ControllerParams:
    v_values = run.v_values if run.v_policy == "explicit" else None
    return controller.make_params(run.system, run.mode, v_values=v_values)


# ---------------------------------------------------------------------------
# per-slot records and run summary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlotRecord:
    t: int
    p: float
    r: tuple
    l: tuple
    u_plus: tuple
    u_minus: tuple
    f: tuple
    s: tuple  # energy states at slot start
    cost: CostBreakdown
    iterations: int
    primal_residual: float
    dual_residual: float


@dataclass(frozen=True)
class RunSummary:
    algorithm: str
    mode: str
    seed: int
    horizon: int
    rho: float
    v: tuple
    beta: tuple
    mean_cost: float
    mean_arbitrage: float
    mean_degradation: float
    mean_controllable: float
    mean_imbalance: float
    mean_abs_flow_dev: tuple
    gap_bound: float
    finite_t_term: float
    epsilon: float
    lower_bound: float
    feasible_states: bool
    feasible_balance: bool
    complementarity_ok: bool
    mean_solver_iterations: float
    csv_schema: str = SLOT_SCHEMA


@dataclass(frozen=True)
class BoundsReport:
    """Performance-bound constants for a completed run.

    gap = sum over storage phases of u_max^2/(2*v); the time-averaged
    cost exceeds the long-run optimum by at most gap (plus epsilon in
    non-ideal mode), so mean_cost - gap - epsilon lower-bounds the
    optimum. finite_t_term adds the start-up transient
    (s_initial - beta)^2 / (2*T*v) per phase.
    """

    gap: float
    finite_t_term: float
    epsilon: float
    lower_bound: float


def compute_theorem_bounds(run: RunConfig, mean_cost: Optional[float] = None) -> BoundsReport:
    cfg = run.system
    ranges = derive_ranges(cfg)
    params = controller.make_params(
        cfg, run.mode,
        v_values=run.v_values if run.v_policy == "explicit" else None,
        ranges=ranges)
    t_len = run.effective_horizon()
    gap = 0.0
    finite_t = 0.0
    for i, ph in enumerate(cfg.phases):
        if not ph.has_storage:
            continue
        st = ph.storage
        gap += st.u_max ** 2 / (2.0 * params.v[i])
        finite_t += 0.5 * (st.s_initial - params.beta[i]) ** 2 / (t_len * params.v[i])
    eps = controller.compute_epsilon(cfg, ranges) if run.mode == "nonideal" else 0.0
    lower = (mean_cost - gap - eps) if mean_cost is not None else float("nan")
    return BoundsReport(gap=gap, finite_t_term=finite_t, epsilon=eps,
                        lower_bound=lower)


def run_simulation(run: RunConfig, out_dir: Optional[str] = None):
    """Execute one seeded run; returns (RunSummary, [SlotRecord]).

    Writes ``slots.csv`` and ``summary.json`` under ``out_dir`` when
    given. Identical configs produce byte-identical files.
    """
    validate_run_config(run)
    cfg = run.system
    spec = scenario.with_horizon(run.scenario, run.effective_horizon())
    stream = scenario.new_generator(spec, cfg)
    options = run.solver_options()

    proposed = run.algorithm == "proposed"
    if proposed:
        params = controller_params(run)
        ctrl = controller.initial_state(cfg)
        v, beta = params.v, params.beta
    else:
        ctrl_s = controller.initial_state(cfg).s
        v = beta = tuple(0.0 for _ in range(cfg.n))

    s_lo = np.array([ph.storage.s_min if ph.has_storage else 0.0 for ph in cfg.phases])
    s_hi = np.array([ph.storage.s_max if ph.has_storage else 0.0 for ph in cfg.phases])
    storage_mask = np.array([ph.has_storage for ph in cfg.phases])
    eta_p = np.array([ph.storage.eta_plus if ph.has_storage else 1.0
                      for ph in cfg.phases])
    eta_m = np.array([ph.storage.eta_minus if ph.has_storage else 1.0
                      for ph in cfg.phases])

    records = []
    warm = None
    sums = np.zeros(5)  # arbitrage, degradation, controllable, imbalance, total
    flow_dev = np.zeros(cfg.n)
    iter_sum = 0
    feasible_states = True
    feasible_balance = True
    complementarity = True

    for state in stream:
        s_now = ctrl.s if proposed else ctrl_s
        if proposed:
            action, ctrl, info = controller.step(cfg, params, ctrl, state,
                                                 options, warm)
        else:
            action, ctrl_s, info = baseline.greedy_step(cfg, s_now, state,
                                                        run.mode, options, warm)
        warm = info.result
        cost = system_cost(cfg, state, action, check_balance=False)

        res = np.abs(action.f + state.r + action.l
                     + eta_m * action.u_minus - action.u_plus / eta_p)
        if float(res.max()) > BALANCE_TOLERANCE:
            feasible_balance = False
        if np.any(action.u_plus * action.u_minus != 0.0):
            complementarity = False
        s_check = ctrl.s if proposed else ctrl_s
        if np.any(storage_mask & ((s_check < s_lo) | (s_check > s_hi))):
            feasible_states = False

        sums += np.array([cost.arbitrage, cost.degradation, cost.controllable,
                          cost.imbalance, cost.total])
        flow_dev += np.abs(action.f - np.mean(action.f))
        iter_sum += info.iterations
        records.append(SlotRecord(
            t=state.slot, p=state.p, r=tuple(state.r), l=tuple(action.l),
            u_plus=tuple(action.u_plus), u_minus=tuple(action.u_minus),
            f=tuple(action.f), s=tuple(s_now), cost=cost,
            iterations=info.iterations, primal_residual=info.primal_residual,
            dual_residual=info.dual_residual))

    t_len = len(records)
    means = sums / t_len
    mean_cost = float(means[0] + means[1] + means[2] + means[3])
    bounds = compute_theorem_bounds(run, mean_cost=mean_cost) if proposed else None
    summary = RunSummary(
        algorithm=run.algorithm, mode=run.mode, seed=run.scenario.seed,
        horizon=t_len, rho=run.rho, v=tuple(v), beta=tuple(beta),
        mean_cost=mean_cost,
        mean_arbitrage=float(means[0]), mean_degradation=float(means[1]),
        mean_controllable=float(means[2]), mean_imbalance=float(means[3]),
        mean_abs_flow_dev=tuple(flow_dev / t_len),
        gap_bound=bounds.gap if bounds else 0.0,
        finite_t_term=bounds.finite_t_term if bounds else 0.0,
        epsilon=bounds.epsilon if bounds else 0.0,
        lower_bound=bounds.lower_bound if bounds else float("nan"),
        feasible_states=feasible_states, feasible_balance=feasible_balance,
        complementarity_ok=complementarity,
        mean_solver_iterations=iter_sum / t_len)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_slot_csv(os.path.join(out_dir, "slots.csv"), records, cfg.n)
        write_summary_json(os.path.join(out_dir, "summary.json"), summary)
    return summary, records


# ---------------------------------------------------------------------------
# file output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def slot_csv_header(n: int) -> list:
    cols = ["t", "p"]
    for name in ("r", "l", "u_plus", "u_minus", "f", "s"):
        cols.extend(f"{name}_{i + 1}" for i in range(n))
    cols += ["cost_total", "cost_arbitrage", "cost_degradation",
             "cost_controllable", "cost_imbalance",
             "solver_iterations", "primal_residual", "dual_residual"]
    return cols


def write_slot_csv(path, records, n: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(slot_csv_header(n))
        for rec in records:
            row = [rec.t, _fmt(rec.p)]
            for seq in (rec.r, rec.l, rec.u_plus, rec.u_minus, rec.f, rec.s):
                row.extend(_fmt(x) for x in seq)
            row += [_fmt(rec.cost.total), _fmt(rec.cost.arbitrage),
                    _fmt(rec.cost.degradation), _fmt(rec.cost.controllable),
                    _fmt(rec.cost.imbalance), rec.iterations,
                    _fmt(rec.primal_residual), _fmt(rec.dual_residual)]
            writer.writerow(row)


def write_summary_json(path, summary: RunSummary) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: float
    algorithm: str
    feasible: bool
    mean_cost: float
    std_cost: float
    gap_bound: float
    lower_bound: float
    n_seeds: int
    seeds: tuple
    note: str = ""


def _replace_storage(cfg: SystemConfig, **changes) -> SystemConfig:
    phases = []
    for ph in cfg.phases:
        if ph.has_storage:
            st = replace(ph.storage, **changes)
            phases.append(replace(ph, storage=st))
        else:
            phases.append(ph)
    return replace(cfg, phases=tuple(phases))


def apply_sweep_value(base: RunConfig, parameter: str, value: float) -> RunConfig:
    """Return a copy of ``base`` with one named numeric knob changed.

    Raises InvalidConfig (or a subclass) for infeasible combinations,
    e.g. a correlation that breaks positive semidefiniteness or a
    capacity too small for a positive control weight; sweeps report
    those as flagged rows instead of dropping them.
    """
    cfg, spec = base.system, base.scenario
    if parameter == "s_max":
        phases = []
        for ph in cfg.phases:
            if ph.has_storage:
                st = ph.storage
                s_init = min(max(st.s_initial, st.s_min), value)
                phases.append(replace(ph, storage=replace(st, s_max=value,
                                                          s_initial=s_init)))
            else:
                phases.append(ph)
        out = replace(base, system=replace(cfg, phases=tuple(phases)))
    elif parameter == "u_max":
        out = replace(base, system=_replace_storage(cfg, u_max=value))
    elif parameter == "eta_roundtrip":
        eta = float(np.sqrt(value))
        out = replace(base, system=_replace_storage(cfg, eta_plus=eta,
                                                    eta_minus=eta))
    elif parameter == "rho1":
        corr = scenario.pair_corr(cfg.n, [(0, 1)], value)
        out = replace(base, scenario=replace(spec, phase_corr=corr))
    elif parameter == "rho1_both":
        corr = scenario.pair_corr(cfg.n, [(0, 1), (0, 2)], value)
        out = replace(base, scenario=replace(spec, phase_corr=corr))
    elif parameter == "rho2":
        out = replace(base, scenario=replace(spec, time_corr=value))
    elif parameter == "n_phases":
        n = int(value)
        template = cfg.phases[0]
        new_cfg = replace(cfg, phases=tuple(template for _ in range(n)))
        new_spec = replace(spec,
                           flow_mean=tuple(spec.flow_mean[0] for _ in range(n)),
                           flow_std=tuple(spec.flow_std[0] for _ in range(n)),
                           phase_corr=None)
        out = replace(base, system=new_cfg, scenario=new_spec)
    elif parameter == "s1_max":
        if cfg.n != 3 or not all(ph.has_storage for ph in cfg.phases):
            raise InvalidConfig("s1_max sweep needs 3 phases, all with storage")
        s_total = sum(ph.storage.s_max for ph in cfg.phases)
        s2 = cfg.phases[1].storage.s_max
        s3 = s_total - value - s2
        phases = []
        for ph, cap in zip(cfg.phases, (value, s2, s3)):
            st = ph.storage
            s_init = min(max(st.s_initial, st.s_min), cap)
            phases.append(replace(ph, storage=replace(st, s_max=cap,
                                                      s_initial=s_init)))
        out = replace(base, system=replace(cfg, phases=tuple(phases)))
    else:
        raise InvalidConfig(
            f"unknown sweep parameter {parameter!r}; supported: {SWEEP_PARAMETERS}")
    return out


def run_sweep(base: RunConfig, parameter: str, values, seeds,
              algorithms=ALGORITHMS, out_dir: Optional[str] = None):
    """Run paired-seed replications of each algorithm at each value.

    Every requested value appears exactly once per algorithm in the
    output; infeasible points are emitted with ``feasible=False`` and
    NaN statistics rather than silently dropped.
    """
    rows = []
    for value in values:
        try:
            point = apply_sweep_value(base, parameter, float(value))
            validate_run_config(point)
            # probing controller parameters surfaces capacity issues early
            controller_params(replace(point, algorithm="proposed"))
            scenario.new_generator(
                scenario.with_horizon(point.scenario, 1), point.system)
        except (InvalidConfig, PhasebalError) as exc:
            for alg in algorithms:
                rows.append(SweepRow(parameter=parameter, value=float(value),
                                     algorithm=alg, feasible=False,
                                     mean_cost=float("nan"), std_cost=float("nan"),
                                     gap_bound=float("nan"), lower_bound=float("nan"),
                                     n_seeds=0, seeds=tuple(seeds), note=str(exc)))
            continue
        for alg in algorithms:
            costs = []
            gap = lower = float("nan")
            for seed in seeds:
                run = replace(point, algorithm=alg,
                              scenario=scenario.with_seed(point.scenario, seed))
                summary, _ = run_simulation(run)
                costs.append(summary.mean_cost)
                if alg == "proposed":
                    gap = summary.gap_bound
                    lower = summary.lower_bound
            costs = np.asarray(costs)
            rows.append(SweepRow(parameter=parameter, value=float(value),
                                 algorithm=alg, feasible=True,
                                 mean_cost=float(costs.mean()),
                                 std_cost=float(costs.std(ddof=1)) if len(costs) > 1 else 0.0,
                                 gap_bound=gap, lower_bound=lower,
                                 n_seeds=len(seeds), seeds=tuple(seeds)))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(os.path.join(out_dir, f"sweep_{parameter}.csv"), rows)
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "algorithm", "feasible",
                         "mean_cost", "std_cost", "gap_bound", "lower_bound",
                         "n_seeds", "seeds", "note"])
        for row in rows:
            writer.writerow([row.parameter, _fmt(row.value), row.algorithm,
                             _fmt(row.feasible), _fmt(row.mean_cost),
                             _fmt(row.std_cost), _fmt(row.gap_bound),
                             _fmt(row.lower_bound), row.n_seeds,
                             ";".join(str(s) for s in row.seeds), row.note])


# ---------------------------------------------------------------------------
# convergence trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    rho: float
    k: int
    objective: float
    gap: float
    rel_gap: float
    primal_residual: float
    dual_residual: float


def representative_problem(run: RunConfig):
    """First-slot instance under the run's controller weighting."""
    validate_run_config(run)
    cfg = run.system
    stream = scenario.new_generator(scenario.with_horizon(run.scenario, 1), cfg)
    state = next(iter(stream))
    params = controller_params(run)
    ctrl = controller.initial_state(cfg)
    weight = controller.drift_weights(cfg, params, ctrl.s)
    return solver.build_problem(cfg, state, run.mode, weight=weight)


def run_admm_trace(run: RunConfig, rho_values=(1.0, 5.0, 20.0),
                   max_iter: int = 5000, out_dir: Optional[str] = None):
    """Objective-gap trace per iteration for each penalty value.

    The reference objective comes from a high-accuracy solve
    (residual tolerances 1e-10); ``rel_gap`` is
    max(gap, 0) / (1 + |reference|).
    """
    problem = representative_problem(run)
    ref = solver.solve(problem, rho=solver.DEFAULT_RHO, tol_primal=1e-10,
                       tol_dual=1e-10, max_iter=200000)
    ref_obj = ref.objective
    rows = []
    for rho in rho_values:
        res = solver.solve(problem, rho=float(rho), tol_primal=0.0, tol_dual=0.0,
                           max_iter=max_iter, trace=True,
                           halt_on_convergence=False)
        for pt in res.trace:
            gap = pt.objective - ref_obj
            rows.append(TraceRow(rho=float(rho), k=pt.k, objective=pt.objective,
                                 gap=gap,
                                 rel_gap=max(gap, 0.0) / (1.0 + abs(ref_obj)),
                                 primal_residual=pt.primal_residual,
                                 dual_residual=pt.dual_residual))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "admm_trace.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rho", "k", "objective", "gap", "rel_gap",
                             "primal_residual", "dual_residual"])
            for row in rows:
                writer.writerow([_fmt(row.rho), row.k, _fmt(row.objective),
                                 _fmt(row.gap), _fmt(row.rel_gap),
                                 _fmt(row.primal_residual), _fmt(row.dual_residual)])
    return rows, ref_obj


# ---------------------------------------------------------------------------
# storage allocation analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AllocationReport:
    s_total: float
    grid_step: float
    argmin: tuple
    min_bound: float
    equal_allocation: tuple
    equal_bound: float
    equal_is_argmin: bool
    simulated: tuple = ()  # ((allocation, mean_cost), ...)


def _assert_homogeneous(cfg: SystemConfig) -> None:
    if not all(ph.has_storage for ph in cfg.phases):
        raise AssumptionViolation("every phase must have storage")
    ref = cfg.phases[0]
    for ph in cfg.phases[1:]:
        same = (ph.storage.s_min == ref.storage.s_min
                and ph.storage.u_max == ref.storage.u_max
                and ph.storage.eta_plus == ref.storage.eta_plus
                and ph.storage.eta_minus == ref.storage.eta_minus
                and ph.cost_l.coefficients == ref.cost_l.coefficients
                and ph.cost_deg.coefficients == ref.cost_deg.coefficients
                and (ph.r_min, ph.r_max, ph.f_min, ph.f_max)
                == (ref.r_min, ref.r_max, ref.f_min, ref.f_max))
        if not same:
            raise AssumptionViolation(
                "equal-allocation analysis assumes homogeneous phases")


def check_equal_allocation(base: RunConfig, s_total: Optional[float] = None,
                           grid_step: float = 0.5, simulate=(),
                           seeds=(1, 2, 3, 4, 5),
                           out_dir: Optional[str] = None) -> AllocationReport:
    """Brute-force the gap bound over capacity splits summing to ``s_total``.

    Evaluates sum u_max^2/(2*v_max(s_i)) on the grid (splits that make
    any phase's control weight nonpositive are excluded) and reports
    whether the equal split attains the minimum within one grid cell.
    ``simulate`` optionally lists allocations to simulate with the
    proposed algorithm over the given seeds.
    """
    cfg = base.system
    _assert_homogeneous(cfg)
    n = cfg.n
    st = cfg.phases[0].storage
    if s_total is None:
        s_total = sum(ph.storage.s_max for ph in cfg.phases)
    threshold = st.s_min + 2.0 * st.u_max  # v_max numerator must be positive

    rg = derive_ranges(cfg)[0]
    mode = base.mode

    def bound_term(cap: float) -> float:
        vmax = controller.compute_v_max(replace(st, s_max=cap), rg,
                                        cfg.p_min, cfg.p_max, mode)
        return st.u_max ** 2 / (2.0 * vmax)

    n_steps = int(round(s_total / grid_step))
    grid = [round(i * grid_step, 10) for i in range(n_steps + 1)]
    best = None
    best_val = float("inf")

    def recurse(prefix, remaining):
        nonlocal best, best_val
        if len(prefix) == n - 1:
            last = round(remaining, 10)
            if last < 0 or abs(last / grid_step - round(last / grid_step)) > 1e-6:
                return
            alloc = prefix + (last,)
            if any(c <= threshold for c in alloc):
                return
            val = sum(bound_term(c) for c in alloc)
            if val < best_val - 1e-15:
                best_val = val
                best = alloc
            return
        for cap in grid:
            if cap > remaining + 1e-9:
                break
            recurse(prefix + (cap,), remaining - cap)

    recurse((), s_total)
    if best is None:
        raise AssumptionViolation(
            "no feasible allocation on the grid; total capacity too small")

    equal = tuple(s_total / n for _ in range(n))
    equal_feasible = equal[0] > threshold
    equal_bound = sum(bound_term(c) for c in equal) if equal_feasible else float("inf")
    equal_is_argmin = all(abs(a - e) <= grid_step + 1e-9
                          for a, e in zip(best, equal))

    simulated = []
    for alloc in simulate:
        costs = []
        for seed in seeds:
            phases = []
            for ph, cap in zip(cfg.phases, alloc):
                stp = ph.storage
                s_init = min(max(stp.s_initial, stp.s_min), cap)
                phases.append(replace(ph, storage=replace(stp, s_max=float(cap),
                                                          s_initial=s_init)))
            run = replace(base, algorithm="proposed",
                          system=replace(cfg, phases=tuple(phases)),
                          scenario=scenario.with_seed(base.scenario, seed))
            summary, _ = run_simulation(run)
            costs.append(summary.mean_cost)
        simulated.append((tuple(float(c) for c in alloc),
                          float(np.mean(costs))))

    report = AllocationReport(s_total=float(s_total), grid_step=float(grid_step),
                              argmin=best, min_bound=best_val,
                              equal_allocation=equal, equal_bound=equal_bound,
                              equal_is_argmin=equal_is_argmin,
                              simulated=tuple(simulated))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "allocation_report.json"), "w") as fh:
            json.dump(asdict(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


# ---------------------------------------------------------------------------
# JSON config ingestion
# ---------------------------------------------------------------------------

def _cost_from_dict(d, name) -> CostFunction:
    if not isinstance(d, dict) or "kind" not in d:
        raise InvalidConfig(f"{name}: expected an object with a 'kind'")
    if d["kind"] != "quadratic":
        raise InvalidConfig(
            f"{name}: JSON configs support kind 'quadratic' only "
            "(custom curves are API-only)")
    coeffs = d.get("coefficients", [])
    if len(coeffs) != 3:
        raise InvalidConfig(f"{name}: quadratic needs [a, b, c]")
    return CostFunction.quadratic(*[float(x) for x in coeffs])


def parse_run_config(doc: dict) -> RunConfig:
    try:
        sysd = doc["system"]
        phases = []
        for i, phd in enumerate(sysd["phases"]):
            storage = None
            cost_deg = None
            if phd.get("storage") is not None:
                sd = phd["storage"]
                storage = StorageParams(
                    s_min=float(sd["s_min"]), s_max=float(sd["s_max"]),
                    u_max=float(sd["u_max"]),
                    eta_plus=float(sd.get("eta_plus", 1.0)),
                    eta_minus=float(sd.get("eta_minus", 1.0)),
                    s_initial=float(sd.get("s_initial", sd["s_min"])))
                cost_deg = _cost_from_dict(phd["cost_deg"], f"phase {i} cost_deg")
            phases.append(PhaseConfig(
                cost_l=_cost_from_dict(phd["cost_l"], f"phase {i} cost_l"),
                r_min=float(phd["r_min"]), r_max=float(phd["r_max"]),
                f_min=float(phd["f_min"]), f_max=float(phd["f_max"]),
                storage=storage, cost_deg=cost_deg))
        system = SystemConfig(phases=tuple(phases),
                              loss=_cost_from_dict(sysd["loss"], "loss"),
                              p_min=float(sysd["p_min"]),
                              p_max=float(sysd["p_max"]),
                              slot_duration=float(sysd.get("slot_duration", 1.0)))
        scd = doc["scenario"]
        spec = ScenarioSpec(
            seed=int(scd["seed"]), horizon=int(scd["horizon"]),
            flow_mean=tuple(float(x) for x in scd["flow_mean"]),
            flow_std=tuple(float(x) for x in scd["flow_std"]),
            phase_corr=(tuple(tuple(float(x) for x in row)
                              for row in scd["phase_corr"])
                        if scd.get("phase_corr") is not None else None),
            time_corr=float(scd.get("time_corr", 0.0)),
            rng=scd.get("rng", "pcg64"))
        sol = doc.get("solver", {})
        run = RunConfig(
            system=system, scenario=spec,
            algorithm=doc.get("algorithm", "proposed"),
            mode=doc.get("mode", "ideal"),
            v_policy=doc.get("v_policy", "v_max"),
            v_values=(tuple(float(x) for x in doc["v_values"])
                      if doc.get("v_values") is not None else None),
            rho=float(doc.get("rho", solver.DEFAULT_RHO)),
            horizon=int(doc["horizon"]) if doc.get("horizon") is not None else None,
            tol_primal=float(sol.get("tol_primal", solver.DEFAULT_TOL)),
            tol_dual=float(sol.get("tol_dual", solver.DEFAULT_TOL)),
            max_iter=int(sol.get("max_iter", solver.DEFAULT_MAX_ITER)),
            warm_start=bool(sol.get("warm_start", False)))
    except KeyError as exc:
        raise InvalidConfig(f"missing config key: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed config value: {exc}") from exc
    return validate_run_config(run)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_run_config(json.load(fh))


# ---------------------------------------------------------------------------
# reference setup used by scripts and tests
# ---------------------------------------------------------------------------

def default_phase() -> PhaseConfig:
    return PhaseConfig(
        cost_l=CostFunction.quadratic(1.5),
        r_min=-8.0, r_max=8.0, f_min=-5.0, f_max=5.0,
        storage=StorageParams(s_min=2.0, s_max=10.0, u_max=1.0,
                              eta_plus=1.0, eta_minus=1.0, s_initial=6.0),
        cost_deg=CostFunction.quadratic(0.2))


def default_system(n: int = 3) -> SystemConfig:
    return SystemConfig(phases=tuple(default_phase() for _ in range(n)),
                        loss=CostFunction.quadratic(10.0),
                        p_min=7.0, p_max=12.0)


def default_run(seed: int = 1, horizon: int = 500, n: int = 3,
                **overrides) -> RunConfig:
    run = RunConfig(system=default_system(n),
                    scenario=ScenarioSpec(seed=seed, horizon=horizon,
                                          flow_mean=(0.0,) * n,
                                          flow_std=(4.0,) * n))
    return replace(run, **overrides) if overrides else run
