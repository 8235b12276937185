"""Multi-phase power balancing with energy storage under uncertainty.

Real-time drift-plus-penalty controllers (ideal and non-ideal storage),
a per-slot ADMM solver with centralized and message-passing execution,
a greedy benchmark, and an experiment harness.
"""

from .errors import (AssumptionViolation, BalanceViolation, InvalidConfig,
                     MissingUplink, Nonconverged, NonconvergedBlock,
                     NonPSDCorrelation, NonpositiveNumerator, PhasebalError,
                     ProtocolOrderViolation, SolverFailure,
                     StateBoundViolation)
from .model import (Action, BALANCE_TOLERANCE, CostBreakdown, CostFunction,
                    PhaseConfig, PhaseRanges, StorageParams, SystemConfig,
                    SystemState, balance_residuals, derive_ranges, eval_cost,
                    eval_derivative, system_cost, validate_config)
from .scenario import (ScenarioSpec, StateStream, identity_corr, new_generator,
                       pair_corr, replay_stream)
from .controller import (ControllerParams, ControllerState, SolverOptions,
                         adjust_solution, compute_beta, compute_epsilon,
                         compute_v_max, initial_state, make_params, step,
                         step_ideal, step_nonideal, update_energy_state)
from .baseline import greedy_step, greedy_step_ideal, greedy_step_nonideal
from .solver import (PerSlotProblem, SolveResult, build_problem, dual_update,
                     flow_update, grid_minimize, grid_solve, oracle_solve,
                     phase_block_update, solve)
from .distributed import (DistributedResult, DownlinkMsg, PhaseAgent,
                          SubstationCoordinator, UplinkMsg,
                          run_distributed_solve)
from .harness import (BoundsReport, RunConfig, RunSummary, SlotRecord,
                      check_equal_allocation, compute_theorem_bounds,
                      default_run, default_system, load_run_config,
                      parse_run_config, run_admm_trace, run_simulation,
                      run_sweep)

__version__ = "0.1.0"
