"""Safe, near-optimal output-feedback controller synthesis from noisy data.

The toolkit simulates ground-truth linear plants, estimates their impulse and
free responses from recorded input-output trajectories via Hankel-matrix
algebra, and synthesizes finite-horizon feedback policies through convex
programs over closed-loop response maps, with worst-case safety constraints
and certified robustness to estimation error.
"""

from .behavior import (BootstrapPlan, DataRecord, EstimateBundle, HankelPartition,
                       OracleTruth, assess_errors, build_hankel, check_pe,
                       estimate_ls, estimate_ml, partition_data)
from .conic import ConicProgram, ConicSolution, SolveStatus
from .iop import (ClosedLoopMaps, CostWeights, ToeplitzOperator,
                  achievability_residual, controller_from_responses, cost_j,
                  h_value, oracle_lhs_phi, responses_from_controller,
                  tightened_lhs_f, toeplitz_expand, worst_case_lhs)
from .plant import (NoiseSpec, SafetyPolytope, SignalTrajectory, StateSpaceModel,
                    check_safety, simulate_closed_loop, simulate_open_loop,
                    true_free_response, true_impulse_response)
from .synthesis import (BoundTerms, GoldenGamma, GridRandom, HyperParams,
                        SynthesisResult, golden_section, robust_cost,
                        safe_exploration_policy, search_hyperparams,
                        solve_nominal, solve_robust_inner,
                        solve_tightened_oracle, suboptimality_gap_S,
                        theoretical_bound)

__version__ = "0.1.0"
