"""Distributionally robust regret-optimal output-feedback control."""

__version__ = "0.1.0"

from .ambiguity import (AmbiguityBall, DiscreteNominal, Ellipsoid, MomentNominal,
                        cholesky_lower, coupling_cost, estimate_moments,
                        sample_gaussian, validate)
from .conic import (ConicProgram, Block, LmiBuilder, NonNeg, PSD, SolveReport,
                    SolverSettings, VariableLayout, min_eig, solve, svec_pack,
                    svec_unpack)
from .lift import (AffineController, GainStructure, LiftedOperators, SystemDef,
                   build_lifted, simulate, structure_factors)
from .regret import (Benchmark, CostWeights, benchmark_input, build_benchmark,
                     eval_cost, eval_regret, expected_regret_moments, regret_map)
from .synthesis import (SynthesisProblem, SynthesisResult, assemble_certificate,
                        build_full_program, build_reduced_program, recover_affine,
                        synthesize)
from .elimination import (EliminationData, ProjectionInfeasible,
                          build_eliminated_program, build_elimination_data,
                          kernel_basis, reconstruct_gains, solve_projection_lmi)
from .distributed import ConsensusState, build_local_problem, consensus_solve
from .worstcase import (Quadratic, SolverFailure, WceSolution, atom_dual_block,
                        build_discrete_dual, build_moment_dual, nominal_expectation,
                        wce, wce_discrete, wce_moment)
from .harness import (ConfigError, ExperimentConfig, InvariantViolation,
                      config_from_dict, load_config, mass_spring_config,
                      run_compare, run_eval, run_synth, run_wce)
