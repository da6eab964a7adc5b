"""Bulk-surface FEM with splitting time integrators for parabolic problems
with dynamic boundary conditions."""

from .mesh import (Mesh, MeshError, MeshMetrics, generate_crisscross_square,
                   generate_disk_mesh, load_mesh, mesh_from_arrays,
                   mesh_metrics, save_mesh)
from .assembly import (AssemblyError, BlockSystem, SparseSymMatrix,
                       assemble_block_system, assemble_bulk, assemble_surface,
                       dump_matrix, partition_blocks)
from .linalg import (CflReport, EigenError, SolveConfig, SolveError, SpdSolver,
                     check_cfl, estimate_cM, estimate_cinv, gen_eig_max,
                     solve_spd)
from .problems import (DiscreteInitialData, ProblemError, ProblemSpec,
                       builtin_problem, initial_data, interpolate_exact,
                       load_problem_config, validate_forcing)
from .schemes import (BlowUpError, DiscreteSystem, NewtonConfig, NewtonError,
                      StepState, Trajectory, discretize, integrate, lie_step,
                      monolithic_euler_step, naive_pdae_step, newton_solve,
                      strang_step)
from .cli import (ErrorRecord, EocTable, compute_errors, detect_plateau,
                  eoc_table, run_convergence)

__version__ = "0.1.0"
