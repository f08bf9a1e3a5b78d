"""Differentiable cloth simulation with dry frictional contact.

Projective-dynamics time stepping with Signorini-Coulomb contact, exact
reverse-mode gradients through the stepping (including contact), a
prefactorization-reusing iterative adjoint solver with a direct fallback,
and gradient-based system identification on top.
"""

__version__ = "0.1.0"

from .backward import (
    AdjointSolveReport,
    AdjointState,
    assemble_delta_P,
    assemble_delta_R,
    backward_step,
    parameter_gradients,
    solve_adjoint,
    trajectory_gradient,
)
from .config import SceneConfig, apply_params, parse_config, serialize_config
from .contact import (
    Contact,
    ContactCase,
    ContactSet,
    HalfSpace,
    SelfCollisionConfig,
    SphereObstacle,
    detect,
    enforce_signorini_coulomb,
    local_case_jacobians,
)
from .energy import (
    ConstraintSet,
    PDConstraint,
    ProjectionResult,
    assemble_P,
    build_constraints,
    project_local,
)
from .errors import ClothSimError
from .forward import (
    Model,
    SimState,
    SolverOptions,
    StepTape,
    WindModel,
    external_force,
    global_step_velocity,
    simulate,
    step,
)
from .mesh import MassMatrix, TriMesh, load_obj, lumped_mass, make_grid, save_obj
from .optimize import (
    FinalStateL2,
    ParamSpace,
    TrajectoryL2,
    fd_gradient,
    minimize_es,
    minimize_lbfgsb,
)
from .runners import run_benchmark, run_gradcheck, run_optimize, run_simulate
from .scenes import build_model, bundled_config, bundled_scene_names, gradcheck_scenes
from .sparse import (
    SparseMatrix,
    SymmetricFactorization,
    factorize_spd,
    solve_general,
    solve_prefactorized,
)
