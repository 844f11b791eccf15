"""Immersed finite cell method on Cartesian meshes with SIPIC preconditioning."""

from .geometry import (
    CartesianMesh,
    Circle,
    Difference,
    RotatedRectangle,
    TrimmedCell,
    min_volume_fraction,
    quarter_plate_with_hole,
    square_with_circular_exclusion,
    tessellate,
)
from .basis import BasisSpace, build_space, evaluate
from .assembly import (
    FcmSystem,
    StabilizationResult,
    assemble_elasticity_2d,
    assemble_poisson,
    exact_plate_solution,
    local_stabilization,
)
from .linalg import (
    CgReport,
    SingularSystemError,
    cg_solve,
    condition_number,
    condition_number_scaled,
    power_iteration,
    smallest_eigenvalue,
)
from .sipic import (
    SipicPreconditioner,
    apply_preconditioned,
    build_sipic,
    group,
    identify,
    orthonormalize,
    scale,
)
from .experiments import (
    ScenarioConfig,
    SweepRecord,
    fit_loglog_slope,
    run_manufactured,
    run_plate_hole,
    run_rotating_square,
)

__version__ = "0.1.0"
