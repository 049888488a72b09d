"""Reconstruction of the reaction coefficient q in -div(sigma grad u) + q u^m = f
from noisy interior data, with P1 finite elements and box-constrained
Tikhonov regularisation."""
from .assembly import (
    EllipticityError,
    apply_dirichlet,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    dual_norm,
    export_matrix_market,
    l2_project,
    norm,
    quasi_interpolate,
    ritz_project,
    solve_spd,
)
from .experiments import (
    Coupling,
    ManufacturedCase,
    StudyRecord,
    emit_report,
    eoc,
    forward_study,
    generate_noisy_data,
    make_case,
    read_csv,
    reconstruct,
    run_study,
)
from .forward import ConvergenceError, ForwardProblem, NewtonReport, residual, solve_forward, solve_linearized
from .inverse import InverseProblem, OptimizerOptions, ReconstructionResult, gradient, minimize, objective
from .mesh import FeFunction, Mesh, QuadratureRule, build_mesh, evaluate, interpolate, quadrature_for_degree
from .stability import (
    ExponentFit,
    StabilitySample,
    check_lower_bound,
    scan_stability,
    verify_identity_mB,
)

__version__ = "0.1.0"
