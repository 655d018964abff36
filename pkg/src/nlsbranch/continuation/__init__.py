"""Solution branches of the stationary problem: seeding, continuation and switching."""
from .problem import PHYSICAL, RENORMALIZED, Discretization, convert, nonlinear_remainder, residual
from .solvers import (BranchPoint, SingularJacobian, SolverError, bordered_solve,
                      hyperplane_correct, make_point, newton_solve, seed_from_infinity,
                      seed_from_zero)
from .branch import (BifurcationEvent, Branch, ContinuationConfig, NoSwitchError,
                     arclength_tangent, change_frame, continue_branch, detect_event,
                     enforce_symmetry, kernel_symmetry, make_branch, natural_tangent,
                     switch_branch)
