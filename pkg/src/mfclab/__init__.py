"""Numerical laboratory for state-constrained mean-field control.

Particle-side: Euler-Maruyama simulation of the constrained N-particle
system and the explicit confinement feedback that turns mean-field controls
into admissible particle controls.  PDE-side: a 1D solver for the penalized
constrained optimality system (backward HJB in mild form coupled to a
conservative Fokker-Planck march).  On top: exact Wasserstein distances,
rare-event survival estimation, and the exit-rate identity linking the two.
"""

__version__ = "0.1.0"

from .measure import (
    EmpiricalMeasure,
    GridMeasure1D,
    LinearConstraint,
    CylindricalConstraint,
    soft_abs_constraint,
    mean_level_constraint,
    eval_constraint,
    flat_derivative,
    wasserstein_1d,
    wasserstein_assignment,
)
from .model import (
    DriftField,
    Hamiltonian,
    Lagrangian,
    LinearCost,
    ModelSpec,
    ZeroCost,
    legendre_check,
    particle_running_cost,
    quadratic_hamiltonian,
    quadratic_lagrangian,
    tanh_attraction_drift,
    zero_drift,
)
from .particle import (
    FixedInitial,
    GaussianInitial,
    SimConfig,
    TrajectoryRecord,
    em_step,
    mc_batch,
    simulate,
)
from .freeze import (
    FreezeParams,
    TransferRecord,
    batch_cost_bound,
    freeze_cost_bound,
    freeze_feedback,
    transfer_batch,
    transfer_control,
)
from .mfsolver import (
    MfControl,
    MfSolution,
    SpaceTimeGrid,
    ValueField,
    fp_forward,
    heat_apply,
    hjb_backward,
    mckean_forward,
    solve_mfoc,
    stability_sweep,
)
from .ldp import estimate_survival, ldp_compare, pilot_sized_runs, rate_estimate
