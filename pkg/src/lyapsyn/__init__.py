"""Feedback synthesis and closed-loop verification for time-varying systems.

Given a plant with bounded disturbances and a time-varying Lyapunov-type
certificate, the package constructs a continuous time-varying stabilizing
feedback in stages (unit-segment profile over a partition of unity, banded
level scheduling, interleaving of two staggered schedules, final gated or
uniform law), simulates the closed loop with subgrid-aligned fixed steps,
and checks every intermediate decrease and containment certificate as well
as the resulting output-stability properties on trajectory batches.
"""

from .kfuncs import MonotoneMap, bump1d, power_map, smooth_step
from .model import (
    BoxGrid,
    Certificate,
    ConfigurationError,
    DisturbancePath,
    FinitePoints,
    FullSpace,
    NonnegativeCone,
    SamplePlan,
    SymmetricBox,
    SystemModel,
    builtin_system,
    check_hypotheses,
)
from .minimax import (
    CertificateSearchError,
    ControlSelection,
    MinimaxConfig,
    b_tilde,
    epsilon_fn,
    phi_bound,
    psi,
    select_control,
    worst_derivative,
)
from .unitloop import (
    CoverageError,
    Covering,
    GridSpec,
    SegmentFeedback,
    WorkingRegion,
    average_decrease,
    boundary_smoothness_check,
    build_covering,
)
from .lattice import LatticeParams, LatticePatchTable
from .scheduler import (
    BandGridError,
    BankConfig,
    FeedbackBank,
    LevelSchedule,
    check_containment,
    check_step_decrease,
    default_schedule,
    schedule_table,
)
from .interleave import (
    InterleavePair,
    check_two_step_decrease,
    k_tilde,
    make_pair,
    rho_tilde,
    rho_tilde_table,
)
from .stabilize import (
    ClosedLoopField,
    FeedbackLaw,
    closed_loop_field,
    deadzone_exit_time,
    feedback_deadzone,
    feedback_uniform,
    raw_interleave_law,
    raw_scheduler_law,
)
from .sim import (
    DisturbanceStrategy,
    StepPolicy,
    Trajectory,
    batch,
    integrate,
    read_csv,
    simulate,
    write_csv,
)
from .verify import (
    StabilityReport,
    check_lemma34,
    check_rfc,
    check_rgaos,
    check_urgaos,
    fact2_check,
    tau_cap,
)
from .config import RunConfig, load_config, parse_expression
from .archive import load_archive, save_archive, synthesize

__version__ = "0.1.0"
