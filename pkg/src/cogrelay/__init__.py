"""Dynamic hop selection and power control for cognitive multi-hop relays.

The package splits the problem along its two natural time scales: `subpolicy`
solves one continuous segment's hop/power control (offline value recursion
plus multiplier calibration, online decentralized decisions), `master`
allocates average power across all potential segments to maximize the minimum
section rate, `sim` runs end-to-end Monte-Carlo experiments against four
reference schemes, and `oracle` verifies the structural claims by brute
force.  `cli` wires everything to configuration files and CSV/JSON outputs.
"""

from .model import (
    FadingDraw,
    PuActivityModel,
    PuActivityState,
    Segment,
    Topology,
    make_linear_route,
    min_safe_distance,
    partition_segments,
    path_loss,
    sample_fading,
    sample_pu_activity,
    segment_probabilities,
    segment_probability,
)
from .subpolicy import (
    CalibratedPolicy,
    CalibrationError,
    DiscreteGains,
    EpisodeRecord,
    RayleighGains,
    SegmentMetrics,
    SegmentProblem,
    ValueTable,
    calibrate_lambda,
    estimate_segment_metrics,
    offline_recursion,
    online_step,
    per_hop_cost,
    per_hop_time,
    power_foc,
    priced_hop_cost,
    run_segment_episode,
    solve_optimal_power,
)
from .master import (
    MasterOptions,
    MasterSolution,
    RateModel,
    flow_balance_identity,
    project_budget,
    section_rate,
    section_rates,
    solve_master,
    subgradient,
)
from .sim import (
    RouteSpec,
    RunMetrics,
    SolverOptions,
    StudySpec,
    run_baseline,
    run_point,
    run_proposed,
    sweep,
)
from .oracle import (
    OracleGuardError,
    TinyInstance,
    brute_force_original,
    brute_force_subproblem,
    run_verification_suite,
    verify_covariance_property,
    verify_exchange_lemma,
    verify_sequence_lemma,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
