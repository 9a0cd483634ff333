//! Utility design under the `f'' <= f'` convexity criterion, optimal power
//! allocation over FDMA subcarriers, and a frame-level cell simulator.

pub mod channel;
pub mod power;
pub mod sched;
pub mod sim;
pub mod traffic;
pub mod utility;

pub use channel::{
    BetaMatrix, ChannelModel, ChannelParams, ChannelState, LinkBudget, UserMobilityState,
};
pub use power::{
    brute_force_oracle, kkt_allocate, kkt_allocate_from, marginal, objective, waterfill,
    AllocError, AllocationProblem, AllocationResult, Carrier,
};
pub use sched::{
    assign_best_channel, assign_greedy, assign_utility_aware, GreedyOptions, Partition, SchedError,
};
pub use sim::{
    average_utility, class_utility_model, run_scenario, run_scenario_audited, sweep, Audit,
    MetricsRecord, ScenarioConfig, SimError, SweepRow,
};
pub use traffic::{
    ServiceClass, ServiceStats, TrafficModel, TrafficParams, TrafficSession, TruncatedExp,
};
pub use utility::{
    criterion_check, evaluate, fit_polynomial_utility, make_utility, normalize, residual_t,
    CaseParams, CriterionReport, Lemma2Class, PolynomialFit, UtilityError, UtilityKind,
    UtilityModel, UtilitySpec,
};
