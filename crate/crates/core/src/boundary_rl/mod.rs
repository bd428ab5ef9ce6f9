//! Stage 2a: loss-band control of the reconstructor and boundary negatives.

pub mod agent;
pub mod controller;
pub mod run;

pub use agent::{agent_update, Agent, AgentConfig, AgentDiagnostics, ReplayBuffer};
pub use controller::{build_state, reward, signed_step, BandConfig, ControllerState, Transition};
pub use run::{
    apply_manual_update, calibrate_step, generate_negatives, new_agent, run_stage2_rl,
    write_trajectory_csv, ControllerKind, ManualUpdate, NegativeEntry, PoolEntry, Pools, RlConfig,
    RlOutcome, RlSummary, DIVERGENCE_FACTOR, POOLS_KIND,
};
