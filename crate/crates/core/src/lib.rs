//! Round planning and simulation for wireless federated edge learning.
//!
//! A base station coordinates a fleet of edge devices through synchronized
//! rounds: each device trains on a local mini-batch, uploads its gradient in
//! a dedicated slot of a shared uplink frame, receives the aggregated model
//! in a downlink slot, and applies the update. This crate provides:
//!
//! - average-rate estimation over a fading channel ([`channel`]),
//! - latency models for CPU and GPU devices ([`latency`]),
//! - a loss-decrement proxy and learning-efficiency metric ([`loss`]),
//! - joint batchsize/slot optimizers for both device classes ([`optimizer`]),
//! - a brute-force grid oracle for cross-checking the optimizer ([`oracle`]),
//! - a multi-round training simulator with baseline schemes ([`sim`]).

// Validation sites write `!(x > 0.0)` on purpose: the negation also fails
// NaN, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod error;
pub mod latency;
pub mod loss;
pub mod optimizer;
pub mod oracle;
pub mod rng;
pub mod sim;

pub use channel::{ChannelParams, Fading, RateEstimate};
pub use config::{ComputeProfile, DeviceProfile, Fleet, SystemConfig};
pub use error::{Error, Result};
pub use latency::{CpuProfile, GpuProfile, LatencyBreakdown, ModelCost};
pub use loss::{LearningRateRule, LossProxy};
pub use optimizer::{
    equalize_slots, fit_gpu_profile, preclamp_batch, CpuInstance, DownlinkAllocation, GpuFitSample,
    GpuInstance, KktReport, MuBracket, RoundPlan, Tolerances, UplinkAllocation,
};
pub use oracle::{GridRoundResult, GridSpec};
pub use sim::{
    compare_schemes, Scheme, SchemeComparison, SimSummary, SimulationConfig, SlotPolicy, TrialTrace,
};
