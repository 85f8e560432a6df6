//! Multi-round training simulation over a fading channel.
//!
//! Each trial replays a training run round by round: rates are redrawn from
//! a per-(trial, round, device, link) random substream (or frozen when the
//! channel is static), the scheduling scheme picks batchsizes and slots, the
//! true latency model prices the round, and the loss proxy advances. Traces
//! are exact functions of the configuration, so identical configurations
//! produce byte-identical outputs.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::RateEstimate;
use crate::config::{ComputeProfile, DeviceProfile, Fleet, SystemConfig};
use crate::error::{Error, Result};
use crate::latency::{
    cpu_compute_latency, cpu_update_latency, gpu_compute_latency, gpu_update_latency,
    round_latency, transmission_latency, GpuProfile,
};
use crate::loss::{learning_rate, LearningRateRule, LossProxy};
use crate::optimizer::{CpuInstance, GpuInstance, RoundPlan, Tolerances};
use crate::rng::substream;

/// Substream tag namespaces so independent draws never collide.
const TAG_POSITION: u64 = 0x01;
const TAG_RATE: u64 = 0x03;
const TAG_BATCH: u64 = 0x04;

/// Batch scheduling scheme for a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Jointly optimized batchsizes and slots.
    Proposed,
    /// Every device trains on a single sample per round.
    Online,
    /// Every device trains on the full per-device cap.
    FullBatch,
    /// Every device trains on half the cap (rounded up).
    EqualAllocation,
    /// Fresh uniform batchsizes in [1, cap] each round.
    RandomBatch,
}

/// Slot policy for the baseline schemes. `Proposed` always uses its own
/// jointly optimized slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPolicy {
    /// Slots that equalize per-device completion times.
    Optimal,
    /// Equal split of the frame.
    Equal,
}

/// Simulation controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub rounds: u32,
    pub trials: u32,
    pub master_seed: u64,
    pub scheme: Scheme,
    pub slot_policy: SlotPolicy,
    /// Freeze the fleet's rate estimates for all rounds instead of
    /// redrawing them.
    pub static_channel: bool,
    /// Round every transmission up to whole frames.
    pub integer_frames: bool,
    pub loss: LossProxy,
    pub learning_rate: LearningRateRule,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            rounds: 50,
            trials: 1,
            master_seed: 0xFEE1,
            scheme: Scheme::Proposed,
            slot_policy: SlotPolicy::Optimal,
            static_channel: false,
            integer_frames: false,
            loss: LossProxy::default(),
            learning_rate: LearningRateRule::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.trials == 0 {
            return Err(Error::invalid("rounds and trials must be positive"));
        }
        self.loss.validate()?;
        self.learning_rate.validate()
    }
}

/// One simulated round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub global_batch: u64,
    pub learning_rate: f64,
    pub round_s: f64,
    pub cumulative_s: f64,
    /// Loss before this round's update.
    pub loss_before: f64,
    /// Loss after this round's update.
    pub loss: f64,
    /// Realized loss decrement divided by round latency.
    pub efficiency: f64,
}

/// One trial: a full training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrialTrace {
    pub trial: u32,
    pub rounds: Vec<RoundRecord>,
}

/// Aggregate over trials.
#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub trials: u32,
    pub rounds: u32,
    pub final_loss_mean: f64,
    pub total_time_mean_s: f64,
    pub mean_round_s: f64,
    pub mean_efficiency: f64,
    /// Loss level the time-to-threshold refers to.
    pub threshold_loss: Option<f64>,
    /// Mean time at which the loss first crosses the threshold, linearly
    /// interpolated within the crossing round. `None` when no trial
    /// crosses.
    pub time_to_threshold_mean_s: Option<f64>,
    /// Number of trials that crossed the threshold.
    pub threshold_hit_trials: u32,
}

/// Sample a fleet: positions uniform over the cell disk, compute profiles
/// assigned round-robin from `choices`, rates estimated from the channel.
pub fn generate_fleet(
    system: &SystemConfig,
    count: usize,
    choices: &[ComputeProfile],
    seed: u64,
) -> Result<Fleet> {
    system.validate()?;
    if count == 0 {
        return Err(Error::invalid("fleet must have at least one device"));
    }
    if choices.is_empty() {
        return Err(Error::invalid("no compute profiles to assign"));
    }
    let mut devices = Vec::with_capacity(count);
    for i in 0..count {
        let mut pos_rng = substream(seed, &[TAG_POSITION, i as u64]);
        // Uniform over the disk: radius via the square-root trick. The draw
        // is taken as 1 - u so the radius is never exactly zero, which the
        // pathloss model cannot price.
        let r = system.cell_radius_km * (1.0 - pos_rng.random::<f64>()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * pos_rng.random::<f64>();
        devices.push(DeviceProfile {
            compute: choices[i % choices.len()],
            position_km: (r * theta.cos(), r * theta.sin()),
            tx_power_dbm: system.uplink_tx_power_dbm,
        });
    }
    let rates = static_rates(system, &devices, seed)?;
    Ok(Fleet { devices, rates })
}

/// Rate estimates for explicit devices, keyed by `seed` only (no trial or
/// round tags): the "static channel" view.
pub fn static_rates(
    system: &SystemConfig,
    devices: &[DeviceProfile],
    seed: u64,
) -> Result<Vec<RateEstimate>> {
    devices
        .iter()
        .enumerate()
        .map(|(i, d)| rates_for(system, d, &[TAG_RATE, seed, i as u64]))
        .collect()
}

fn rates_for(system: &SystemConfig, dev: &DeviceProfile, tags: &[u64]) -> Result<RateEstimate> {
    let d = dev.distance_km();
    let mut up_tags = tags.to_vec();
    up_tags.push(0);
    let mut down_tags = tags.to_vec();
    down_tags.push(1);
    let up = system
        .channel
        .average_rate_stream(dev.tx_power_dbm, d, &up_tags)?;
    let down = system
        .channel
        .average_rate_stream(system.downlink_tx_power_dbm, d, &down_tags)?;
    RateEstimate::new(up, down)
}

enum Engine {
    Cpu(Vec<crate::latency::CpuProfile>),
    Gpu(Vec<GpuProfile>),
}

impl Engine {
    fn from_fleet(fleet: &Fleet) -> Result<Engine> {
        let all_cpu = fleet
            .devices
            .iter()
            .all(|d| matches!(d.compute, ComputeProfile::Cpu(_)));
        let all_gpu = fleet
            .devices
            .iter()
            .all(|d| matches!(d.compute, ComputeProfile::Gpu(_)));
        if all_cpu {
            Ok(Engine::Cpu(fleet.cpu_profiles()?))
        } else if all_gpu {
            Ok(Engine::Gpu(fleet.gpu_profiles()?))
        } else {
            Err(Error::invalid(
                "mixed CPU/GPU fleets are not supported; split the fleet",
            ))
        }
    }

    fn optimize(&self, system: &SystemConfig, rates: &[RateEstimate]) -> Result<RoundPlan> {
        match self {
            Engine::Cpu(devs) => CpuInstance::new(
                devs.clone(),
                rates.to_vec(),
                system.cost,
                system.uplink_frame_s,
                system.downlink_frame_s,
                system.max_batch,
            )?
            .optimize_round(),
            Engine::Gpu(devs) => GpuInstance::new(
                devs.clone(),
                rates.to_vec(),
                system.cost,
                system.uplink_frame_s,
                system.downlink_frame_s,
                system.max_batch,
            )?
            .optimize_round(),
        }
    }

    fn compute_latency(&self, i: usize, batch: u64, system: &SystemConfig) -> Result<f64> {
        match self {
            Engine::Cpu(devs) => Ok(cpu_compute_latency(batch as f64, &system.cost, &devs[i])),
            Engine::Gpu(devs) => {
                gpu_compute_latency(batch as f64, &devs[i], system.max_batch as f64)
            }
        }
    }

    fn update_latency(&self, i: usize, system: &SystemConfig) -> f64 {
        match self {
            Engine::Cpu(devs) => cpu_update_latency(&system.cost, &devs[i]),
            Engine::Gpu(devs) => gpu_update_latency(&system.cost, &devs[i]),
        }
    }
}

/// Run the simulation and return one trace per trial.
pub fn run(
    system: &SystemConfig,
    fleet: &Fleet,
    cfg: &SimulationConfig,
) -> Result<Vec<TrialTrace>> {
    system.validate()?;
    fleet.validate()?;
    cfg.validate()?;
    let engine = Engine::from_fleet(fleet)?;
    let k = fleet.devices.len();
    let tol = Tolerances::default();

    let mut traces = Vec::with_capacity(cfg.trials as usize);
    for trial in 0..cfg.trials {
        let mut records = Vec::with_capacity(cfg.rounds as usize);
        let mut loss = cfg.loss.initial_loss;
        let mut clock = 0.0f64;
        // Under a static channel the proposed plan is round-invariant:
        // compute it once.
        let mut cached_plan: Option<RoundPlan> = None;
        for round in 0..cfg.rounds {
            let rates: Vec<RateEstimate> = if cfg.static_channel {
                fleet.rates.clone()
            } else {
                fleet
                    .devices
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        rates_for(
                            system,
                            d,
                            &[
                                TAG_RATE,
                                cfg.master_seed,
                                trial as u64,
                                round as u64,
                                i as u64,
                            ],
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            };

            let (batches, round_s) = match cfg.scheme {
                Scheme::Proposed => {
                    let plan = if cfg.static_channel {
                        if cached_plan.is_none() {
                            cached_plan = Some(engine.optimize(system, &rates)?);
                        }
                        cached_plan.clone().unwrap()
                    } else {
                        engine.optimize(system, &rates)?
                    };
                    let round_s = if cfg.integer_frames {
                        whole_frame_total(
                            plan.latency.uplink_subperiod_s(),
                            plan.latency.downlink_subperiod_s(),
                            system,
                        )
                    } else {
                        plan.latency.round_total_s
                    };
                    (plan.device_batches.clone(), round_s)
                }
                _ => {
                    let batches = scheme_batches(cfg, system, k, trial, round)?;
                    let round_s = baseline_round(system, &engine, &rates, &batches, cfg, &tol)?;
                    (batches, round_s)
                }
            };

            let global_batch: u64 = batches.iter().sum();
            let decay = cfg.loss.xi * (global_batch as f64).sqrt();
            let loss_before = loss;
            let next_loss = (loss - decay).max(cfg.loss.floor_loss);
            let realized = loss - next_loss;
            loss = next_loss;
            clock += round_s;
            records.push(RoundRecord {
                round,
                global_batch,
                learning_rate: learning_rate(&cfg.learning_rate, global_batch as f64)?,
                round_s,
                cumulative_s: clock,
                loss_before,
                loss,
                efficiency: realized / round_s,
            });
            // Nothing left to learn once the trajectory sits on the floor.
            if loss <= cfg.loss.floor_loss {
                break;
            }
        }
        traces.push(TrialTrace {
            trial,
            rounds: records,
        });
    }
    Ok(traces)
}

fn scheme_batches(
    cfg: &SimulationConfig,
    system: &SystemConfig,
    k: usize,
    trial: u32,
    round: u32,
) -> Result<Vec<u64>> {
    let cap = system.max_batch;
    Ok(match cfg.scheme {
        Scheme::Proposed => unreachable!("proposed scheme is planned, not fixed"),
        Scheme::Online => vec![1; k],
        Scheme::FullBatch => vec![cap; k],
        Scheme::EqualAllocation => vec![cap.div_ceil(2); k],
        Scheme::RandomBatch => (0..k)
            .map(|i| {
                let mut rng = substream(
                    cfg.master_seed,
                    &[TAG_BATCH, trial as u64, round as u64, i as u64],
                );
                rng.random_range(1..=cap)
            })
            .collect(),
    })
}

/// Price one baseline round: fixed batches, slots per policy.
fn baseline_round(
    system: &SystemConfig,
    engine: &Engine,
    rates: &[RateEstimate],
    batches: &[u64],
    cfg: &SimulationConfig,
    tol: &Tolerances,
) -> Result<f64> {
    let k = batches.len();
    let payload = system.cost.gradient_bits();
    let compute: Vec<f64> = (0..k)
        .map(|i| engine.compute_latency(i, batches[i], system))
        .collect::<Result<Vec<_>>>()?;
    let update: Vec<f64> = (0..k).map(|i| engine.update_latency(i, system)).collect();
    let up_rates: Vec<f64> = rates.iter().map(|r| r.uplink_bps).collect();
    let down_rates: Vec<f64> = rates.iter().map(|r| r.downlink_bps).collect();

    let (up_slots, down_slots) = match cfg.slot_policy {
        SlotPolicy::Equal => {
            let kf = k as f64;
            (
                vec![system.uplink_frame_s / kf; k],
                vec![system.downlink_frame_s / kf; k],
            )
        }
        SlotPolicy::Optimal => {
            let (_, up) = crate::optimizer::equalizing_slots(
                &compute,
                &up_rates,
                payload,
                system.uplink_frame_s,
                tol,
                "uplink slots",
            )?;
            let (_, down) = crate::optimizer::equalizing_slots(
                &update,
                &down_rates,
                payload,
                system.downlink_frame_s,
                tol,
                "downlink slots",
            )?;
            (up, down)
        }
    };

    let mut parts = Vec::with_capacity(k);
    for i in 0..k {
        let upload =
            transmission_latency(payload, system.uplink_frame_s, up_slots[i], up_rates[i])?;
        let download = transmission_latency(
            payload,
            system.downlink_frame_s,
            down_slots[i],
            down_rates[i],
        )?;
        parts.push((compute[i], upload, download, update[i]));
    }
    let breakdown = round_latency(&parts)?;
    Ok(if cfg.integer_frames {
        whole_frame_total(
            breakdown.uplink_subperiod_s(),
            breakdown.downlink_subperiod_s(),
            system,
        )
    } else {
        breakdown.round_total_s
    })
}

/// Round each subperiod up to a whole number of frames.
fn whole_frame_total(up_s: f64, down_s: f64, system: &SystemConfig) -> f64 {
    let up_frames = (up_s / system.uplink_frame_s - 1e-9).ceil().max(1.0);
    let down_frames = (down_s / system.downlink_frame_s - 1e-9).ceil().max(1.0);
    up_frames * system.uplink_frame_s + down_frames * system.downlink_frame_s
}

/// Aggregate traces; `threshold` optionally asks for the mean first time at
/// which the loss reaches that level.
pub fn summarize(traces: &[TrialTrace], threshold: Option<f64>) -> Result<SimSummary> {
    if traces.is_empty() {
        return Err(Error::invalid("no traces to summarize"));
    }
    let trials = traces.len() as u32;
    // Traces may stop early once the loss floor is reached, so lengths can
    // differ; report the longest.
    let rounds = traces.iter().map(|t| t.rounds.len()).max().unwrap() as u32;
    if traces.iter().any(|t| t.rounds.is_empty()) {
        return Err(Error::invalid("every trace needs at least one round"));
    }
    let mut final_loss = 0.0;
    let mut total_time = 0.0;
    let mut eff = 0.0;
    let mut nrec = 0usize;
    let mut hit_sum = 0.0;
    let mut hits = 0u32;
    for t in traces {
        let last = t.rounds.last().expect("non-empty");
        final_loss += last.loss;
        total_time += last.cumulative_s;
        for r in &t.rounds {
            eff += r.efficiency;
            nrec += 1;
        }
        if let Some(th) = threshold {
            if let Some(x) = crossing_time(t, th) {
                hit_sum += x;
                hits += 1;
            }
        }
    }
    let tf = trials as f64;
    Ok(SimSummary {
        trials,
        rounds,
        final_loss_mean: final_loss / tf,
        total_time_mean_s: total_time / tf,
        mean_round_s: total_time / nrec as f64,
        mean_efficiency: eff / nrec as f64,
        threshold_loss: threshold,
        time_to_threshold_mean_s: if hits > 0 {
            Some(hit_sum / hits as f64)
        } else {
            None
        },
        threshold_hit_trials: hits,
    })
}

/// One scheme's standing in a cross-scheme comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeComparison {
    pub scheme: Scheme,
    pub final_loss_mean: f64,
    pub total_time_mean_s: f64,
    pub time_to_threshold_mean_s: Option<f64>,
    /// Training speed relative to the reference scheme; the reference
    /// scores exactly 1.
    pub speedup: f64,
}

/// Rank schemes against `reference`. Speed is the reciprocal mean
/// time-to-threshold when every scheme reached the threshold, otherwise the
/// mean loss drop per second; either way the reference's speedup is 1.
pub fn compare_schemes(
    summaries: &[(Scheme, SimSummary)],
    reference: Scheme,
    initial_loss: f64,
) -> Result<Vec<SchemeComparison>> {
    if summaries.is_empty() {
        return Err(Error::invalid("no scheme summaries to compare"));
    }
    let all_hit = summaries
        .iter()
        .all(|(_, s)| s.time_to_threshold_mean_s.is_some());
    let speed = |s: &SimSummary| -> f64 {
        if all_hit {
            1.0 / s.time_to_threshold_mean_s.expect("checked")
        } else {
            (initial_loss - s.final_loss_mean).max(0.0) / s.total_time_mean_s
        }
    };
    let reference_speed = summaries
        .iter()
        .find(|(sch, _)| *sch == reference)
        .map(|(_, s)| speed(s))
        .ok_or_else(|| Error::invalid("reference scheme missing from the comparison"))?;
    if !(reference_speed > 0.0) {
        return Err(Error::infeasible(
            "reference scheme shows no progress; speedups are undefined",
        ));
    }
    Ok(summaries
        .iter()
        .map(|(sch, s)| SchemeComparison {
            scheme: *sch,
            final_loss_mean: s.final_loss_mean,
            total_time_mean_s: s.total_time_mean_s,
            time_to_threshold_mean_s: s.time_to_threshold_mean_s,
            speedup: speed(s) / reference_speed,
        })
        .collect())
}

/// First time the loss reaches `threshold`, linearly interpolated in
/// cumulative time within the crossing round.
fn crossing_time(trace: &TrialTrace, threshold: f64) -> Option<f64> {
    let mut start_time = 0.0;
    for r in &trace.rounds {
        if r.loss <= threshold {
            let frac = if r.loss_before > r.loss {
                ((r.loss_before - threshold) / (r.loss_before - r.loss)).clamp(0.0, 1.0)
            } else {
                // No decrement this round (already at the floor).
                1.0
            };
            return Some(start_time + frac * r.round_s);
        }
        start_time = r.cumulative_s;
    }
    None
}

/// Write a summary as pretty JSON.
pub fn write_summary_json<W: Write>(mut w: W, summary: &SimSummary) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, summary)
        .map_err(|e| Error::invalid(format!("summary serialization failed: {e}")))?;
    writeln!(w)?;
    Ok(())
}

/// Write one CSV row per round across all trials.
pub fn write_traces_csv<W: Write>(mut w: W, traces: &[TrialTrace]) -> Result<()> {
    writeln!(
        w,
        "trial,round,global_batch,learning_rate,round_s,cumulative_s,loss_before,loss,efficiency"
    )?;
    for t in traces {
        for r in &t.rounds {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                t.trial,
                r.round,
                r.global_batch,
                r.learning_rate,
                r.round_s,
                r.cumulative_s,
                r.loss_before,
                r.loss,
                r.efficiency
            )?;
        }
    }
    Ok(())
}
