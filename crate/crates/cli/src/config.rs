//! Scenario files: sectioned TOML with strict key checking. Every value
//! has a default, so the empty document is a valid single-device scenario;
//! unknown keys are rejected with the offending name.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use feel_core::sim::{generate_fleet, static_rates};
use feel_core::{
    ChannelParams, ComputeProfile, CpuProfile, DeviceProfile, Fading, Fleet, GpuProfile,
    LearningRateRule, LossProxy, ModelCost, RateEstimate, Scheme, SimulationConfig, SlotPolicy,
    SystemConfig, Tolerances,
};

use crate::CliError;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    system: SystemSection,
    model: ModelSection,
    solver: SolverSection,
    sim: SimSection,
    output: OutputSection,
    devices: Vec<DeviceSection>,
    fleet: Option<FleetSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SystemSection {
    cell_radius_km: Option<f64>,
    uplink_tx_power_dbm: Option<f64>,
    downlink_tx_power_dbm: Option<f64>,
    uplink_frame_s: Option<f64>,
    downlink_frame_s: Option<f64>,
    max_batch: Option<u64>,
    /// Reserved: broadcasting the model to all devices at once instead of
    /// TDMA download slots. Not implemented; must stay `false`.
    downlink_broadcast: bool,
    channel: ChannelSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ChannelSection {
    bandwidth_hz: Option<f64>,
    noise_density_dbm_per_hz: Option<f64>,
    pathloss_intercept_db: Option<f64>,
    pathloss_slope_db: Option<f64>,
    /// Mean power of Rayleigh fading (exclusive with `deterministic_gain`).
    rayleigh_mean_power: Option<f64>,
    /// Fixed channel gain bypassing fading entirely.
    deterministic_gain: Option<f64>,
    mc_samples: Option<u32>,
    rng_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    param_count: Option<u64>,
    bits_per_element: Option<u32>,
    cycles_per_sample: Option<f64>,
    update_cycles: Option<f64>,
    update_flops: Option<f64>,
    loss_coefficient: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SolverSection {
    time_tol_s: Option<f64>,
    batch_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimSection {
    rounds: Option<u32>,
    trials: Option<u32>,
    master_seed: Option<u64>,
    schemes: Option<Vec<String>>,
    /// Slot policy for the fixed-batch baselines: "optimal" or "equal".
    slot_policy: Option<String>,
    static_channel: Option<bool>,
    integer_frames: Option<bool>,
    xi: Option<f64>,
    initial_loss: Option<f64>,
    floor_loss: Option<f64>,
    base_learning_rate: Option<f64>,
    reference_batch: Option<f64>,
    /// Loss level whose first-crossing time the summary reports.
    threshold_loss: Option<f64>,
    /// Scheme whose training speed anchors the speedup column.
    reference_scheme: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OutputSection {
    directory: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceSection {
    /// "cpu" or "gpu".
    kind: String,
    cpu_freq_hz: Option<f64>,
    flat_latency_s: Option<f64>,
    slope_s_per_sample: Option<f64>,
    threshold_batch: Option<f64>,
    gpu_flops: Option<f64>,
    /// Position relative to the base station; defaults to half the cell
    /// radius when rates are given explicitly.
    position_km: Option<[f64; 2]>,
    tx_power_dbm: Option<f64>,
    /// Explicit average rates; either both or neither, and consistently
    /// across all devices.
    uplink_bps: Option<f64>,
    downlink_bps: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FleetSection {
    count: usize,
    seed: Option<u64>,
    /// CPU clock list; devices cycle through it.
    cpu_freq_hz: Option<Vec<f64>>,
    /// GPU profile list; devices cycle through it.
    gpu: Option<Vec<GpuSection>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpuSection {
    flat_latency_s: f64,
    slope_s_per_sample: f64,
    threshold_batch: f64,
    gpu_flops: f64,
}

/// A fully resolved scenario.
pub struct Scenario {
    pub system: SystemConfig,
    pub fleet: Fleet,
    pub tol: Tolerances,
    /// Simulation settings with the scheme left at its default; commands
    /// overwrite `scheme` per run.
    pub sim: SimulationConfig,
    pub schemes: Vec<Scheme>,
    pub threshold: Option<f64>,
    pub reference: Scheme,
    pub out_dir: PathBuf,
    /// True when rates came from the scenario file rather than the channel
    /// model; such fleets have no channel to redraw per round.
    pub explicit_rates: bool,
}

/// Parse `proposed`, `full_batch`, `FullBatch`, `full-batch`, ... into a
/// scheme.
pub fn parse_scheme(name: &str) -> Result<Scheme, CliError> {
    let norm: String = name
        .chars()
        .filter(|c| *c != '_' && *c != '-')
        .collect::<String>()
        .to_ascii_lowercase();
    match norm.as_str() {
        "proposed" => Ok(Scheme::Proposed),
        "online" => Ok(Scheme::Online),
        "fullbatch" => Ok(Scheme::FullBatch),
        "equalallocation" => Ok(Scheme::EqualAllocation),
        "randombatch" => Ok(Scheme::RandomBatch),
        _ => Err(config_err(format!(
            "unknown scheme {name:?}; expected one of proposed, online, full_batch, \
             equal_allocation, random_batch"
        ))),
    }
}

/// File-name-friendly scheme label, matching the configuration spelling.
pub fn scheme_slug(scheme: Scheme) -> &'static str {
    match scheme {
        Scheme::Proposed => "proposed",
        Scheme::Online => "online",
        Scheme::FullBatch => "full_batch",
        Scheme::EqualAllocation => "equal_allocation",
        Scheme::RandomBatch => "random_batch",
    }
}

pub fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let file: FileConfig =
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    build(file)
}

fn build(file: FileConfig) -> Result<Scenario, CliError> {
    if file.system.downlink_broadcast {
        return Err(config_err(
            "downlink_broadcast is reserved but not implemented; downloads use TDMA slots",
        ));
    }
    let channel = channel_params(&file.system.channel)?;
    let defaults = SystemConfig::default();
    let system = SystemConfig {
        channel,
        cell_radius_km: file
            .system
            .cell_radius_km
            .unwrap_or(defaults.cell_radius_km),
        uplink_tx_power_dbm: file
            .system
            .uplink_tx_power_dbm
            .unwrap_or(defaults.uplink_tx_power_dbm),
        downlink_tx_power_dbm: file
            .system
            .downlink_tx_power_dbm
            .unwrap_or(defaults.downlink_tx_power_dbm),
        uplink_frame_s: file
            .system
            .uplink_frame_s
            .unwrap_or(defaults.uplink_frame_s),
        downlink_frame_s: file
            .system
            .downlink_frame_s
            .unwrap_or(defaults.downlink_frame_s),
        max_batch: file.system.max_batch.unwrap_or(defaults.max_batch),
        cost: model_cost(&file.model),
    };

    let sim = sim_config(&file.sim)?;
    let (fleet, explicit_rates) = fleet_from(&file, &system, sim.master_seed)?;

    let default_tol = Tolerances::default();
    let tol = Tolerances {
        time_s: file.solver.time_tol_s.unwrap_or(default_tol.time_s),
        batch: file.solver.batch_tol.unwrap_or(default_tol.batch),
    };

    let scheme_names = file
        .sim
        .schemes
        .clone()
        .unwrap_or_else(|| vec!["proposed".to_string()]);
    if scheme_names.is_empty() {
        return Err(config_err("sim.schemes must not be empty"));
    }
    let mut schemes = Vec::with_capacity(scheme_names.len());
    for name in &scheme_names {
        let s = parse_scheme(name)?;
        if schemes.contains(&s) {
            return Err(config_err(format!("scheme {name:?} listed twice")));
        }
        schemes.push(s);
    }
    let reference = match &file.sim.reference_scheme {
        Some(name) => parse_scheme(name)?,
        None => Scheme::FullBatch,
    };
    let reference = if schemes.contains(&reference) {
        reference
    } else {
        schemes[0]
    };

    if let Some(th) = file.sim.threshold_loss {
        if !(th < sim.loss.initial_loss) || !(th >= sim.loss.floor_loss) {
            return Err(config_err(format!(
                "threshold_loss {th} must lie in [floor_loss, initial_loss)"
            )));
        }
    }

    Ok(Scenario {
        system,
        fleet,
        tol,
        threshold: file.sim.threshold_loss,
        sim,
        schemes,
        reference,
        out_dir: file
            .output
            .directory
            .unwrap_or_else(|| PathBuf::from("results")),
        explicit_rates,
    })
}

fn channel_params(sec: &ChannelSection) -> Result<ChannelParams, CliError> {
    let d = ChannelParams::default();
    let fading = match (sec.rayleigh_mean_power, sec.deterministic_gain) {
        (Some(_), Some(_)) => {
            return Err(config_err(
                "rayleigh_mean_power and deterministic_gain are mutually exclusive",
            ))
        }
        (Some(mean_power), None) => Fading::Rayleigh { mean_power },
        (None, Some(gain)) => Fading::Deterministic { gain },
        (None, None) => d.fading,
    };
    Ok(ChannelParams {
        bandwidth_hz: sec.bandwidth_hz.unwrap_or(d.bandwidth_hz),
        noise_density_dbm_per_hz: sec
            .noise_density_dbm_per_hz
            .unwrap_or(d.noise_density_dbm_per_hz),
        pathloss_intercept_db: sec.pathloss_intercept_db.unwrap_or(d.pathloss_intercept_db),
        pathloss_slope_db: sec.pathloss_slope_db.unwrap_or(d.pathloss_slope_db),
        fading,
        mc_samples: sec.mc_samples.unwrap_or(d.mc_samples),
        rng_seed: sec.rng_seed.unwrap_or(d.rng_seed),
    })
}

fn model_cost(sec: &ModelSection) -> ModelCost {
    let d = ModelCost::default();
    ModelCost {
        param_count: sec.param_count.unwrap_or(d.param_count),
        bits_per_element: sec.bits_per_element.unwrap_or(d.bits_per_element),
        cycles_per_sample: sec.cycles_per_sample.unwrap_or(d.cycles_per_sample),
        update_cycles: sec.update_cycles.unwrap_or(d.update_cycles),
        update_flops: sec.update_flops.unwrap_or(d.update_flops),
        loss_coefficient: sec.loss_coefficient.unwrap_or(d.loss_coefficient),
    }
}

fn sim_config(sec: &SimSection) -> Result<SimulationConfig, CliError> {
    let d = SimulationConfig::default();
    let dl = LossProxy::default();
    let dr = LearningRateRule::default();
    let slot_policy = match sec.slot_policy.as_deref() {
        None => d.slot_policy,
        Some("optimal") => SlotPolicy::Optimal,
        Some("equal") => SlotPolicy::Equal,
        Some(other) => {
            return Err(config_err(format!(
                "unknown slot_policy {other:?}; expected \"optimal\" or \"equal\""
            )))
        }
    };
    Ok(SimulationConfig {
        rounds: sec.rounds.unwrap_or(d.rounds),
        trials: sec.trials.unwrap_or(d.trials),
        master_seed: sec.master_seed.unwrap_or(d.master_seed),
        scheme: d.scheme,
        slot_policy,
        static_channel: sec.static_channel.unwrap_or(d.static_channel),
        integer_frames: sec.integer_frames.unwrap_or(d.integer_frames),
        loss: LossProxy {
            xi: sec.xi.unwrap_or(dl.xi),
            initial_loss: sec.initial_loss.unwrap_or(dl.initial_loss),
            floor_loss: sec.floor_loss.unwrap_or(dl.floor_loss),
        },
        learning_rate: LearningRateRule {
            base_rate: sec.base_learning_rate.unwrap_or(dr.base_rate),
            reference_batch: sec.reference_batch.unwrap_or(dr.reference_batch),
        },
    })
}

fn fleet_from(
    file: &FileConfig,
    system: &SystemConfig,
    master_seed: u64,
) -> Result<(Fleet, bool), CliError> {
    match (&file.fleet, file.devices.is_empty()) {
        (Some(_), false) => Err(config_err("give either [[devices]] or [fleet], not both")),
        (Some(f), true) => Ok((generated_fleet(f, system, master_seed)?, false)),
        (None, false) => explicit_fleet(&file.devices, system),
        (None, true) => {
            // Defaults: one CPU device halfway out the cell.
            let devices = vec![DeviceProfile {
                compute: ComputeProfile::Cpu(crate::as_config(CpuProfile::new(1.0e9))?),
                position_km: (system.cell_radius_km / 2.0, 0.0),
                tx_power_dbm: system.uplink_tx_power_dbm,
            }];
            let rates = crate::as_config(static_rates(system, &devices, system.channel.rng_seed))?;
            Ok((Fleet { devices, rates }, false))
        }
    }
}

fn generated_fleet(
    sec: &FleetSection,
    system: &SystemConfig,
    master_seed: u64,
) -> Result<Fleet, CliError> {
    let choices: Vec<ComputeProfile> = match (&sec.cpu_freq_hz, &sec.gpu) {
        (Some(_), Some(_)) => {
            return Err(config_err(
                "fleet.cpu_freq_hz and fleet.gpu are mutually exclusive",
            ))
        }
        (Some(freqs), None) => freqs
            .iter()
            .map(|&f| Ok(ComputeProfile::Cpu(crate::as_config(CpuProfile::new(f))?)))
            .collect::<Result<_, CliError>>()?,
        (None, Some(gpus)) => gpus
            .iter()
            .map(|g| {
                Ok(ComputeProfile::Gpu(crate::as_config(GpuProfile::new(
                    g.flat_latency_s,
                    g.slope_s_per_sample,
                    g.threshold_batch,
                    g.gpu_flops,
                ))?))
            })
            .collect::<Result<_, CliError>>()?,
        (None, None) => {
            return Err(config_err(
                "fleet needs cpu_freq_hz or gpu profiles to draw from",
            ))
        }
    };
    let seed = sec.seed.unwrap_or(master_seed);
    crate::as_config(generate_fleet(system, sec.count, &choices, seed))
}

fn explicit_fleet(
    devices: &[DeviceSection],
    system: &SystemConfig,
) -> Result<(Fleet, bool), CliError> {
    let mut profiles = Vec::with_capacity(devices.len());
    let mut rates = Vec::with_capacity(devices.len());
    let mut explicit = 0usize;
    for (i, d) in devices.iter().enumerate() {
        let compute = match d.kind.as_str() {
            "cpu" => {
                let f = d
                    .cpu_freq_hz
                    .ok_or_else(|| config_err(format!("device {i}: cpu kind needs cpu_freq_hz")))?;
                for (name, set) in [
                    ("flat_latency_s", d.flat_latency_s.is_some()),
                    ("slope_s_per_sample", d.slope_s_per_sample.is_some()),
                    ("threshold_batch", d.threshold_batch.is_some()),
                    ("gpu_flops", d.gpu_flops.is_some()),
                ] {
                    if set {
                        return Err(config_err(format!(
                            "device {i}: {name} is a gpu field but kind is \"cpu\""
                        )));
                    }
                }
                ComputeProfile::Cpu(crate::as_config(CpuProfile::new(f))?)
            }
            "gpu" => {
                if d.cpu_freq_hz.is_some() {
                    return Err(config_err(format!(
                        "device {i}: cpu_freq_hz is a cpu field but kind is \"gpu\""
                    )));
                }
                let missing = |name: &str| config_err(format!("device {i}: gpu kind needs {name}"));
                ComputeProfile::Gpu(crate::as_config(GpuProfile::new(
                    d.flat_latency_s.ok_or_else(|| missing("flat_latency_s"))?,
                    d.slope_s_per_sample
                        .ok_or_else(|| missing("slope_s_per_sample"))?,
                    d.threshold_batch
                        .ok_or_else(|| missing("threshold_batch"))?,
                    d.gpu_flops.ok_or_else(|| missing("gpu_flops"))?,
                ))?)
            }
            other => {
                return Err(config_err(format!(
                    "device {i}: unknown kind {other:?}; expected \"cpu\" or \"gpu\""
                )))
            }
        };
        let rate = match (d.uplink_bps, d.downlink_bps) {
            (Some(u), Some(dn)) => {
                explicit += 1;
                Some(crate::as_config(RateEstimate::new(u, dn))?)
            }
            (None, None) => None,
            _ => {
                return Err(config_err(format!(
                    "device {i}: give both uplink_bps and downlink_bps or neither"
                )))
            }
        };
        if d.position_km.is_none() && rate.is_none() {
            return Err(config_err(format!(
                "device {i}: needs a position_km (for channel rates) or explicit rates"
            )));
        }
        let position = d
            .position_km
            .map(|p| (p[0], p[1]))
            .unwrap_or((system.cell_radius_km / 2.0, 0.0));
        profiles.push(DeviceProfile {
            compute,
            position_km: position,
            tx_power_dbm: d.tx_power_dbm.unwrap_or(system.uplink_tx_power_dbm),
        });
        rates.push(rate);
    }
    if explicit != 0 && explicit != devices.len() {
        return Err(config_err(
            "explicit rates must be given for all devices or none",
        ));
    }
    let rates: Vec<RateEstimate> = if explicit == devices.len() {
        rates.into_iter().map(|r| r.unwrap()).collect()
    } else {
        crate::as_config(static_rates(system, &profiles, system.channel.rng_seed))?
    };
    Ok((
        Fleet {
            devices: profiles,
            rates,
        },
        explicit == devices.len(),
    ))
}
