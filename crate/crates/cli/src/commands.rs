//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use feel_core::oracle::{grid_search_cpu, grid_search_gpu, GridRoundResult};
use feel_core::sim::{run, summarize};
use feel_core::{
    compare_schemes, fit_gpu_profile, ComputeProfile, CpuInstance, Error, Fleet, GpuFitSample,
    GpuInstance, GridSpec, KktReport, RoundPlan, Scheme, SimSummary, SystemConfig, Tolerances,
    TrialTrace,
};

use crate::config::{self, scheme_slug};
use crate::{as_config, as_runtime, CliError, Mode};

/// A planning problem for a homogeneous-kind fleet.
enum Instance {
    Cpu(CpuInstance),
    Gpu(GpuInstance),
}

impl Instance {
    fn optimize_round(&self) -> Result<RoundPlan, Error> {
        match self {
            Instance::Cpu(i) => i.optimize_round(),
            Instance::Gpu(i) => i.optimize_round(),
        }
    }

    fn plan_for_batch(&self, b: u64) -> Result<RoundPlan, Error> {
        match self {
            Instance::Cpu(i) => i.plan_for_batch(b),
            Instance::Gpu(i) => i.plan_for_batch(b),
        }
    }

    fn kkt_residuals(&self, plan: &RoundPlan) -> Result<KktReport, Error> {
        match self {
            Instance::Cpu(i) => i.kkt_residuals(plan),
            Instance::Gpu(i) => i.kkt_residuals(plan),
        }
    }

    fn grid_search(&self, spec: &GridSpec) -> Result<GridRoundResult, Error> {
        match self {
            Instance::Cpu(i) => grid_search_cpu(i, spec),
            Instance::Gpu(i) => grid_search_gpu(i, spec),
        }
    }
}

/// Build the planning instance for the scenario's fleet, checking it against
/// the requested mode. Mixed fleets cannot be planned directly (the
/// simulator handles them); `--mode` asserts the expected kind.
fn build_instance(
    system: &SystemConfig,
    fleet: &Fleet,
    tol: Tolerances,
    mode: Mode,
) -> Result<Instance, CliError> {
    let mut cpus = Vec::new();
    let mut gpus = Vec::new();
    for (i, d) in fleet.devices.iter().enumerate() {
        match (d.compute, mode) {
            (ComputeProfile::Cpu(p), Mode::Auto | Mode::Cpu) => cpus.push(p),
            (ComputeProfile::Gpu(p), Mode::Auto | Mode::Gpu) => gpus.push(p),
            (ComputeProfile::Cpu(_), Mode::Gpu) => {
                return Err(CliError::Config(format!(
                    "device {i} is a cpu device but --mode gpu was given"
                )))
            }
            (ComputeProfile::Gpu(_), Mode::Cpu) => {
                return Err(CliError::Config(format!(
                    "device {i} is a gpu device but --mode cpu was given"
                )))
            }
        }
    }
    if !cpus.is_empty() && !gpus.is_empty() {
        return Err(CliError::Config(
            "fleet mixes cpu and gpu devices; planning needs a single kind \
             (the simulate command handles mixed fleets)"
                .to_string(),
        ));
    }
    let rates = fleet.rates.clone();
    let inst = if gpus.is_empty() {
        let mut i = as_config(CpuInstance::new(
            cpus,
            rates,
            system.cost,
            system.uplink_frame_s,
            system.downlink_frame_s,
            system.max_batch,
        ))?;
        i.tol = tol;
        Instance::Cpu(i)
    } else {
        let mut i = as_config(GpuInstance::new(
            gpus,
            rates,
            system.cost,
            system.uplink_frame_s,
            system.downlink_frame_s,
            system.max_batch,
        ))?;
        i.tol = tol;
        Instance::Gpu(i)
    };
    Ok(inst)
}

fn device_kind(fleet: &Fleet, i: usize) -> String {
    match fleet.devices[i].compute {
        ComputeProfile::Cpu(p) => format!("cpu {:.2} GHz", p.cpu_freq_hz / 1e9),
        ComputeProfile::Gpu(p) => format!("gpu knee {:.0}", p.threshold_batch),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

#[derive(Serialize)]
struct PlanReport<'a> {
    plan: &'a RoundPlan,
    kkt: &'a KktReport,
}

pub fn plan(
    config_path: &Path,
    global_batch: Option<u64>,
    mode: Mode,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let sc = config::load(config_path)?;
    let inst = build_instance(&sc.system, &sc.fleet, sc.tol, mode)?;
    let plan = match global_batch {
        // A bad batch came in on the flag, so report it as a usage error.
        Some(b) => as_config(inst.plan_for_batch(b))?,
        None => as_runtime(inst.optimize_round())?,
    };
    let kkt = as_runtime(inst.kkt_residuals(&plan))?;

    let k = plan.device_batches.len();
    println!(
        "round plan: global batch {} across {} device{}",
        plan.global_batch,
        k,
        if k == 1 { "" } else { "s" }
    );
    println!(
        "  efficiency   {:.6} loss/s (continuous bound {:.6})",
        plan.efficiency, plan.relaxed_efficiency
    );
    println!(
        "  round time   {:.6} s (uplink {:.6}, downlink {:.6})",
        plan.latency.round_total_s,
        plan.latency.uplink_subperiod_s(),
        plan.latency.downlink_subperiod_s()
    );
    println!(
        "  {:<3} {:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "dev", "kind", "batch", "up slot ms", "down slot ms", "up Mbit/s", "down Mbit/s"
    );
    for i in 0..k {
        println!(
            "  {:<3} {:<16} {:>6} {:>12.4} {:>12.4} {:>12.2} {:>12.2}",
            i,
            device_kind(&sc.fleet, i),
            plan.device_batches[i],
            plan.device_slots_s[i] * 1e3,
            plan.downlink.slots_s[i] * 1e3,
            sc.fleet.rates[i].uplink_bps / 1e6,
            sc.fleet.rates[i].downlink_bps / 1e6,
        );
    }
    println!("  kkt max residual {:.3e}", kkt.max_abs_residual);

    if let Some(path) = output {
        write_json(
            path,
            &PlanReport {
                plan: &plan,
                kkt: &kkt,
            },
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SchemeSummary<'a> {
    scheme: &'static str,
    #[serde(flatten)]
    summary: &'a SimSummary,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    summaries: Vec<SchemeSummary<'a>>,
    comparison: &'a [feel_core::SchemeComparison],
}

fn write_trace_csv(path: &Path, traces: &[TrialTrace]) -> Result<(), CliError> {
    let mut text = String::from(
        "trial,round,global_batch,learning_rate,round_s,cumulative_s,loss_before,loss,efficiency\n",
    );
    for t in traces {
        for r in &t.rounds {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                t.trial,
                r.round,
                r.global_batch,
                r.learning_rate,
                r.round_s,
                r.cumulative_s,
                r.loss_before,
                r.loss,
                r.efficiency
            ));
        }
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    config_path: &Path,
    schemes_flag: Option<&str>,
    rounds: Option<u32>,
    trials: Option<u32>,
    seed: Option<u64>,
    threshold: Option<f64>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let sc = config::load(config_path)?;
    let mut base = sc.sim.clone();
    if let Some(r) = rounds {
        base.rounds = r;
    }
    if let Some(t) = trials {
        base.trials = t;
    }
    if let Some(s) = seed {
        base.master_seed = s;
    }
    let schemes: Vec<Scheme> = match schemes_flag {
        None => sc.schemes.clone(),
        Some(list) => {
            let mut v = Vec::new();
            for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let s = config::parse_scheme(name)?;
                if v.contains(&s) {
                    return Err(CliError::Config(format!("scheme {name:?} listed twice")));
                }
                v.push(s);
            }
            if v.is_empty() {
                return Err(CliError::Config("--schemes lists no schemes".to_string()));
            }
            v
        }
    };
    let threshold = threshold.or(sc.threshold);
    if let Some(th) = threshold {
        if !(th < base.loss.initial_loss) || !(th >= base.loss.floor_loss) {
            return Err(CliError::Config(format!(
                "threshold {th} must lie in [floor_loss, initial_loss)"
            )));
        }
    }
    // The run settings came from the config file and flags, so surface
    // validation failures as usage errors.
    as_config(base.validate())?;
    if !base.static_channel && sc.explicit_rates {
        return Err(CliError::Config(
            "devices carry explicit rates, so there is no channel to redraw per \
             round; set sim.static_channel = true"
                .to_string(),
        ));
    }
    let reference = if schemes.contains(&sc.reference) {
        sc.reference
    } else {
        schemes[0]
    };
    let out_dir: PathBuf = out_dir.map(Path::to_path_buf).unwrap_or(sc.out_dir.clone());
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;

    let mut summaries: Vec<(Scheme, SimSummary)> = Vec::with_capacity(schemes.len());
    for &scheme in &schemes {
        let mut cfg = base.clone();
        cfg.scheme = scheme;
        let traces = as_runtime(run(&sc.system, &sc.fleet, &cfg))?;
        let csv_path = out_dir.join(format!("{}.csv", scheme_slug(scheme)));
        write_trace_csv(&csv_path, &traces)?;
        let summary = as_runtime(summarize(&traces, threshold))?;
        let mut line = format!(
            "{:<16} final loss {:.6} after {:.3} s ({} trials x {} rounds)",
            scheme_slug(scheme),
            summary.final_loss_mean,
            summary.total_time_mean_s,
            summary.trials,
            summary.rounds
        );
        if let Some(th) = threshold {
            match summary.time_to_threshold_mean_s {
                Some(t) => {
                    line.push_str(&format!(
                        ", loss {th} at {:.3} s ({}/{} trials)",
                        t, summary.threshold_hit_trials, summary.trials
                    ));
                }
                None => line.push_str(&format!(", loss {th} not reached")),
            }
        }
        println!("{line}");
        summaries.push((scheme, summary));
    }

    let comparison = as_runtime(compare_schemes(
        &summaries,
        reference,
        base.loss.initial_loss,
    ))?;
    if comparison.len() > 1 {
        println!(
            "speedup vs {} (training speed ratio):",
            scheme_slug(reference)
        );
        for c in &comparison {
            println!("  {:<16} {:>8.3}x", scheme_slug(c.scheme), c.speedup);
        }
    }

    let report = SimulateReport {
        summaries: summaries
            .iter()
            .map(|(s, summary)| SchemeSummary {
                scheme: scheme_slug(*s),
                summary,
            })
            .collect(),
        comparison: &comparison,
    };
    let json_path = out_dir.join("summary.json");
    write_json(&json_path, &report)?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

/// Parse one `batch,latency_s` line; `None` for blank and comment lines.
fn parse_sample_line(line: &str) -> Option<Result<GpuFitSample, String>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return None;
    }
    let fields: Vec<&str> = trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect();
    if fields.len() != 2 {
        return Some(Err(format!(
            "expected two fields (batch, latency_s), got {}",
            fields.len()
        )));
    }
    let batch = match fields[0].parse::<f64>() {
        Ok(v) => v,
        Err(_) => return Some(Err(format!("bad batch {:?}", fields[0]))),
    };
    let latency_s = match fields[1].parse::<f64>() {
        Ok(v) => v,
        Err(_) => return Some(Err(format!("bad latency {:?}", fields[1]))),
    };
    Some(Ok(GpuFitSample { batch, latency_s }))
}

pub fn fit_gpu(samples_path: &Path, flops: f64, output: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(samples_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", samples_path.display())))?;
    let mut samples = Vec::new();
    let mut first_data_line = true;
    for (idx, line) in text.lines().enumerate() {
        let Some(parsed) = parse_sample_line(line) else {
            continue;
        };
        match parsed {
            Ok(s) => {
                first_data_line = false;
                samples.push(s);
            }
            // Tolerate a header row, but only as the first non-comment line.
            Err(_) if first_data_line => first_data_line = false,
            Err(msg) => {
                return Err(CliError::Config(format!(
                    "{}, line {}: {}",
                    samples_path.display(),
                    idx + 1,
                    msg
                )))
            }
        }
    }
    let profile = match fit_gpu_profile(&samples, flops) {
        Ok(p) => p,
        Err(e @ (Error::UnderdeterminedFit(_) | Error::Numerical { .. })) => {
            return Err(CliError::Runtime(e.to_string()))
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    println!("fitted gpu profile from {} measurements:", samples.len());
    println!("  flat latency   {:.6} ms", profile.flat_latency_s * 1e3);
    println!(
        "  slope          {:.6} ms/sample",
        profile.slope_s_per_sample * 1e3
    );
    println!("  threshold      {} samples", profile.threshold_batch);
    println!("  compute        {:.3e} flop/s", profile.gpu_flops);
    if let Some(path) = output {
        write_json(path, &profile)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    solver_efficiency: f64,
    grid_efficiency: f64,
    /// (solver - grid) / grid; positive when slot quantization costs the
    /// grid, negative only within solver tolerance.
    relative_gap: f64,
    solver_global_batch: u64,
    grid_global_batch: u64,
    solver_batches: Vec<u64>,
    grid_batches: Vec<u64>,
    slot_levels: u32,
    points_evaluated: u128,
    kkt_max_residual: f64,
}

pub fn verify(
    config_path: &Path,
    batch_cap: Option<u64>,
    slot_levels: u32,
    max_points: u128,
    mode: Mode,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let mut sc = config::load(config_path)?;
    if let Some(cap) = batch_cap {
        sc.system.max_batch = cap;
    }
    let inst = build_instance(&sc.system, &sc.fleet, sc.tol, mode)?;
    let plan = as_runtime(inst.optimize_round())?;
    let kkt = as_runtime(inst.kkt_residuals(&plan))?;
    let spec = GridSpec {
        batch_values: (1..=sc.system.max_batch).collect(),
        slot_levels,
        max_points,
    };
    let grid = match inst.grid_search(&spec) {
        Ok(g) => g,
        Err(e @ Error::GridCapExceeded { .. }) => {
            return Err(CliError::Runtime(format!(
                "{e}; shrink --batch-cap or --slot-levels, or raise --max-points"
            )))
        }
        Err(e @ Error::InvalidArgument(_)) => return Err(CliError::Config(e.to_string())),
        Err(e) => return Err(CliError::Runtime(e.to_string())),
    };
    let relative_gap = (plan.efficiency - grid.efficiency) / grid.efficiency;
    let report = VerifyReport {
        solver_efficiency: plan.efficiency,
        grid_efficiency: grid.efficiency,
        relative_gap,
        solver_global_batch: plan.global_batch,
        grid_global_batch: grid.device_batches.iter().sum(),
        solver_batches: plan.device_batches.clone(),
        grid_batches: grid.device_batches.clone(),
        slot_levels,
        points_evaluated: grid.points_evaluated,
        kkt_max_residual: kkt.max_abs_residual,
    };
    println!(
        "solver efficiency {:.9} loss/s at global batch {} {:?}",
        report.solver_efficiency, report.solver_global_batch, report.solver_batches
    );
    println!(
        "grid   efficiency {:.9} loss/s at global batch {} {:?} ({} levels, {} points)",
        report.grid_efficiency,
        report.grid_global_batch,
        report.grid_batches,
        slot_levels,
        report.points_evaluated
    );
    println!(
        "relative gap {:+.3e} (positive: grid pays for slot quantization)",
        report.relative_gap
    );
    println!("kkt max residual {:.3e}", report.kkt_max_residual);
    if let Some(path) = output {
        write_json(path, &report)?;
        println!("wrote {}", path.display());
    }
    if plan.efficiency < grid.efficiency * (1.0 - 1e-9) {
        return Err(CliError::Runtime(format!(
            "solver efficiency {} fell below the exhaustive grid {}",
            plan.efficiency, grid.efficiency
        )));
    }
    println!("verified: solver matches or beats the quantized exhaustive search");
    Ok(())
}
