//! Round planning: batchsize and slot allocation that maximize learning
//! efficiency (loss decrement per second of round latency).
//!
//! A round has an uplink subperiod (local training + gradient upload) and a
//! downlink subperiod (model broadcast + local update). Per-device slot
//! lengths time-share each frame, and the planner picks batchsizes and slots
//! jointly. [`CpuInstance`] covers fleets whose compute latency is
//! proportional to the batchsize; [`GpuInstance`] covers fleets with a
//! flat-then-linear latency profile. Both expose the same method surface and
//! share one numerical engine.

mod engine;
mod gpu;
mod kkt;

pub use gpu::{fit_gpu_profile, GpuFitSample, GpuInstance};
pub use kkt::KktReport;

use serde::Serialize;

use crate::channel::RateEstimate;
use crate::error::{Error, Result};
use crate::latency::{
    round_latency, transmission_latency, CpuProfile, LatencyBreakdown, ModelCost,
};
pub(crate) use engine::equalizing_slots;
use engine::{optimize_lanes, Lanes, OuterSolution};

/// Residual tolerances enforced by the solvers.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Absolute tolerance on time-sharing residuals, seconds.
    pub time_s: f64,
    /// Absolute tolerance on batch totals, samples.
    pub batch: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            time_s: 1e-9,
            batch: 1e-6,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_s > 0.0) || !(self.batch > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }
}

/// Continuous uplink optimum for a fixed global batch.
#[derive(Debug, Clone, Serialize)]
pub struct UplinkAllocation {
    /// Per-device batchsizes (continuous relaxation).
    pub batches: Vec<f64>,
    /// Per-device uplink slot lengths, seconds; they sum to the frame.
    pub slots_s: Vec<f64>,
    /// Batch total this allocation realizes.
    pub global_batch: f64,
    /// Optimal uplink efficiency: subperiod length divided by the loss
    /// decrement.
    pub eu_star: f64,
    /// Search multiplier at the optimum (loss-decrement scaled).
    pub mu_star: f64,
    /// Per-device training speed V_k in samples per second.
    pub training_speed: Vec<f64>,
    /// Per-device priority ratio V_k / sum_j V_j.
    pub priority_ratio: Vec<f64>,
}

/// Downlink optimum: slots that equalize broadcast + update completion.
#[derive(Debug, Clone, Serialize)]
pub struct DownlinkAllocation {
    /// Per-device downlink slot lengths, seconds; they sum to the frame.
    pub slots_s: Vec<f64>,
    /// Downlink efficiency: subperiod length divided by the loss decrement.
    pub ed_star: f64,
}

/// Analytic bracket for the uplink multiplier.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MuBracket {
    pub lower: f64,
    pub upper: f64,
    /// True when the global batch pins every device to a bound, in which
    /// case the multiplier is not unique and the bracket is advisory.
    pub degenerate: bool,
}

/// Full plan for one round: the continuous optimum (certifiable against
/// stationarity conditions) plus the deployable integer allocation.
#[derive(Debug, Clone, Serialize)]
pub struct RoundPlan {
    /// Chosen global batchsize.
    pub global_batch: u64,
    /// Continuous uplink optimum at `global_batch`.
    pub uplink: UplinkAllocation,
    pub downlink: DownlinkAllocation,
    /// Deployable integer batchsizes; they sum to `global_batch`.
    pub device_batches: Vec<u64>,
    /// Uplink slots re-equalized for the integer batches.
    pub device_slots_s: Vec<f64>,
    pub latency: LatencyBreakdown,
    /// Loss decrement per second for the integer allocation.
    pub efficiency: f64,
    /// Loss decrement per second for the continuous allocation at the same
    /// global batch; an upper bound on `efficiency`.
    pub relaxed_efficiency: f64,
}

/// Fleet whose per-device compute latency is `batch * cycles / frequency`.
#[derive(Debug, Clone)]
pub struct CpuInstance {
    pub devices: Vec<CpuProfile>,
    pub rates: Vec<RateEstimate>,
    pub cost: ModelCost,
    pub uplink_frame_s: f64,
    pub downlink_frame_s: f64,
    pub max_batch: u64,
    pub tol: Tolerances,
}

impl CpuInstance {
    pub fn new(
        devices: Vec<CpuProfile>,
        rates: Vec<RateEstimate>,
        cost: ModelCost,
        uplink_frame_s: f64,
        downlink_frame_s: f64,
        max_batch: u64,
    ) -> Result<Self> {
        let inst = CpuInstance {
            devices,
            rates,
            cost,
            uplink_frame_s,
            downlink_frame_s,
            max_batch,
            tol: Tolerances::default(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(
            self.devices.len(),
            self.rates.len(),
            &self.cost,
            self.uplink_frame_s,
            self.downlink_frame_s,
            self.max_batch,
            &self.tol,
        )?;
        for (i, d) in self.devices.iter().enumerate() {
            if !(d.cpu_freq_hz > 0.0) || !d.cpu_freq_hz.is_finite() {
                return Err(Error::invalid(format!(
                    "device {i}: cpu frequency must be positive"
                )));
            }
        }
        Ok(())
    }

    fn lanes(&self) -> Result<Lanes> {
        let speed: Vec<f64> = self
            .devices
            .iter()
            .map(|d| d.cpu_freq_hz / self.cost.cycles_per_sample)
            .collect();
        let k = self.devices.len();
        Lanes::new(
            speed,
            vec![0.0; k],
            vec![1.0; k],
            self.rates.iter().map(|r| r.uplink_bps).collect(),
            self.max_batch as f64,
            self.cost.gradient_bits(),
            self.uplink_frame_s,
        )
    }

    fn update_latencies(&self) -> Vec<f64> {
        self.devices
            .iter()
            .map(|d| self.cost.update_cycles / d.cpu_freq_hz)
            .collect()
    }

    fn downlink_rates(&self) -> Vec<f64> {
        self.rates.iter().map(|r| r.downlink_bps).collect()
    }

    /// Optimal continuous batch split and uplink slots for a fixed global
    /// batch (need not be an integer).
    pub fn solve_uplink(&self, global_batch: f64) -> Result<UplinkAllocation> {
        self.validate()?;
        let lanes = self.lanes()?;
        uplink_from_lanes(&lanes, global_batch, self.cost.loss_coefficient, &self.tol)
    }

    /// Analytic bracket on the optimal uplink efficiency at a fixed global
    /// batch, derived without running the solver.
    pub fn eu_bounds(&self, global_batch: f64) -> Result<(f64, f64)> {
        self.validate()?;
        let lanes = self.lanes()?;
        eu_bounds_from_lanes(&lanes, global_batch, self.cost.loss_coefficient)
    }

    /// Closed-form bracket on the uplink multiplier given the optimal
    /// uplink efficiency.
    pub fn mu_bounds(&self, eu_star: f64, global_batch: f64) -> Result<MuBracket> {
        self.validate()?;
        let lanes = self.lanes()?;
        mu_bounds_from_lanes(
            &lanes,
            eu_star,
            global_batch,
            self.cost.loss_coefficient,
            &self.tol,
        )
    }

    /// Downlink slot optimum. The slot split does not depend on the global
    /// batch; the efficiency scaling does.
    pub fn solve_downlink(&self, global_batch: f64) -> Result<DownlinkAllocation> {
        self.validate()?;
        downlink_from_parts(
            &self.update_latencies(),
            &self.downlink_rates(),
            self.cost.gradient_bits(),
            self.downlink_frame_s,
            global_batch,
            self.cost.loss_coefficient,
            &self.tol,
        )
    }

    /// Jointly optimal global batch, batch split and slots.
    pub fn optimize_round(&self) -> Result<RoundPlan> {
        self.plan(None)
    }

    /// Optimal batch split and slots for a caller-chosen global batch.
    pub fn plan_for_batch(&self, global_batch: u64) -> Result<RoundPlan> {
        self.plan(Some(global_batch))
    }

    fn plan(&self, forced: Option<u64>) -> Result<RoundPlan> {
        self.validate()?;
        let lanes = self.lanes()?;
        plan_from_lanes(
            &lanes,
            &self.update_latencies(),
            &self.downlink_rates(),
            self.downlink_frame_s,
            self.cost.loss_coefficient,
            &self.tol,
            forced,
        )
    }

    /// Stationarity / feasibility residuals of a plan's continuous stage.
    pub fn kkt_residuals(&self, plan: &RoundPlan) -> Result<KktReport> {
        self.validate()?;
        let lanes = self.lanes()?;
        kkt::compute_kkt(
            &lanes,
            plan,
            &self.update_latencies(),
            &self.downlink_rates(),
            self.downlink_frame_s,
            self.cost.loss_coefficient,
        )
    }
}

fn validate_common(
    n_devices: usize,
    n_rates: usize,
    cost: &ModelCost,
    uplink_frame_s: f64,
    downlink_frame_s: f64,
    max_batch: u64,
    tol: &Tolerances,
) -> Result<()> {
    if n_devices == 0 {
        return Err(Error::invalid("no devices"));
    }
    if n_rates != n_devices {
        return Err(Error::invalid(format!(
            "{n_rates} rate estimates for {n_devices} devices"
        )));
    }
    cost.validate()?;
    if !(uplink_frame_s > 0.0) || !(downlink_frame_s > 0.0) {
        return Err(Error::invalid("frame lengths must be positive"));
    }
    if max_batch == 0 {
        return Err(Error::invalid("max batch must be at least 1"));
    }
    tol.validate()
}

fn uplink_from_lanes(
    lanes: &Lanes,
    global_batch: f64,
    xi: f64,
    tol: &Tolerances,
) -> Result<UplinkAllocation> {
    let sol = lanes.solve(global_batch, tol)?;
    let dl = loss_decay_cont(xi, global_batch);
    Ok(UplinkAllocation {
        batches: sol.batches,
        slots_s: sol.slots,
        global_batch,
        eu_star: sol.y / dl,
        mu_star: sol.nu / dl,
        training_speed: lanes.speed.clone(),
        priority_ratio: lanes.rho.clone(),
    })
}

fn eu_bounds_from_lanes(lanes: &Lanes, global_batch: f64, xi: f64) -> Result<(f64, f64)> {
    let min_t = lanes.min_total();
    let max_t = lanes.max_total();
    if global_batch < min_t - 1e-9 || global_batch > max_t + 1e-9 {
        return Err(Error::infeasible(format!(
            "global batch {global_batch} outside feasible range [{min_t}, {max_t}]"
        )));
    }
    let (y_lo, y_hi) = lanes.y_bounds(global_batch.clamp(min_t, max_t));
    let dl = loss_decay_cont(xi, global_batch);
    Ok((y_lo / dl, y_hi / dl))
}

fn mu_bounds_from_lanes(
    lanes: &Lanes,
    eu_star: f64,
    global_batch: f64,
    xi: f64,
    tol: &Tolerances,
) -> Result<MuBracket> {
    if !(eu_star > 0.0) || !eu_star.is_finite() {
        return Err(Error::invalid("uplink efficiency must be positive"));
    }
    let dl = loss_decay_cont(xi, global_batch);
    let y = eu_star * dl;
    let (nu_lo, nu_hi) = lanes.nu_bounds(y);
    let degenerate = global_batch <= lanes.min_total() + tol.batch
        || global_batch >= lanes.max_total() - tol.batch;
    Ok(MuBracket {
        lower: nu_lo / dl,
        upper: nu_hi / dl,
        degenerate,
    })
}

fn downlink_from_parts(
    update_s: &[f64],
    down_rates: &[f64],
    payload_bits: f64,
    frame_s: f64,
    global_batch: f64,
    xi: f64,
    tol: &Tolerances,
) -> Result<DownlinkAllocation> {
    if !(global_batch >= 1.0) {
        return Err(Error::invalid("global batch must be at least 1"));
    }
    let (x, slots) = equalizing_slots(
        update_s,
        down_rates,
        payload_bits,
        frame_s,
        tol,
        "downlink slots",
    )?;
    let dl = loss_decay_cont(xi, global_batch);
    Ok(DownlinkAllocation {
        slots_s: slots,
        ed_star: x / dl,
    })
}

fn loss_decay_cont(xi: f64, batch: f64) -> f64 {
    xi * batch.sqrt()
}

/// Slots that equalize `fixed latency + transmission latency` across devices
/// while filling the frame: the optimal time-sharing for any fixed batch
/// assignment. Returns the common completion time and the slot lengths.
pub fn equalize_slots(
    fixed_latency_s: &[f64],
    rates_bps: &[f64],
    payload_bits: f64,
    frame_s: f64,
) -> Result<(f64, Vec<f64>)> {
    equalizing_slots(
        fixed_latency_s,
        rates_bps,
        payload_bits,
        frame_s,
        &Tolerances::default(),
        "slot equalization",
    )
}

/// Batchsize a device would take before clamping to its feasible range:
/// the compute time left once the subperiod budget `subperiod_s` has paid
/// the fixed offset and the upload reservation, converted to samples at
/// `speed`. The reservation is the stationary upload time
/// `sqrt(payload_bits * frame_s * mu / (rho * rate_bps))` for a device
/// holding a fraction `rho` of the total training speed, where `mu` is the
/// shadow price on the batch total.
///
/// Monotone increasing in `speed` (whenever positive), `rho` and
/// `rate_bps`, and decreasing in `mu`; the clamped value feeds the actual
/// allocation.
#[allow(clippy::too_many_arguments)] // arguments are the formula's inputs
pub fn preclamp_batch(
    subperiod_s: f64,
    offset_s: f64,
    speed: f64,
    rho: f64,
    rate_bps: f64,
    payload_bits: f64,
    frame_s: f64,
    mu: f64,
) -> f64 {
    let reserve = (payload_bits * frame_s * mu / (rho * rate_bps)).sqrt();
    (subperiod_s - offset_s - reserve) * speed
}

fn plan_from_lanes(
    lanes: &Lanes,
    update_s: &[f64],
    down_rates: &[f64],
    downlink_frame_s: f64,
    xi: f64,
    tol: &Tolerances,
    forced: Option<u64>,
) -> Result<RoundPlan> {
    let (x_down, down_slots) = equalizing_slots(
        update_s,
        down_rates,
        lanes.payload_bits,
        downlink_frame_s,
        tol,
        "downlink slots",
    )?;
    let sol = optimize_lanes(lanes, x_down, tol, forced)?;
    assemble_plan(
        lanes,
        sol,
        x_down,
        down_slots,
        down_rates,
        update_s,
        downlink_frame_s,
        xi,
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble_plan(
    lanes: &Lanes,
    sol: OuterSolution,
    x_down: f64,
    down_slots: Vec<f64>,
    down_rates: &[f64],
    update_s: &[f64],
    downlink_frame_s: f64,
    xi: f64,
) -> Result<RoundPlan> {
    let k = lanes.k();
    let b = sol.global_batch;
    let mut parts = Vec::with_capacity(k);
    for i in 0..k {
        let compute = lanes.compute_s(i, sol.ints[i] as f64);
        let upload = transmission_latency(
            lanes.payload_bits,
            lanes.frame_s,
            sol.int_slots[i],
            lanes.rate_bps[i],
        )?;
        let download = transmission_latency(
            lanes.payload_bits,
            downlink_frame_s,
            down_slots[i],
            down_rates[i],
        )?;
        parts.push((compute, upload, download, update_s[i]));
    }
    let latency = round_latency(&parts)?;
    let dl = loss_decay_cont(xi, b as f64);
    let efficiency = dl / latency.round_total_s;
    let relaxed_efficiency = dl / (sol.cont.y + x_down);

    let uplink = UplinkAllocation {
        batches: sol.cont.batches.clone(),
        slots_s: sol.cont.slots.clone(),
        global_batch: b as f64,
        eu_star: sol.cont.y / dl,
        mu_star: sol.cont.nu / dl,
        training_speed: lanes.speed.clone(),
        priority_ratio: lanes.rho.clone(),
    };
    let downlink = DownlinkAllocation {
        slots_s: down_slots,
        ed_star: x_down / dl,
    };
    Ok(RoundPlan {
        global_batch: b,
        uplink,
        downlink,
        device_batches: sol.ints,
        device_slots_s: sol.int_slots,
        latency,
        efficiency,
        relaxed_efficiency,
    })
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;
    use proptest::test_runner::TestRunner;

    fn arb_instance() -> impl Strategy<Value = (CpuInstance, f64)> {
        // Speeds and rates in realistic ranges; batch drawn inside the
        // feasible span.
        (2usize..=5)
            .prop_flat_map(|k| {
                (
                    proptest::collection::vec(0.4e9..3.0e9f64, k),
                    proptest::collection::vec(2.0e7..9.0e7f64, k),
                    proptest::collection::vec(3.0e7..9.0e7f64, k),
                    0.0..1.0f64,
                )
            })
            .prop_map(|(freqs, ups, downs, frac)| {
                let k = freqs.len();
                let inst = CpuInstance::new(
                    freqs.iter().map(|&f| CpuProfile::new(f).unwrap()).collect(),
                    (0..k)
                        .map(|i| RateEstimate::new(ups[i], downs[i]).unwrap())
                        .collect(),
                    ModelCost::default(),
                    0.010,
                    0.010,
                    128,
                )
                .unwrap();
                let b = k as f64 + frac * (128.0 * k as f64 - k as f64);
                (inst, b)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solve_uplink_invariants((inst, b) in arb_instance()) {
            let up = inst.solve_uplink(b).unwrap();
            let k = up.batches.len();
            // Batch total and frame fill.
            let total: f64 = up.batches.iter().sum();
            prop_assert!((total - b).abs() < 1e-6, "batch total {total} vs {b}");
            let slot_total: f64 = up.slots_s.iter().sum();
            prop_assert!((slot_total - 0.010).abs() < 1e-9);
            // Bounds.
            for i in 0..k {
                prop_assert!(up.batches[i] >= 1.0 - 1e-9 && up.batches[i] <= 128.0 + 1e-9);
                prop_assert!(up.slots_s[i] > 0.0);
            }
            // Completion times equalized.
            let s = inst.cost.gradient_bits();
            let mut times = Vec::new();
            for i in 0..k {
                let v = inst.devices[i].cpu_freq_hz / inst.cost.cycles_per_sample;
                let t = up.batches[i] / v
                    + s * 0.010 / (up.slots_s[i] * inst.rates[i].uplink_bps);
                times.push(t);
            }
            let y = times.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            for (i, t) in times.iter().enumerate() {
                prop_assert!((y - t).abs() < 1e-8 * y, "device {i} lags: {t} vs {y}");
            }
            // Efficiency bounds bracket.
            let (lo, hi) = inst.eu_bounds(b).unwrap();
            prop_assert!(lo <= up.eu_star * (1.0 + 1e-9));
            prop_assert!(up.eu_star <= hi * (1.0 + 1e-9));
        }

        #[test]
        fn mu_containment((inst, b) in arb_instance()) {
            let up = inst.solve_uplink(b).unwrap();
            let mb = inst.mu_bounds(up.eu_star, b).unwrap();
            if !mb.degenerate {
                let slack = 1e-9 * mb.upper.abs();
                prop_assert!(up.mu_star >= mb.lower - slack,
                    "mu {} below {}", up.mu_star, mb.lower);
                prop_assert!(up.mu_star <= mb.upper + slack,
                    "mu {} above {}", up.mu_star, mb.upper);
            }
        }
    }

    /// Deterministic planner sweep: plan invariants across a fixed set of
    /// seeded random instances (heavier than a proptest case budget).
    #[test]
    fn plan_sweep_deterministic() {
        use proptest::strategy::ValueTree;
        let mut runner = TestRunner::deterministic();
        for _ in 0..8 {
            let (inst, _) = arb_instance().new_tree(&mut runner).unwrap().current();
            let plan = inst.optimize_round().unwrap();
            assert_eq!(plan.device_batches.iter().sum::<u64>(), plan.global_batch);
            let report = inst.kkt_residuals(&plan).unwrap();
            assert!(
                report.max_abs_residual < 1e-6,
                "kkt residual {}",
                report.max_abs_residual
            );
        }
    }
}
