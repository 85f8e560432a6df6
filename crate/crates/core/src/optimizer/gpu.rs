//! GPU fleets: flat-then-linear compute latency.
//!
//! A GPU finishes any batch up to its saturation threshold in a fixed time
//! and grows linearly beyond it. Restricting batchsizes to the linear region
//! (which is where every optimum lives, because below the threshold extra
//! samples are free) maps each device onto an affine lane with a constant
//! offset, so the CPU engine solves the GPU problem unchanged.

use serde::{Deserialize, Serialize};

use crate::channel::RateEstimate;
use crate::error::{Error, Result};
use crate::latency::{GpuProfile, ModelCost};
use crate::optimizer::engine::Lanes;
use crate::optimizer::{
    downlink_from_parts, eu_bounds_from_lanes, kkt, mu_bounds_from_lanes, plan_from_lanes,
    uplink_from_lanes, validate_common, DownlinkAllocation, KktReport, MuBracket, RoundPlan,
    Tolerances, UplinkAllocation,
};

/// Fleet of GPU devices; same method surface as [`crate::CpuInstance`].
#[derive(Debug, Clone)]
pub struct GpuInstance {
    pub devices: Vec<GpuProfile>,
    pub rates: Vec<RateEstimate>,
    pub cost: ModelCost,
    pub uplink_frame_s: f64,
    pub downlink_frame_s: f64,
    pub max_batch: u64,
    pub tol: Tolerances,
}

impl GpuInstance {
    pub fn new(
        devices: Vec<GpuProfile>,
        rates: Vec<RateEstimate>,
        cost: ModelCost,
        uplink_frame_s: f64,
        downlink_frame_s: f64,
        max_batch: u64,
    ) -> Result<Self> {
        let inst = GpuInstance {
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
            d.validate()
                .map_err(|e| Error::invalid(format!("device {i}: {e}")))?;
            if d.threshold_batch > self.max_batch as f64 {
                return Err(Error::invalid(format!(
                    "device {i}: saturation threshold {} exceeds max batch {}",
                    d.threshold_batch, self.max_batch
                )));
            }
        }
        Ok(())
    }

    /// Affine lane view: on the linear region, latency = offset + batch/speed
    /// with speed = 1/slope and offset = flat - slope * threshold. Each
    /// device's batch floor is raised to its threshold so the affine view is
    /// exact.
    fn lanes(&self) -> Result<Lanes> {
        let k = self.devices.len();
        let mut speed = Vec::with_capacity(k);
        let mut offset = Vec::with_capacity(k);
        let mut min_batch = Vec::with_capacity(k);
        for d in &self.devices {
            speed.push(1.0 / d.slope_s_per_sample);
            offset.push(d.flat_latency_s - d.slope_s_per_sample * d.threshold_batch);
            min_batch.push(d.threshold_batch.max(1.0));
        }
        Lanes::new(
            speed,
            offset,
            min_batch,
            self.rates.iter().map(|r| r.uplink_bps).collect(),
            self.max_batch as f64,
            self.cost.gradient_bits(),
            self.uplink_frame_s,
        )
    }

    fn update_latencies(&self) -> Vec<f64> {
        self.devices
            .iter()
            .map(|d| self.cost.update_flops / d.gpu_flops)
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

    /// Downlink slot optimum; independent of the global batch except for
    /// the efficiency scaling.
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

/// One timing measurement for the latency-profile fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpuFitSample {
    pub batch: f64,
    pub latency_s: f64,
}

/// Fit a flat-then-linear latency profile to timing measurements.
///
/// The saturation threshold is searched over the integer grid spanned by the
/// measured batchsizes; for each candidate, the flat latency and slope come
/// from an ordinary least-squares fit of `latency ~ max(0, batch -
/// threshold)`. The candidate with the smallest residual sum of squares
/// wins; ties keep the smallest threshold.
///
/// `gpu_flops` is carried into the returned profile for the update step and
/// does not influence the fit.
pub fn fit_gpu_profile(samples: &[GpuFitSample], gpu_flops: f64) -> Result<GpuProfile> {
    if samples.len() < 3 {
        return Err(Error::UnderdeterminedFit(format!(
            "need at least 3 measurements, got {}",
            samples.len()
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.batch >= 1.0) || !s.batch.is_finite() {
            return Err(Error::invalid(format!(
                "sample {i}: batch must be at least 1, got {}",
                s.batch
            )));
        }
        if !(s.latency_s > 0.0) || !s.latency_s.is_finite() {
            return Err(Error::invalid(format!(
                "sample {i}: latency must be positive, got {}",
                s.latency_s
            )));
        }
    }
    let mut batches: Vec<f64> = samples.iter().map(|s| s.batch).collect();
    batches.sort_by(|a, b| a.partial_cmp(b).unwrap());
    batches.dedup();
    if batches.len() < 3 {
        return Err(Error::UnderdeterminedFit(format!(
            "need at least 3 distinct batchsizes, got {}",
            batches.len()
        )));
    }
    let lo = batches[0].ceil() as u64;
    let hi = (batches[batches.len() - 1].ceil() as u64).saturating_sub(1);

    let n = samples.len() as f64;
    let mut best: Option<(f64, u64, f64, f64)> = None; // (rss, theta, flat, slope)
    for theta in lo..=hi {
        let t = theta as f64;
        // OLS of latency on max(0, batch - theta).
        let xs: Vec<f64> = samples.iter().map(|s| (s.batch - t).max(0.0)).collect();
        let has_flat = xs.contains(&0.0);
        let mean_x = xs.iter().sum::<f64>() / n;
        let mean_y = samples.iter().map(|s| s.latency_s).sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (s, &x) in samples.iter().zip(&xs) {
            sxx += (x - mean_x) * (x - mean_x);
            sxy += (x - mean_x) * (s.latency_s - mean_y);
        }
        if !has_flat || sxx <= 0.0 {
            continue;
        }
        let slope = sxy / sxx;
        let flat = mean_y - slope * mean_x;
        if !(slope > 0.0) || !(flat > 0.0) {
            continue;
        }
        let rss: f64 = samples
            .iter()
            .zip(&xs)
            .map(|(s, &x)| {
                let e = s.latency_s - (flat + slope * x);
                e * e
            })
            .sum();
        let better = match best {
            None => true,
            Some((best_rss, _, _, _)) => rss < best_rss,
        };
        if better {
            best = Some((rss, theta, flat, slope));
        }
    }
    match best {
        Some((_, theta, flat, slope)) => GpuProfile::new(flat, slope, theta as f64, gpu_flops),
        None => Err(Error::UnderdeterminedFit(
            "no admissible knee: need at least one measurement at or below the knee \
             and batch spread above it"
                .into(),
        )),
    }
}
