//! Stationarity and feasibility residuals for a plan's continuous stage.
//!
//! Multipliers are reconstructed from the slot allocation: each device's
//! slot weight `w_k = R_k * slot_k^2 / (payload * frame)` is proportional to
//! its subperiod multiplier, and the common factor is normalized so that the
//! efficiency-stationarity identity holds exactly. The reconstructed
//! multiplier therefore coincides with the search multiplier whenever no
//! batch bound is active, and remains the canonical certificate when bounds
//! clamp some devices.
//!
//! All residuals are reported relative to their natural scale, so a bound of
//! `1e-6` on [`KktReport::max_abs_residual`] is meaningful across instances
//! of very different magnitudes.

use serde::Serialize;

use crate::error::Result;
use crate::optimizer::engine::Lanes;
use crate::optimizer::RoundPlan;

/// Residual report; every entry is dimensionless.
#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    /// Canonical efficiency multiplier reconstructed from the slots.
    pub multiplier: f64,
    /// Per-device subperiod multipliers.
    pub lambda: Vec<f64>,
    /// Batch-coupling multiplier.
    pub gamma: f64,
    /// Per-device batch stationarity: spread for interior devices, sign
    /// violation for clamped ones.
    pub batch_stationarity: Vec<f64>,
    /// Per-device slot stationarity (zero by construction of `lambda`; kept
    /// as an internal consistency check).
    pub slot_stationarity: Vec<f64>,
    /// Efficiency stationarity (zero by normalization of `multiplier`).
    pub efficiency_stationarity: f64,
    /// Per-device uplink completion-time spread.
    pub uplink_equalization: Vec<f64>,
    /// Per-device downlink completion-time spread.
    pub downlink_equalization: Vec<f64>,
    /// |batch total - global batch| / global batch.
    pub primal_batch_residual: f64,
    /// |uplink slot total - frame| / frame.
    pub primal_uplink_time_residual: f64,
    /// |downlink slot total - frame| / frame.
    pub primal_downlink_time_residual: f64,
    /// Largest relative excursion of a batch outside its bounds.
    pub bound_violation: f64,
    /// Largest entry across all residual families.
    pub max_abs_residual: f64,
}

pub(crate) fn compute_kkt(
    lanes: &Lanes,
    plan: &RoundPlan,
    update_s: &[f64],
    down_rates: &[f64],
    downlink_frame_s: f64,
    xi: f64,
) -> Result<KktReport> {
    let k = lanes.k();
    let b = plan.uplink.global_batch;
    let dl = xi * b.sqrt();
    let batches = &plan.uplink.batches;
    let slots = &plan.uplink.slots_s;
    let st = lanes.payload_bits * lanes.frame_s;

    // Slot weights and canonical multipliers.
    let w: Vec<f64> = (0..k)
        .map(|i| lanes.rate_bps[i] * slots[i] * slots[i] / st)
        .collect();
    let sum_w: f64 = w.iter().sum();
    let mu = 1.0 / (dl * sum_w);
    let lambda: Vec<f64> = w.iter().map(|wi| mu * wi).collect();

    // Efficiency stationarity: 1 - dl * sum(lambda), zero by construction.
    let efficiency_stationarity = (1.0 - dl * lambda.iter().sum::<f64>()).abs();

    // Slot stationarity: lambda_i * payload * frame / (R_i slot_i^2) == mu.
    let slot_stationarity: Vec<f64> = (0..k)
        .map(|i| {
            let implied = lambda[i] * st / (lanes.rate_bps[i] * slots[i] * slots[i]);
            (implied - mu).abs() / mu
        })
        .collect();

    // Classify devices against their batch bounds.
    let eps_b = 1e-9 * lanes.max_batch;
    let mut interior = Vec::new();
    let mut at_min = Vec::new();
    let mut at_max = Vec::new();
    for (i, &b) in batches.iter().enumerate() {
        if b <= lanes.min_batch[i] + eps_b {
            at_min.push(i);
        } else if b >= lanes.max_batch - eps_b {
            at_max.push(i);
        } else {
            interior.push(i);
        }
    }

    // Batch stationarity requires lambda_i / V_i + gamma = 0 on the
    // interior, >= 0 at the lower bound, <= 0 at the upper bound.
    let ratio: Vec<f64> = (0..k).map(|i| lambda[i] / lanes.speed[i]).collect();
    let gamma = if !interior.is_empty() {
        -interior.iter().map(|&i| ratio[i]).sum::<f64>() / interior.len() as f64
    } else {
        let lo = at_min
            .iter()
            .map(|&i| -ratio[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = at_max
            .iter()
            .map(|&i| -ratio[i])
            .fold(f64::INFINITY, f64::min);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            (false, false) => 0.0,
        }
    };
    let batch_stationarity: Vec<f64> = (0..k)
        .map(|i| {
            let scale = ratio[i].abs().max(gamma.abs()).max(f64::MIN_POSITIVE);
            let resid = ratio[i] + gamma;
            let raw = if interior.contains(&i) {
                resid.abs()
            } else if at_min.contains(&i) {
                (-resid).max(0.0)
            } else {
                resid.max(0.0)
            };
            raw / scale
        })
        .collect();

    // Subperiod equalization: every multiplier is positive, so both the
    // uplink and downlink completion times must be flat across devices.
    let up_done: Vec<f64> = (0..k)
        .map(|i| lanes.compute_s(i, batches[i]) + st / (lanes.rate_bps[i] * slots[i]))
        .collect();
    let y = up_done.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let uplink_equalization: Vec<f64> = up_done.iter().map(|&t| (y - t).abs() / y).collect();

    let dslots = &plan.downlink.slots_s;
    let sd = lanes.payload_bits * downlink_frame_s;
    let down_done: Vec<f64> = (0..k)
        .map(|i| update_s[i] + sd / (down_rates[i] * dslots[i]))
        .collect();
    let x = down_done.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let downlink_equalization: Vec<f64> = down_done.iter().map(|&t| (x - t).abs() / x).collect();

    // Primal feasibility.
    let primal_batch_residual = (batches.iter().sum::<f64>() - b).abs() / b;
    let primal_uplink_time_residual =
        (slots.iter().sum::<f64>() - lanes.frame_s).abs() / lanes.frame_s;
    let primal_downlink_time_residual =
        (dslots.iter().sum::<f64>() - downlink_frame_s).abs() / downlink_frame_s;
    let bound_violation = (0..k)
        .map(|i| {
            let below = (lanes.min_batch[i] - batches[i]).max(0.0);
            let above = (batches[i] - lanes.max_batch).max(0.0);
            below.max(above) / lanes.max_batch
        })
        .fold(0.0, f64::max);

    let mut max_abs = efficiency_stationarity
        .max(primal_batch_residual)
        .max(primal_uplink_time_residual)
        .max(primal_downlink_time_residual)
        .max(bound_violation);
    for v in batch_stationarity
        .iter()
        .chain(slot_stationarity.iter())
        .chain(uplink_equalization.iter())
        .chain(downlink_equalization.iter())
    {
        max_abs = max_abs.max(*v);
    }

    Ok(KktReport {
        multiplier: mu,
        lambda,
        gamma,
        batch_stationarity,
        slot_stationarity,
        efficiency_stationarity,
        uplink_equalization,
        downlink_equalization,
        primal_batch_residual,
        primal_uplink_time_residual,
        primal_downlink_time_residual,
        bound_violation,
        max_abs_residual: max_abs,
    })
}
