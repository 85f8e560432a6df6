//! Brute-force reference optimizer.
//!
//! Enumerates per-device batchsizes over a caller-supplied value set and
//! slot allocations over an equally spaced grid of frame fractions, and
//! returns the best round found. No stationarity reasoning is used: every
//! grid point is evaluated with the true latency model (including, for GPU
//! devices, the flat region below the saturation threshold that the fast
//! solver excludes by construction). Intended as an independent
//! cross-check, not for production planning.
//!
//! The uplink and downlink subperiods add up device-independently, so the
//! enumeration minimizes the two subperiods separately; this is an
//! arithmetic property of the round latency, not an optimizer shortcut.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::latency::{
    cpu_compute_latency, cpu_update_latency, gpu_compute_latency, gpu_update_latency,
};
use crate::optimizer::{CpuInstance, GpuInstance};

/// Enumeration grid description.
#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Candidate batchsizes each device may take.
    pub batch_values: Vec<u64>,
    /// Each frame is divided into this many equal slot quanta; a device's
    /// slot is a positive whole number of quanta.
    pub slot_levels: u32,
    /// Upper bound on evaluated grid points; exceeding it is an error so a
    /// mistyped spec fails fast instead of running for hours.
    pub max_points: u128,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            batch_values: (1..=16).collect(),
            slot_levels: 64,
            max_points: 50_000_000,
        }
    }
}

impl GridSpec {
    pub fn validate(&self, devices: usize, max_batch: u64) -> Result<()> {
        if devices == 0 {
            return Err(Error::invalid("no devices"));
        }
        if self.batch_values.is_empty() {
            return Err(Error::invalid("batch_values must not be empty"));
        }
        for &b in &self.batch_values {
            if b < 1 || b > max_batch {
                return Err(Error::invalid(format!(
                    "batch value {b} outside [1, {max_batch}]"
                )));
            }
        }
        if (self.slot_levels as usize) < devices {
            return Err(Error::invalid(format!(
                "{} slot levels cannot host {devices} positive slots",
                self.slot_levels
            )));
        }
        if self.max_points == 0 {
            return Err(Error::invalid("max_points must be positive"));
        }
        Ok(())
    }
}

/// Best round found by the enumeration.
#[derive(Debug, Clone, Serialize)]
pub struct GridRoundResult {
    pub device_batches: Vec<u64>,
    pub uplink_slots_s: Vec<f64>,
    pub downlink_slots_s: Vec<f64>,
    pub uplink_subperiod_s: f64,
    pub downlink_subperiod_s: f64,
    pub round_s: f64,
    pub efficiency: f64,
    pub points_evaluated: u128,
}

/// Exhaustive search for a CPU fleet.
pub fn grid_search_cpu(inst: &CpuInstance, spec: &GridSpec) -> Result<GridRoundResult> {
    inst.validate()?;
    spec.validate(inst.devices.len(), inst.max_batch)?;
    let cost = &inst.cost;
    let compute: Vec<Vec<f64>> = inst
        .devices
        .iter()
        .map(|d| {
            spec.batch_values
                .iter()
                .map(|&b| Ok(cpu_compute_latency(b as f64, cost, d)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let update: Vec<f64> = inst
        .devices
        .iter()
        .map(|d| cpu_update_latency(cost, d))
        .collect();
    grid_search_impl(inst_parts(inst)?, compute, update, spec)
}

/// Exhaustive search for a GPU fleet.
pub fn grid_search_gpu(inst: &GpuInstance, spec: &GridSpec) -> Result<GridRoundResult> {
    inst.validate()?;
    spec.validate(inst.devices.len(), inst.max_batch)?;
    let cost = &inst.cost;
    let cap = inst.max_batch as f64;
    let compute: Vec<Vec<f64>> = inst
        .devices
        .iter()
        .map(|d| {
            spec.batch_values
                .iter()
                .map(|&b| gpu_compute_latency(b as f64, d, cap))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let update: Vec<f64> = inst
        .devices
        .iter()
        .map(|d| gpu_update_latency(cost, d))
        .collect();
    grid_search_impl(
        Parts {
            up_rates: inst.rates.iter().map(|r| r.uplink_bps).collect(),
            down_rates: inst.rates.iter().map(|r| r.downlink_bps).collect(),
            payload_bits: cost.gradient_bits(),
            uplink_frame_s: inst.uplink_frame_s,
            downlink_frame_s: inst.downlink_frame_s,
            xi: cost.loss_coefficient,
        },
        compute,
        update,
        spec,
    )
}

struct Parts {
    up_rates: Vec<f64>,
    down_rates: Vec<f64>,
    payload_bits: f64,
    uplink_frame_s: f64,
    downlink_frame_s: f64,
    xi: f64,
}

fn inst_parts(inst: &CpuInstance) -> Result<Parts> {
    Ok(Parts {
        up_rates: inst.rates.iter().map(|r| r.uplink_bps).collect(),
        down_rates: inst.rates.iter().map(|r| r.downlink_bps).collect(),
        payload_bits: inst.cost.gradient_bits(),
        uplink_frame_s: inst.uplink_frame_s,
        downlink_frame_s: inst.downlink_frame_s,
        xi: inst.cost.loss_coefficient,
    })
}

/// Number of compositions of `levels` quanta into `parts` positive parts,
/// saturating at `u128::MAX` on overflow.
fn composition_count(levels: u32, parts: usize) -> u128 {
    // C(levels - 1, parts - 1), multiplicative form with exact division.
    let n = (levels as u128).saturating_sub(1);
    let k = (parts as u128).saturating_sub(1);
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Visit every composition of `total` quanta into `parts` positive parts in
/// lexicographic order.
fn for_each_composition(total: u32, parts: usize, f: &mut impl FnMut(&[u32])) {
    fn rec(remaining: u32, left: usize, buf: &mut Vec<u32>, f: &mut impl FnMut(&[u32])) {
        if left == 1 {
            buf.push(remaining);
            f(buf);
            buf.pop();
            return;
        }
        let max_here = remaining - (left as u32 - 1);
        for v in 1..=max_here {
            buf.push(v);
            rec(remaining - v, left - 1, buf, f);
            buf.pop();
        }
    }
    let mut buf = Vec::with_capacity(parts);
    rec(total, parts, &mut buf, f);
}

fn grid_search_impl(
    parts: Parts,
    compute: Vec<Vec<f64>>,
    update: Vec<f64>,
    spec: &GridSpec,
) -> Result<GridRoundResult> {
    let k = compute.len();
    let g = spec.slot_levels;
    let nv = spec.batch_values.len() as u128;

    let comp_count = composition_count(g, k);
    let combo_count = nv.checked_pow(k as u32).unwrap_or(u128::MAX);
    let total_points = combo_count
        .checked_mul(comp_count)
        .and_then(|v| v.checked_add(comp_count))
        .unwrap_or(u128::MAX);
    if total_points > spec.max_points {
        return Err(Error::GridCapExceeded {
            points: total_points,
            cap: spec.max_points,
        });
    }

    // Transmission latency of a slot of `u` quanta is payload * levels /
    // (u * rate): the frame length cancels. Precompute per device and level.
    let up_tx: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..=g)
                .map(|u| {
                    if u == 0 {
                        f64::INFINITY
                    } else {
                        parts.payload_bits * g as f64 / (u as f64 * parts.up_rates[i])
                    }
                })
                .collect()
        })
        .collect();
    let down_tx: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..=g)
                .map(|u| {
                    if u == 0 {
                        f64::INFINITY
                    } else {
                        parts.payload_bits * g as f64 / (u as f64 * parts.down_rates[i])
                    }
                })
                .collect()
        })
        .collect();

    // Downlink: independent of the batch choice, minimized once.
    let mut best_down = f64::INFINITY;
    let mut best_down_units: Vec<u32> = Vec::new();
    for_each_composition(g, k, &mut |units| {
        let worst = (0..k)
            .map(|i| update[i] + down_tx[i][units[i] as usize])
            .fold(f64::NEG_INFINITY, f64::max);
        if worst < best_down {
            best_down = worst;
            best_down_units = units.to_vec();
        }
    });

    // Uplink: joint enumeration of batch choices and slot compositions.
    let mut best_eff = f64::NEG_INFINITY;
    let mut best_choice: Vec<usize> = Vec::new();
    let mut best_up_units: Vec<u32> = Vec::new();
    let mut best_up = f64::INFINITY;
    let mut choice = vec![0usize; k];
    loop {
        let batch_total: u64 = choice.iter().map(|&j| spec.batch_values[j]).sum();
        let decay = parts.xi * (batch_total as f64).sqrt();
        for_each_composition(g, k, &mut |units| {
            let worst = (0..k)
                .map(|i| compute[i][choice[i]] + up_tx[i][units[i] as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let eff = decay / (worst + best_down);
            if eff > best_eff {
                best_eff = eff;
                best_choice = choice.clone();
                best_up_units = units.to_vec();
                best_up = worst;
            }
        });
        // Odometer step over batch choices.
        let mut pos = k;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            choice[pos] += 1;
            if choice[pos] < spec.batch_values.len() {
                break;
            }
            choice[pos] = 0;
            if pos == 0 {
                pos = usize::MAX;
                break;
            }
        }
        if pos == usize::MAX {
            break;
        }
    }

    let quantum_up = parts.uplink_frame_s / g as f64;
    let quantum_down = parts.downlink_frame_s / g as f64;
    Ok(GridRoundResult {
        device_batches: best_choice.iter().map(|&j| spec.batch_values[j]).collect(),
        uplink_slots_s: best_up_units
            .iter()
            .map(|&u| u as f64 * quantum_up)
            .collect(),
        downlink_slots_s: best_down_units
            .iter()
            .map(|&u| u as f64 * quantum_down)
            .collect(),
        uplink_subperiod_s: best_up,
        downlink_subperiod_s: best_down,
        round_s: best_up + best_down,
        efficiency: best_eff,
        points_evaluated: total_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::RateEstimate;
    use crate::latency::{CpuProfile, ModelCost};

    fn tiny_instance() -> CpuInstance {
        let cost = ModelCost {
            param_count: 1_000_000,
            bits_per_element: 32,
            cycles_per_sample: 1e7,
            update_cycles: 7e8,
            update_flops: 7e8,
            loss_coefficient: 1.0,
        };
        CpuInstance::new(
            vec![
                CpuProfile::new(1.0e9).unwrap(),
                CpuProfile::new(2.0e9).unwrap(),
            ],
            vec![
                RateEstimate::new(4e7, 8e7).unwrap(),
                RateEstimate::new(6e7, 9e7).unwrap(),
            ],
            cost,
            0.010,
            0.010,
            8,
        )
        .unwrap()
    }

    #[test]
    fn cap_is_enforced() {
        let inst = tiny_instance();
        let spec = GridSpec {
            batch_values: (1..=8).collect(),
            slot_levels: 64,
            max_points: 100,
        };
        match grid_search_cpu(&inst, &spec) {
            Err(Error::GridCapExceeded { points, cap }) => {
                assert_eq!(cap, 100);
                assert!(points > 100);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn single_device_grid_matches_closed_form() {
        let cost = ModelCost {
            param_count: 1_000_000,
            bits_per_element: 32,
            cycles_per_sample: 1e7,
            update_cycles: 7e8,
            update_flops: 7e8,
            loss_coefficient: 1.0,
        };
        let inst = CpuInstance::new(
            vec![CpuProfile::new(1.0e9).unwrap()],
            vec![RateEstimate::new(5e7, 5e7).unwrap()],
            cost,
            0.010,
            0.010,
            8,
        )
        .unwrap();
        let spec = GridSpec {
            batch_values: (1..=8).collect(),
            slot_levels: 4,
            max_points: 1_000,
        };
        let res = grid_search_cpu(&inst, &spec).unwrap();
        // One device always gets the whole frame; the best batch maximizes
        // sqrt(B) / (B*C/f + s/R + s/R + MC/f), exhaustively checkable.
        assert_eq!(res.uplink_slots_s, vec![0.010]);
        assert_eq!(res.downlink_slots_s, vec![0.010]);
        let payload = cost.gradient_bits();
        let mut best = (0u64, f64::NEG_INFINITY);
        for b in 1..=8u64 {
            let t = b as f64 * 1e7 / 1e9 + payload / 5e7 + payload / 5e7 + 7e8 / 1e9;
            let e = (b as f64).sqrt() / t;
            if e > best.1 {
                best = (b, e);
            }
        }
        assert_eq!(res.device_batches, vec![best.0]);
        assert!((res.efficiency - best.1).abs() < 1e-12 * best.1);
    }

    #[test]
    fn composition_count_matches_enumeration() {
        for (g, k) in [(5u32, 2usize), (7, 3), (10, 4)] {
            let mut seen = 0u128;
            for_each_composition(g, k, &mut |units| {
                assert_eq!(units.iter().sum::<u32>(), g);
                assert!(units.iter().all(|&u| u >= 1));
                seen += 1;
            });
            assert_eq!(seen, composition_count(g, k));
        }
    }
}
