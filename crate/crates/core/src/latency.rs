//! Per-device latency primitives for one communication round: local compute,
//! gradient upload, model download, and the global update step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CPU compute capability of a device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuProfile {
    /// Clock frequency f^C in hertz.
    pub cpu_freq_hz: f64,
}

impl CpuProfile {
    pub fn new(cpu_freq_hz: f64) -> Result<Self> {
        if !(cpu_freq_hz > 0.0) || !cpu_freq_hz.is_finite() {
            return Err(Error::invalid(format!(
                "CPU frequency must be positive and finite, got {cpu_freq_hz} Hz"
            )));
        }
        Ok(CpuProfile { cpu_freq_hz })
    }
}

/// Measured GPU batch-latency profile: flat while the device is data-bound,
/// then linear once it is compute-bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile {
    /// Latency floor t_l in seconds (any batch up to the threshold).
    pub flat_latency_s: f64,
    /// Marginal cost c in seconds per sample beyond the threshold.
    pub slope_s_per_sample: f64,
    /// Threshold batchsize where the profile leaves the flat region.
    pub threshold_batch: f64,
    /// Sustained throughput f^G in FLOP/s, used for the update step.
    pub gpu_flops: f64,
}

impl GpuProfile {
    pub fn new(
        flat_latency_s: f64,
        slope_s_per_sample: f64,
        threshold_batch: f64,
        gpu_flops: f64,
    ) -> Result<Self> {
        let p = GpuProfile {
            flat_latency_s,
            slope_s_per_sample,
            threshold_batch,
            gpu_flops,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        // A zero floor is allowed: with a zero threshold it reduces the
        // profile to a purely linear law, the degenerate twin of a CPU
        // device. Configurations whose total compute time can reach zero
        // are rejected where the profile is priced.
        if !(self.flat_latency_s >= 0.0) || !self.flat_latency_s.is_finite() {
            return Err(Error::invalid(format!(
                "flat latency must be nonnegative, got {} s",
                self.flat_latency_s
            )));
        }
        if !(self.slope_s_per_sample > 0.0) || !self.slope_s_per_sample.is_finite() {
            return Err(Error::invalid(format!(
                "latency slope must be positive, got {} s/sample",
                self.slope_s_per_sample
            )));
        }
        if !(self.threshold_batch >= 0.0) || !self.threshold_batch.is_finite() {
            return Err(Error::invalid(format!(
                "threshold batch must be nonnegative, got {}",
                self.threshold_batch
            )));
        }
        if !(self.gpu_flops > 0.0) || !self.gpu_flops.is_finite() {
            return Err(Error::invalid(format!(
                "GPU throughput must be positive, got {} FLOP/s",
                self.gpu_flops
            )));
        }
        Ok(())
    }
}

/// Static per-model cost constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    /// Number of model parameters p.
    pub param_count: u64,
    /// Bits per transmitted element b.
    pub bits_per_element: u32,
    /// CPU cycles per trained sample C.
    pub cycles_per_sample: f64,
    /// CPU cycles for the global update step M^C.
    pub update_cycles: f64,
    /// FLOPs for the global update step M^G.
    pub update_flops: f64,
    /// Loss-decay coefficient xi.
    pub loss_coefficient: f64,
}

impl ModelCost {
    /// Gradient payload size s = b * p in bits.
    pub fn gradient_bits(&self) -> f64 {
        self.bits_per_element as f64 * self.param_count as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.param_count == 0 || self.bits_per_element == 0 {
            return Err(Error::invalid(
                "param_count and bits_per_element must be positive",
            ));
        }
        for (name, v) in [
            ("cycles_per_sample", self.cycles_per_sample),
            ("update_cycles", self.update_cycles),
            ("update_flops", self.update_flops),
            ("loss_coefficient", self.loss_coefficient),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for ModelCost {
    fn default() -> Self {
        ModelCost {
            param_count: 8_062_504,
            bits_per_element: 32,
            cycles_per_sample: 1e7,
            update_cycles: 7e8,
            update_flops: 7e8,
            loss_coefficient: 1.0,
        }
    }
}

/// Local training latency on a CPU device: batch * C / f.
pub fn cpu_compute_latency(batch: f64, cost: &ModelCost, dev: &CpuProfile) -> f64 {
    debug_assert!(batch >= 0.0);
    batch * cost.cycles_per_sample / dev.cpu_freq_hz
}

/// Global update latency on a CPU device: M^C / f.
pub fn cpu_update_latency(cost: &ModelCost, dev: &CpuProfile) -> f64 {
    cost.update_cycles / dev.cpu_freq_hz
}

/// Local training latency on a GPU device (piecewise profile).
pub fn gpu_compute_latency(batch: f64, dev: &GpuProfile, max_batch: f64) -> Result<f64> {
    if !(batch >= 1.0 && batch <= max_batch) {
        return Err(Error::invalid(format!(
            "batch {batch} outside [1, {max_batch}]"
        )));
    }
    let over = (batch - dev.threshold_batch).max(0.0);
    Ok(dev.flat_latency_s + dev.slope_s_per_sample * over)
}

/// Global update latency on a GPU device: M^G / f^G.
pub fn gpu_update_latency(cost: &ModelCost, dev: &GpuProfile) -> f64 {
    cost.update_flops / dev.gpu_flops
}

/// Time to push `payload_bits` through a link that gets `slot_s` of every
/// `frame_s`-long frame at `rate_bps`.
pub fn transmission_latency(
    payload_bits: f64,
    frame_s: f64,
    slot_s: f64,
    rate_bps: f64,
) -> Result<f64> {
    if !(frame_s > 0.0) || !(rate_bps > 0.0) || !(payload_bits > 0.0) {
        return Err(Error::invalid(format!(
            "payload {payload_bits} bits, frame {frame_s} s and rate {rate_bps} bps must be positive"
        )));
    }
    // Slots come out of equalization arithmetic, so tolerate rounding at
    // the frame boundary (a full-frame slot may overshoot by an ulp).
    if slot_s < 0.0 || slot_s > frame_s * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "slot {slot_s} s outside [0, {frame_s}] frame"
        )));
    }
    if slot_s == 0.0 {
        return Err(Error::infeasible(
            "zero slot share: the payload can never be delivered",
        ));
    }
    Ok(payload_bits * frame_s / (slot_s * rate_bps))
}

/// As [`transmission_latency`] but rounding the transfer up to whole frames.
pub fn transmission_latency_whole_frames(
    payload_bits: f64,
    frame_s: f64,
    slot_s: f64,
    rate_bps: f64,
) -> Result<f64> {
    let fractional = transmission_latency(payload_bits, frame_s, slot_s, rate_bps)?;
    let frames = (fractional / frame_s - 1e-9).ceil().max(1.0);
    Ok(frames * frame_s)
}

/// Latency breakdown of one full round across all devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub compute_s: Vec<f64>,
    pub upload_s: Vec<f64>,
    pub download_s: Vec<f64>,
    pub update_s: Vec<f64>,
    /// max_k(compute + upload) + max_k(download + update).
    pub round_total_s: f64,
}

impl LatencyBreakdown {
    /// Uplink subperiod length: the straggler's compute + upload time.
    pub fn uplink_subperiod_s(&self) -> f64 {
        per_device_max(&self.compute_s, &self.upload_s)
    }

    /// Downlink subperiod length: the straggler's download + update time.
    pub fn downlink_subperiod_s(&self) -> f64 {
        per_device_max(&self.download_s, &self.update_s)
    }
}

fn per_device_max(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x + y)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Compose per-device `(compute, upload, download, update)` latencies into the
/// round total. The round is synchronized: both subperiods wait for their
/// slowest device.
pub fn round_latency(per_device: &[(f64, f64, f64, f64)]) -> Result<LatencyBreakdown> {
    if per_device.is_empty() {
        return Err(Error::invalid("device list is empty"));
    }
    let mut out = LatencyBreakdown {
        compute_s: Vec::with_capacity(per_device.len()),
        upload_s: Vec::with_capacity(per_device.len()),
        download_s: Vec::with_capacity(per_device.len()),
        update_s: Vec::with_capacity(per_device.len()),
        round_total_s: 0.0,
    };
    for &(c, up, down, upd) in per_device {
        for v in [c, up, down, upd] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "latency components must be nonnegative and finite, got {v}"
                )));
            }
        }
        out.compute_s.push(c);
        out.upload_s.push(up);
        out.download_s.push(down);
        out.update_s.push(upd);
    }
    out.round_total_s = out.uplink_subperiod_s() + out.downlink_subperiod_s();
    Ok(out)
}
