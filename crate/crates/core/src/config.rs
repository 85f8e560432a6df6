//! Shared system-level configuration and device fleet types.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, RateEstimate};
use crate::error::{Error, Result};
use crate::latency::{CpuProfile, GpuProfile, ModelCost};

/// Cell-wide constants: channel, frame structure, powers, model cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub channel: ChannelParams,
    /// Cell radius in km; devices are dropped uniformly over the disk.
    pub cell_radius_km: f64,
    /// Device transmit power for gradient uploads, in dBm.
    pub uplink_tx_power_dbm: f64,
    /// Base-station transmit power for model downloads, in dBm.
    pub downlink_tx_power_dbm: f64,
    /// Uplink frame length T_f^U in seconds.
    pub uplink_frame_s: f64,
    /// Downlink frame length T_f^D in seconds.
    pub downlink_frame_s: f64,
    /// Per-device batchsize cap B^max.
    pub max_batch: u64,
    pub cost: ModelCost,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            channel: ChannelParams::default(),
            cell_radius_km: 0.2,
            uplink_tx_power_dbm: 28.0,
            downlink_tx_power_dbm: 28.0,
            uplink_frame_s: 0.010,
            downlink_frame_s: 0.010,
            max_batch: 128,
            cost: ModelCost::default(),
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.cost.validate()?;
        if !(self.cell_radius_km > 0.0) {
            return Err(Error::invalid(format!(
                "cell radius must be positive, got {} km",
                self.cell_radius_km
            )));
        }
        if !(self.uplink_frame_s > 0.0) || !(self.downlink_frame_s > 0.0) {
            return Err(Error::invalid("frame lengths must be positive"));
        }
        if !self.uplink_tx_power_dbm.is_finite() || !self.downlink_tx_power_dbm.is_finite() {
            return Err(Error::invalid("transmit powers must be finite"));
        }
        if self.max_batch == 0 {
            return Err(Error::invalid("max_batch must be at least 1"));
        }
        Ok(())
    }
}

/// Compute capability of a single device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComputeProfile {
    Cpu(CpuProfile),
    Gpu(GpuProfile),
}

/// One device: compute capability, position in the cell, transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub compute: ComputeProfile,
    /// Position relative to the base station, in km.
    pub position_km: (f64, f64),
    pub tx_power_dbm: f64,
}

impl DeviceProfile {
    pub fn distance_km(&self) -> f64 {
        let (x, y) = self.position_km;
        (x * x + y * y).sqrt()
    }
}

/// A device fleet together with its current average-rate estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub devices: Vec<DeviceProfile>,
    pub rates: Vec<RateEstimate>,
}

impl Fleet {
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::invalid("fleet has no devices"));
        }
        if self.devices.len() != self.rates.len() {
            return Err(Error::invalid(format!(
                "{} devices but {} rate estimates",
                self.devices.len(),
                self.rates.len()
            )));
        }
        Ok(())
    }

    /// All-CPU view of the fleet, or an error naming the first non-CPU device.
    pub fn cpu_profiles(&self) -> Result<Vec<CpuProfile>> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, d)| match d.compute {
                ComputeProfile::Cpu(p) => Ok(p),
                ComputeProfile::Gpu(_) => Err(Error::invalid(format!(
                    "device {i} is a GPU device in a CPU-mode operation"
                ))),
            })
            .collect()
    }

    /// All-GPU view of the fleet, or an error naming the first non-GPU device.
    pub fn gpu_profiles(&self) -> Result<Vec<GpuProfile>> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, d)| match d.compute {
                ComputeProfile::Gpu(p) => Ok(p),
                ComputeProfile::Cpu(_) => Err(Error::invalid(format!(
                    "device {i} is a CPU device in a GPU-mode operation"
                ))),
            })
            .collect()
    }
}
