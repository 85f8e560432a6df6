//! Wireless channel model: log-distance pathloss plus Rayleigh block fading,
//! reduced to a per-device average rate by Monte Carlo.
//!
//! All dBm/watt conversions live here so the rest of the crate works in
//! linear units only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Convert a dBm power to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

/// Convert a watt power to dBm.
pub fn watt_to_dbm(watt: f64) -> f64 {
    10.0 * (watt / 1e-3).log10()
}

/// Small-scale fading applied on top of the distance-based pathloss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fading {
    /// Rayleigh fading: the channel power gain is exponential with the given
    /// mean. `mean_power = 1.0` is the unit-mean default.
    Rayleigh { mean_power: f64 },
    /// Deterministic bypass: the power gain is exactly `gain` (no averaging
    /// noise). Useful for exact closed-form checks.
    Deterministic { gain: f64 },
}

impl Default for Fading {
    fn default() -> Self {
        Fading::Rayleigh { mean_power: 1.0 }
    }
}

/// Static channel parameters for a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// System bandwidth W in hertz.
    pub bandwidth_hz: f64,
    /// Noise power spectral density in dBm per hertz.
    pub noise_density_dbm_per_hz: f64,
    /// Pathloss at 1 km, in dB.
    pub pathloss_intercept_db: f64,
    /// Pathloss slope per decade of distance, in dB.
    pub pathloss_slope_db: f64,
    pub fading: Fading,
    /// Monte Carlo sample count for the rate average.
    pub mc_samples: u32,
    /// Master seed for the fading draws.
    pub rng_seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            bandwidth_hz: 10e6,
            noise_density_dbm_per_hz: -174.0,
            pathloss_intercept_db: 128.1,
            pathloss_slope_db: 37.6,
            fading: Fading::default(),
            mc_samples: 100_000,
            rng_seed: 0xFEE1,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) || !self.bandwidth_hz.is_finite() {
            return Err(Error::invalid(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth_hz
            )));
        }
        if !self.noise_density_dbm_per_hz.is_finite()
            || !self.pathloss_intercept_db.is_finite()
            || !self.pathloss_slope_db.is_finite()
        {
            return Err(Error::invalid("channel coefficients must be finite"));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        match self.fading {
            Fading::Rayleigh { mean_power } if !(mean_power > 0.0) => Err(Error::invalid(format!(
                "Rayleigh mean power must be positive, got {mean_power}"
            ))),
            Fading::Deterministic { gain } if !(gain > 0.0) => Err(Error::invalid(format!(
                "deterministic channel gain must be positive, got {gain}"
            ))),
            _ => Ok(()),
        }
    }

    /// Log-distance pathloss in dB at `distance_km`.
    pub fn pathloss_db(&self, distance_km: f64) -> Result<f64> {
        if !(distance_km > 0.0) || !distance_km.is_finite() {
            return Err(Error::invalid(format!(
                "distance must be positive and finite, got {distance_km} km"
            )));
        }
        Ok(self.pathloss_intercept_db + self.pathloss_slope_db * distance_km.log10())
    }

    /// Average achievable rate in bits per second for a link with the given
    /// transmit power and distance, using the seed stored in `self`.
    pub fn average_rate(&self, tx_power_dbm: f64, distance_km: f64) -> Result<f64> {
        self.average_rate_stream(tx_power_dbm, distance_km, &[])
    }

    /// As [`average_rate`](Self::average_rate) but drawing fading samples from
    /// the substream identified by `tags` (device index, round, link, ...).
    pub fn average_rate_stream(
        &self,
        tx_power_dbm: f64,
        distance_km: f64,
        tags: &[u64],
    ) -> Result<f64> {
        self.validate()?;
        if !tx_power_dbm.is_finite() {
            return Err(Error::invalid(format!(
                "transmit power must be finite, got {tx_power_dbm} dBm"
            )));
        }
        let pathloss_db = self.pathloss_db(distance_km)?;
        let rx_power_w = dbm_to_watt(tx_power_dbm - pathloss_db);
        let noise_w = dbm_to_watt(self.noise_density_dbm_per_hz) * self.bandwidth_hz;
        let mean_snr = rx_power_w / noise_w;
        if !mean_snr.is_finite() {
            return Err(Error::invalid(format!(
                "mean SNR is not finite (rx {rx_power_w} W over noise {noise_w} W)"
            )));
        }

        let rate = match self.fading {
            Fading::Deterministic { gain } => self.bandwidth_hz * (1.0 + mean_snr * gain).log2(),
            Fading::Rayleigh { mean_power } => {
                use rand::Rng;
                let mut rng = rng::substream(self.rng_seed, tags);
                let n = self.mc_samples as usize;
                let mut acc = 0.0f64;
                for _ in 0..n {
                    // Unit-mean exponential power gain via inverse CDF.
                    let u: f64 = rng.random();
                    let gain = -(1.0 - u).ln() * mean_power;
                    acc += (1.0 + mean_snr * gain).log2();
                }
                self.bandwidth_hz * acc / n as f64
            }
        };
        debug_assert!(rate.is_finite() && rate >= 0.0);
        Ok(rate)
    }
}

/// Average uplink/downlink rates for one device, in bits per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub uplink_bps: f64,
    pub downlink_bps: f64,
}

impl RateEstimate {
    pub fn new(uplink_bps: f64, downlink_bps: f64) -> Result<Self> {
        for (name, v) in [("uplink", uplink_bps), ("downlink", downlink_bps)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} rate must be positive and finite, got {v} bps"
                )));
            }
        }
        Ok(RateEstimate {
            uplink_bps,
            downlink_bps,
        })
    }
}
