//! Loss-decay proxy and learning-efficiency objective.
//!
//! One aggregation round with global batchsize B is credited a loss decay of
//! xi * sqrt(B); learning efficiency is that decay divided by the wall-clock
//! round latency. The square-root law also drives the batch-scaled learning
//! rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square-root loss-decay model for one model/dataset pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossProxy {
    /// Decay coefficient xi in loss units per sqrt(sample).
    pub xi: f64,
    /// Loss at round zero.
    pub initial_loss: f64,
    /// Loss floor the trajectory cannot cross.
    pub floor_loss: f64,
}

impl LossProxy {
    pub fn new(xi: f64, initial_loss: f64, floor_loss: f64) -> Result<Self> {
        let proxy = LossProxy {
            xi,
            initial_loss,
            floor_loss,
        };
        proxy.validate()?;
        Ok(proxy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::invalid(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        if !(self.floor_loss >= 0.0) || !(self.initial_loss > self.floor_loss) {
            return Err(Error::invalid(format!(
                "need initial_loss > floor_loss >= 0, got {} and {}",
                self.initial_loss, self.floor_loss
            )));
        }
        Ok(())
    }
}

impl Default for LossProxy {
    fn default() -> Self {
        LossProxy {
            xi: 1.0,
            initial_loss: 2.3,
            floor_loss: 0.0,
        }
    }
}

/// Per-round loss decay xi * sqrt(B).
pub fn loss_decay(proxy: &LossProxy, global_batch: f64) -> Result<f64> {
    if !(global_batch >= 1.0) || !global_batch.is_finite() {
        return Err(Error::invalid(format!(
            "global batch must be at least 1, got {global_batch}"
        )));
    }
    Ok(proxy.xi * global_batch.sqrt())
}

/// Learning rate scaled with the square root of the global batchsize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateRule {
    /// Rate at the reference batchsize.
    pub base_rate: f64,
    /// Batchsize at which `base_rate` applies.
    pub reference_batch: f64,
}

impl Default for LearningRateRule {
    fn default() -> Self {
        LearningRateRule {
            base_rate: 0.1,
            reference_batch: 64.0,
        }
    }
}

impl LearningRateRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.0) || !(self.reference_batch >= 1.0) {
            return Err(Error::invalid(format!(
                "learning-rate rule needs positive base and reference >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// eta(B) = base * sqrt(B / reference).
pub fn learning_rate(rule: &LearningRateRule, global_batch: f64) -> Result<f64> {
    if !(rule.base_rate > 0.0) || !(rule.reference_batch >= 1.0) {
        return Err(Error::invalid(format!(
            "learning-rate rule needs positive base and reference >= 1, got {rule:?}"
        )));
    }
    if !(global_batch >= 1.0) || !global_batch.is_finite() {
        return Err(Error::invalid(format!(
            "global batch must be at least 1, got {global_batch}"
        )));
    }
    Ok(rule.base_rate * (global_batch / rule.reference_batch).sqrt())
}

/// Learning efficiency: loss decay per second of round latency.
pub fn learning_efficiency(delta_loss: f64, round_latency_s: f64) -> Result<f64> {
    if !(round_latency_s > 0.0) || !round_latency_s.is_finite() {
        return Err(Error::invalid(format!(
            "round latency must be positive, got {round_latency_s} s"
        )));
    }
    if !(delta_loss >= 0.0) || !delta_loss.is_finite() {
        return Err(Error::invalid(format!(
            "loss decay must be nonnegative, got {delta_loss}"
        )));
    }
    Ok(delta_loss / round_latency_s)
}

/// Least-squares calibration of xi from observed `(batch, decay)` pairs:
/// minimizes sum over i of (decay_i - xi sqrt(batch_i))^2.
pub fn fit_xi(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to fit xi from"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(batch, decay) in samples {
        if !(batch >= 1.0) || !(decay >= 0.0) {
            return Err(Error::invalid(format!(
                "samples need batch >= 1 and decay >= 0, got ({batch}, {decay})"
            )));
        }
        num += batch.sqrt() * decay;
        den += batch;
    }
    if !(den > 0.0) {
        return Err(Error::invalid("degenerate samples: zero total batch"));
    }
    let xi = num / den;
    if !(xi > 0.0) {
        return Err(Error::invalid(format!(
            "fitted xi must be positive, got {xi}"
        )));
    }
    Ok(xi)
}
