//! Numerical engine for round planning.
//!
//! The uplink subproblem is solved by a two-level bisection: an outer search
//! on the uplink subperiod length `y` (seconds) whose slot total decreases in
//! `y`, and an inner search on the batch multiplier `nu` whose batch total
//! decreases in `nu`. Both monotone directions are checked at the bracket
//! endpoints and violations raise a numerical-failure error instead of being
//! papered over.
//!
//! Internally the solver works on "lanes": one affine compute model per
//! device, latency = offset + batch / speed on [min_batch, max_batch]. CPU
//! devices have a zero offset; GPU devices in their compute-bound region map
//! onto nonzero offsets, so the same engine serves both.

use crate::error::{Error, Result};
use crate::optimizer::Tolerances;

pub(crate) const MAX_BISECT_ITERS: usize = 200;

/// Affine uplink view of the fleet.
#[derive(Debug, Clone)]
pub(crate) struct Lanes {
    /// V_k: samples per second of local training.
    pub speed: Vec<f64>,
    /// a_k: constant part of the compute latency, seconds.
    pub offset_s: Vec<f64>,
    /// L_k: smallest admissible batchsize.
    pub min_batch: Vec<f64>,
    /// rho_k = V_k / sum_j V_j: training priority ratio.
    pub rho: Vec<f64>,
    /// Uplink rate R_k in bit/s.
    pub rate_bps: Vec<f64>,
    /// Shared batchsize cap.
    pub max_batch: f64,
    /// Gradient payload s in bits.
    pub payload_bits: f64,
    /// Uplink frame length T_f in seconds.
    pub frame_s: f64,
}

/// Continuous uplink optimum for a fixed global batch.
#[derive(Debug, Clone)]
pub(crate) struct UplinkSolution {
    /// Realized subperiod length: max_k (compute + upload), seconds.
    pub y: f64,
    /// Inner multiplier at the optimum (scaled form).
    pub nu: f64,
    pub batches: Vec<f64>,
    pub slots: Vec<f64>,
}

impl Lanes {
    pub fn new(
        speed: Vec<f64>,
        offset_s: Vec<f64>,
        min_batch: Vec<f64>,
        rate_bps: Vec<f64>,
        max_batch: f64,
        payload_bits: f64,
        frame_s: f64,
    ) -> Result<Self> {
        let k = speed.len();
        if k == 0 {
            return Err(Error::invalid("no devices"));
        }
        if offset_s.len() != k || min_batch.len() != k || rate_bps.len() != k {
            return Err(Error::invalid("per-device vectors disagree in length"));
        }
        if !(max_batch >= 1.0) || !(payload_bits > 0.0) || !(frame_s > 0.0) {
            return Err(Error::invalid(
                "max_batch, payload and frame must be positive",
            ));
        }
        let mut sum_v = 0.0;
        for i in 0..k {
            if !(speed[i] > 0.0) || !speed[i].is_finite() {
                return Err(Error::invalid(format!(
                    "device {i}: training speed must be positive, got {}",
                    speed[i]
                )));
            }
            if !(rate_bps[i] > 0.0) || !rate_bps[i].is_finite() {
                return Err(Error::invalid(format!(
                    "device {i}: uplink rate must be positive, got {}",
                    rate_bps[i]
                )));
            }
            if !(min_batch[i] >= 1.0) || min_batch[i] > max_batch {
                return Err(Error::invalid(format!(
                    "device {i}: min batch {} outside [1, {max_batch}]",
                    min_batch[i]
                )));
            }
            // Compute latency at the smallest batch must be positive.
            if !(offset_s[i] + min_batch[i] / speed[i] > 0.0) {
                return Err(Error::invalid(format!(
                    "device {i}: nonpositive compute latency at min batch"
                )));
            }
            sum_v += speed[i];
        }
        let rho = speed.iter().map(|v| v / sum_v).collect();
        Ok(Lanes {
            speed,
            offset_s,
            min_batch,
            rho,
            rate_bps,
            max_batch,
            payload_bits,
            frame_s,
        })
    }

    pub fn k(&self) -> usize {
        self.speed.len()
    }

    pub fn min_total(&self) -> f64 {
        self.min_batch.iter().sum()
    }

    pub fn max_total(&self) -> f64 {
        self.max_batch * self.k() as f64
    }

    /// Affine compute latency of lane `i` at batchsize `b`.
    pub fn compute_s(&self, i: usize, b: f64) -> f64 {
        self.offset_s[i] + b / self.speed[i]
    }

    /// Candidate upload latency of an unclamped lane at multiplier `nu`.
    fn upload_candidate(&self, i: usize, nu: f64) -> f64 {
        (self.payload_bits * self.frame_s * nu / (self.rho[i] * self.rate_bps[i])).sqrt()
    }

    /// Closed-form batchsize of lane `i` at `(y, nu)`, clamped to its range.
    pub fn batch_at(&self, i: usize, y: f64, nu: f64) -> f64 {
        let pre = (y - self.offset_s[i] - self.upload_candidate(i, nu)) * self.speed[i];
        pre.clamp(self.min_batch[i], self.max_batch)
    }

    fn sum_batches(&self, y: f64, nu: f64) -> f64 {
        (0..self.k()).map(|i| self.batch_at(i, y, nu)).sum()
    }

    /// Multiplier beyond which every lane is clamped to its min batch.
    fn nu_all_min(&self, y: f64) -> f64 {
        (0..self.k())
            .map(|i| {
                let room = (y - self.compute_s(i, self.min_batch[i])).max(0.0);
                self.rho[i] * self.rate_bps[i] * room * room / (self.payload_bits * self.frame_s)
            })
            .fold(0.0, f64::max)
    }

    /// Inner bisection: the `nu >= 0` with batch total equal to `b`, or
    /// `None` when `y` is too small to host `b` samples.
    fn solve_nu(&self, y: f64, b: f64) -> Option<f64> {
        let widest = self.sum_batches(y, 0.0);
        if widest < b {
            return None;
        }
        if widest == b {
            return Some(0.0);
        }
        let mut lo = 0.0f64;
        let mut hi = self.nu_all_min(y) * (1.0 + 1e-9) + 1e-300;
        // Invariant: sum(lo) >= b >= min_total >= sum at forcing point.
        for _ in 0..MAX_BISECT_ITERS {
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.sum_batches(y, mid) >= b {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Slot lengths at `(y, nu)`; `None` when some lane has no positive
    /// upload budget (i.e. `y` is too small).
    fn slots_at(&self, y: f64, nu: f64) -> Option<(Vec<f64>, f64)> {
        let mut slots = Vec::with_capacity(self.k());
        let mut sum = 0.0;
        for i in 0..self.k() {
            let b = self.batch_at(i, y, nu);
            let budget = y - self.compute_s(i, b);
            if !(budget > 0.0) {
                return None;
            }
            let slot = self.payload_bits * self.frame_s / (self.rate_bps[i] * budget);
            sum += slot;
            slots.push(slot);
        }
        Some((slots, sum))
    }

    /// Analytic bracket for the subperiod length `y` at global batch `b`:
    /// lower bound from the bound-relaxed stationarity system, upper bound
    /// from the equal-split feasible point.
    pub fn y_bounds(&self, b: f64) -> (f64, f64) {
        let k = self.k();
        let kf = k as f64;
        let sum_v: f64 = self.speed.iter().sum();
        let sum_va: f64 = (0..k).map(|i| self.speed[i] * self.offset_s[i]).sum();
        let sum_sqrt: f64 = (0..k)
            .map(|i| (self.rho[i] / self.rate_bps[i]).sqrt())
            .sum();
        let y_lo = (b + sum_va) / sum_v + self.payload_bits * sum_sqrt * sum_sqrt;

        let span: f64 = (0..k).map(|i| self.max_batch - self.min_batch[i]).sum();
        let spare = b - self.min_total();
        let y_hi = (0..k)
            .map(|i| {
                let fill = if span > 0.0 {
                    spare * (self.max_batch - self.min_batch[i]) / span
                } else {
                    0.0
                };
                let beq = self.min_batch[i] + fill;
                self.compute_s(i, beq) + kf * self.payload_bits / self.rate_bps[i]
            })
            .fold(f64::NEG_INFINITY, f64::max);
        (y_lo, y_hi.max(y_lo))
    }

    /// Scaled-multiplier bracket at subperiod `y`: raw closed-form bounds
    /// obtained by inverting the batch formula at the two clamp levels.
    pub fn nu_bounds(&self, y: f64) -> (f64, f64) {
        let st = self.payload_bits * self.frame_s;
        let lower = (0..self.k())
            .map(|i| {
                let d = y - self.compute_s(i, self.max_batch);
                self.rho[i] * self.rate_bps[i] * d * d / st
            })
            .fold(f64::INFINITY, f64::min);
        let upper = (0..self.k())
            .map(|i| {
                let d = y - self.compute_s(i, self.min_batch[i]);
                self.rho[i] * self.rate_bps[i] * d * d / st
            })
            .fold(0.0, f64::max);
        (lower, upper)
    }

    /// Solve the fixed-batch uplink subproblem: batches `b` (continuous),
    /// slots chosen so every lane finishes at the same subperiod length and
    /// the slot total fills the frame.
    pub fn solve(&self, b: f64, tol: &Tolerances) -> Result<UplinkSolution> {
        let min_t = self.min_total();
        let max_t = self.max_total();
        if b < min_t - tol.batch || b > max_t + tol.batch {
            return Err(Error::infeasible(format!(
                "global batch {b} outside feasible range [{min_t}, {max_t}]"
            )));
        }
        let b = b.clamp(min_t, max_t);
        let (y_lo, y_hi) = self.y_bounds(b);

        // residual(y) = slot total - frame; `None` means y is too small,
        // which the outer search treats as an overfull frame.
        let residual = |y: f64| -> Option<f64> {
            let nu = self.solve_nu(y, b)?;
            let (_slots, sum) = self.slots_at(y, nu)?;
            Some(sum - self.frame_s)
        };

        let slack = tol.time_s.max(1e-9 * self.frame_s);
        match residual(y_hi) {
            Some(g) if g <= slack => {}
            other => {
                return Err(Error::numerical(
                    "uplink subperiod bracket",
                    format!(
                        "slot total at upper bound y={y_hi} is {:?} (frame {}); \
                         expected at most the frame",
                        other.map(|g| g + self.frame_s),
                        self.frame_s
                    ),
                ));
            }
        }
        if y_hi - y_lo > 1e-12 * y_hi {
            if let Some(g) = residual(y_lo) {
                if g < -slack {
                    return Err(Error::numerical(
                        "uplink subperiod bracket",
                        format!(
                            "slot total at lower bound y={y_lo} is {} under the frame {}; \
                             monotone direction violated",
                            -g, self.frame_s
                        ),
                    ));
                }
            }
        }

        let mut lo = y_lo;
        let mut hi = y_hi;
        for _ in 0..MAX_BISECT_ITERS {
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            match residual(mid) {
                Some(g) if g <= 0.0 => hi = mid,
                _ => lo = mid,
            }
        }

        let y = hi;
        let nu = self.solve_nu(y, b).ok_or_else(|| {
            Error::numerical(
                "uplink subperiod solve",
                format!("converged y={y} lost feasibility for batch {b}"),
            )
        })?;
        let batches: Vec<f64> = (0..self.k()).map(|i| self.batch_at(i, y, nu)).collect();
        let (mut slots, sum_slots) = self.slots_at(y, nu).ok_or_else(|| {
            Error::numerical(
                "uplink subperiod solve",
                format!("no positive upload budget at converged y={y}"),
            )
        })?;

        let time_res = (sum_slots - self.frame_s).abs();
        if time_res > tol.time_s.max(1e-12 * self.frame_s) {
            return Err(Error::numerical(
                "uplink time-sharing residual",
                format!("|slot total - frame| = {time_res} exceeds {}", tol.time_s),
            ));
        }
        let sum_b: f64 = batches.iter().sum();
        if (sum_b - b).abs() > tol.batch {
            return Err(Error::numerical(
                "uplink batch residual",
                format!(
                    "|batch total - {b}| = {} exceeds {}",
                    (sum_b - b).abs(),
                    tol.batch
                ),
            ));
        }

        // Make the slot total exactly fill the frame, then report the
        // realized subperiod.
        let scale = self.frame_s / sum_slots;
        for s in slots.iter_mut() {
            *s *= scale;
        }
        let y_real = self.realized_subperiod(&batches, &slots);
        Ok(UplinkSolution {
            y: y_real,
            nu,
            batches,
            slots,
        })
    }

    /// max_k (compute + upload) for explicit batches and slots.
    pub fn realized_subperiod(&self, batches: &[f64], slots: &[f64]) -> f64 {
        (0..self.k())
            .map(|i| {
                self.compute_s(i, batches[i])
                    + self.payload_bits * self.frame_s / (slots[i] * self.rate_bps[i])
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Slot allocation that equalizes `fixed latency + transmission latency`
/// across lanes while the slot total fills the frame. Returns the common
/// completion time and the slots.
///
/// This one-dimensional solve covers the downlink (fixed latency = update
/// step) and any fixed-batch uplink (fixed latency = compute time).
pub(crate) fn equalizing_slots(
    fixed_s: &[f64],
    rates_bps: &[f64],
    payload_bits: f64,
    frame_s: f64,
    tol: &Tolerances,
    context: &str,
) -> Result<(f64, Vec<f64>)> {
    let k = fixed_s.len();
    if k == 0 {
        return Err(Error::invalid("no devices"));
    }
    if rates_bps.len() != k {
        return Err(Error::invalid("rates and latencies disagree in length"));
    }
    if !(payload_bits > 0.0) || !(frame_s > 0.0) {
        return Err(Error::invalid("payload and frame must be positive"));
    }
    for i in 0..k {
        if !(fixed_s[i] >= 0.0) || !fixed_s[i].is_finite() {
            return Err(Error::invalid(format!(
                "lane {i}: fixed latency must be nonnegative, got {}",
                fixed_s[i]
            )));
        }
        if !(rates_bps[i] > 0.0) || !rates_bps[i].is_finite() {
            return Err(Error::invalid(format!(
                "lane {i}: rate must be positive, got {}",
                rates_bps[i]
            )));
        }
    }

    let kf = k as f64;
    let base = fixed_s.iter().fold(0.0f64, |m, &v| m.max(v));
    // Equal slots are feasible, so their completion time brackets from above.
    let mut hi = (0..k)
        .map(|i| fixed_s[i] + kf * payload_bits / rates_bps[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum_at = |x: f64| -> f64 {
        (0..k)
            .map(|i| payload_bits * frame_s / (rates_bps[i] * (x - fixed_s[i])))
            .sum()
    };
    let mut expand = 0;
    while sum_at(hi) > frame_s {
        hi = base + 2.0 * (hi - base);
        expand += 1;
        if expand > 64 {
            return Err(Error::numerical(
                context.to_string(),
                format!("completion-time bracket failed to close below the frame at x={hi}"),
            ));
        }
    }
    let mut lo = base + (hi - base) * 1e-12;
    if sum_at(lo) < frame_s {
        // Already under the frame arbitrarily close to the base: the root is
        // pinned against the slowest fixed latency.
        hi = lo;
        lo = base;
    }
    for _ in 0..MAX_BISECT_ITERS {
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) > frame_s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = hi;
    let mut slots: Vec<f64> = (0..k)
        .map(|i| payload_bits * frame_s / (rates_bps[i] * (x - fixed_s[i])))
        .collect();
    let sum: f64 = slots.iter().sum();
    let res = (sum - frame_s).abs();
    if res > tol.time_s.max(1e-12 * frame_s) {
        return Err(Error::numerical(
            context.to_string(),
            format!("|slot total - frame| = {res} exceeds {}", tol.time_s),
        ));
    }
    let scale = frame_s / sum;
    for s in slots.iter_mut() {
        *s *= scale;
    }
    let x_real = (0..k)
        .map(|i| fixed_s[i] + payload_bits * frame_s / (rates_bps[i] * slots[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((x_real, slots))
}

/// Round the continuous batch split up to integers, then walk the total back
/// down to the target by decrementing the largest rounding gains first
/// (ties broken by device index).
pub(crate) fn integerize_batches(
    cont: &[f64],
    min_batch: &[f64],
    max_batch: f64,
    target: u64,
) -> Vec<u64> {
    let k = cont.len();
    let mins: Vec<u64> = min_batch.iter().map(|l| l.ceil() as u64).collect();
    let cap = max_batch.floor() as u64;
    let mut ints: Vec<u64> = (0..k)
        .map(|i| {
            let up = (cont[i] - 1e-9).ceil().max(mins[i] as f64).min(cap as f64);
            up as u64
        })
        .collect();
    let total: u64 = ints.iter().sum();
    let mut excess = total.saturating_sub(target);
    if excess > 0 {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let ga = ints[a] as f64 - cont[a];
            let gb = ints[b] as f64 - cont[b];
            gb.partial_cmp(&ga).unwrap().then(a.cmp(&b))
        });
        while excess > 0 {
            let mut progressed = false;
            for &i in &order {
                if excess == 0 {
                    break;
                }
                if ints[i] > mins[i] {
                    ints[i] -= 1;
                    excess -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }
    debug_assert_eq!(ints.iter().sum::<u64>(), target);
    ints
}

/// Greedy single-unit rebalancing of an integer split: move one sample
/// between lanes while doing so shortens the equalized subperiod.
pub(crate) fn refine_split(
    lanes: &Lanes,
    ints: &mut [u64],
    tol: &Tolerances,
) -> Result<(f64, Vec<f64>)> {
    let eval = |ints: &[u64]| -> Result<(f64, Vec<f64>)> {
        let fixed: Vec<f64> = (0..lanes.k())
            .map(|i| lanes.compute_s(i, ints[i] as f64))
            .collect();
        equalizing_slots(
            &fixed,
            &lanes.rate_bps,
            lanes.payload_bits,
            lanes.frame_s,
            tol,
            "fixed-batch uplink slots",
        )
    };
    let mins: Vec<u64> = lanes.min_batch.iter().map(|l| l.ceil() as u64).collect();
    let cap = lanes.max_batch.floor() as u64;
    let (mut best_y, mut best_slots) = eval(ints)?;
    let mut moves = 0;
    'outer: loop {
        for from in 0..ints.len() {
            for to in 0..ints.len() {
                if from == to || ints[from] <= mins[from] || ints[to] >= cap {
                    continue;
                }
                ints[from] -= 1;
                ints[to] += 1;
                let (y, slots) = eval(ints)?;
                if y < best_y * (1.0 - 1e-14) {
                    best_y = y;
                    best_slots = slots;
                    moves += 1;
                    if moves > 8 * ints.len() * ints.len() {
                        break 'outer;
                    }
                    continue 'outer;
                }
                ints[from] += 1;
                ints[to] -= 1;
            }
        }
        break;
    }
    Ok((best_y, best_slots))
}

/// Best integer global batch for the given lanes and a fixed downlink
/// subperiod, plus everything needed to assemble the round plan.
#[derive(Debug, Clone)]
pub(crate) struct OuterSolution {
    pub global_batch: u64,
    pub cont: UplinkSolution,
    pub ints: Vec<u64>,
    pub int_slots: Vec<f64>,
    /// Equalized subperiod of the integerized allocation.
    pub y_int: f64,
}

/// Evaluate one candidate global batch: continuous solve, integer repair,
/// fixed-batch slot solve.
fn eval_candidate(lanes: &Lanes, b: u64, tol: &Tolerances) -> Result<OuterSolution> {
    let cont = lanes.solve(b as f64, tol)?;
    let ints = integerize_batches(&cont.batches, &lanes.min_batch, lanes.max_batch, b);
    let fixed: Vec<f64> = (0..lanes.k())
        .map(|i| lanes.compute_s(i, ints[i] as f64))
        .collect();
    let (y_int, int_slots) = equalizing_slots(
        &fixed,
        &lanes.rate_bps,
        lanes.payload_bits,
        lanes.frame_s,
        tol,
        "fixed-batch uplink slots",
    )?;
    Ok(OuterSolution {
        global_batch: b,
        cont,
        ints,
        int_slots,
        y_int,
    })
}

/// Search the integer global-batch range for the best learning efficiency
/// `sqrt(B) / (uplink subperiod + down_x)`.
///
/// Small ranges are scanned exhaustively; large ones use golden-section on
/// the continuous relaxation plus an integer neighborhood and the endpoints
/// as a safeguard.
pub(crate) fn optimize_lanes(
    lanes: &Lanes,
    down_x: f64,
    tol: &Tolerances,
    forced_batch: Option<u64>,
) -> Result<OuterSolution> {
    let b_min = lanes.min_total().ceil() as u64;
    let b_max = (lanes.max_batch.floor() as u64) * lanes.k() as u64;
    if b_min > b_max {
        return Err(Error::infeasible(format!(
            "min-batch total {b_min} exceeds capacity {b_max}"
        )));
    }

    let score = |sol: &OuterSolution| (sol.global_batch as f64).sqrt() / (sol.y_int + down_x);

    if let Some(b) = forced_batch {
        if b < b_min || b > b_max {
            return Err(Error::infeasible(format!(
                "global batch {b} outside feasible range [{b_min}, {b_max}]"
            )));
        }
        let mut sol = eval_candidate(lanes, b, tol)?;
        let (y, slots) = refine_split(lanes, &mut sol.ints, tol)?;
        sol.y_int = y;
        sol.int_slots = slots;
        return Ok(sol);
    }

    let exhaustive = b_max <= 4096;
    let candidates: Vec<u64> = if exhaustive {
        (b_min..=b_max).collect()
    } else {
        // Golden-section on the continuous relaxation.
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let cont_score = |b: f64| -> Result<f64> {
            let sol = lanes.solve(b, tol)?;
            Ok(b.sqrt() / (sol.y + down_x))
        };
        let (mut a, mut d) = (b_min as f64, b_max as f64);
        let mut b1 = d - phi * (d - a);
        let mut b2 = a + phi * (d - a);
        let mut f1 = cont_score(b1)?;
        let mut f2 = cont_score(b2)?;
        for _ in 0..64 {
            if d - a < 0.5 {
                break;
            }
            if f1 < f2 {
                a = b1;
                b1 = b2;
                f1 = f2;
                b2 = a + phi * (d - a);
                f2 = cont_score(b2)?;
            } else {
                d = b2;
                b2 = b1;
                f2 = f1;
                b1 = d - phi * (d - a);
                f1 = cont_score(b1)?;
            }
        }
        let center = 0.5 * (a + d);
        let radius = (lanes.k() as u64).max(4);
        let lo = (center.floor() as u64).saturating_sub(radius).max(b_min);
        let hi = (center.ceil() as u64 + radius).min(b_max);
        let mut c: Vec<u64> = (lo..=hi).collect();
        if !c.contains(&b_min) {
            c.insert(0, b_min);
        }
        if !c.contains(&b_max) {
            c.push(b_max);
        }
        c
    };

    let mut best: Option<OuterSolution> = None;
    for b in candidates {
        let sol = eval_candidate(lanes, b, tol)?;
        let better = match &best {
            None => true,
            Some(cur) => score(&sol) > score(cur),
        };
        if better {
            best = Some(sol);
        }
    }
    let mut sol = best.expect("candidate range is never empty");
    let (y, slots) = refine_split(lanes, &mut sol.ints, tol)?;
    sol.y_int = y;
    sol.int_slots = slots;
    Ok(sol)
}
