//! Acceptance suite: one test per acceptance criterion, each printing a
//! single `ACCEPTANCE <name>: PASS|FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! Every random sweep draws its parameters from fixed-seed substreams, so
//! the suite is fully deterministic.

use std::time::Instant;

use rand::Rng;

use feel_core::latency::{
    cpu_compute_latency, cpu_update_latency, gpu_compute_latency, gpu_update_latency,
    transmission_latency,
};
use feel_core::loss::loss_decay;
use feel_core::oracle::{grid_search_cpu, grid_search_gpu};
use feel_core::rng::substream;
use feel_core::sim::{self, summarize};
use feel_core::{
    compare_schemes, fit_gpu_profile, preclamp_batch, ChannelParams, ComputeProfile, CpuInstance,
    CpuProfile, GpuFitSample, GpuInstance, GpuProfile, GridSpec, LossProxy, ModelCost,
    RateEstimate, RoundPlan, Scheme, SimulationConfig, SlotPolicy, SystemConfig,
};

fn criterion<F: FnOnce() + std::panic::UnwindSafe>(name: &str, f: F) {
    match std::panic::catch_unwind(f) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(e) => {
            println!("ACCEPTANCE {name}: FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

const SEED: u64 = 0xACCE_97ED;

/// Random CPU instance at realistic scales (frame 10 ms, cap 128).
fn random_cpu(tag: u64, max_k: usize) -> CpuInstance {
    let mut rng = substream(SEED, &[1, tag]);
    let k = rng.random_range(1..=max_k);
    let devices: Vec<CpuProfile> = (0..k)
        .map(|_| CpuProfile::new(rng.random_range(0.5e9..3.0e9)).unwrap())
        .collect();
    let rates: Vec<RateEstimate> = (0..k)
        .map(|_| {
            RateEstimate::new(
                rng.random_range(1.5e7..1.2e8),
                rng.random_range(2.0e7..1.2e8),
            )
            .unwrap()
        })
        .collect();
    CpuInstance::new(devices, rates, ModelCost::default(), 0.010, 0.010, 128).unwrap()
}

/// Random GPU instance; thresholds stay well below the cap.
fn random_gpu(tag: u64, max_k: usize) -> GpuInstance {
    let mut rng = substream(SEED, &[2, tag]);
    let k = rng.random_range(1..=max_k);
    let devices: Vec<GpuProfile> = (0..k)
        .map(|_| {
            GpuProfile::new(
                rng.random_range(0.02..0.2),
                rng.random_range(1e-4..5e-3),
                rng.random_range(0..25) as f64,
                rng.random_range(1e11..1e13),
            )
            .unwrap()
        })
        .collect();
    let rates: Vec<RateEstimate> = (0..k)
        .map(|_| {
            RateEstimate::new(
                rng.random_range(1.5e7..1.2e8),
                rng.random_range(2.0e7..1.2e8),
            )
            .unwrap()
        })
        .collect();
    GpuInstance::new(devices, rates, ModelCost::default(), 0.010, 0.010, 128).unwrap()
}

/// Best efficiency a two-device instance can reach on a quantized slot
/// grid when the batches are already fixed: the uplink and downlink splits
/// are independent, so each is a one-dimensional scan over the grid. A
/// slot of `i` of `levels` grid units carries `payload * levels / (i * R)`
/// seconds of transmission; the frame length cancels.
fn quantized_efficiency_k2(
    compute_s: [f64; 2],
    update_s: [f64; 2],
    up_rates: [f64; 2],
    down_rates: [f64; 2],
    payload_bits: f64,
    levels: u32,
    decay: f64,
) -> f64 {
    let g = levels as f64;
    let best = |fixed: [f64; 2], rates: [f64; 2]| -> f64 {
        (1..levels)
            .map(|i| {
                let a = fixed[0] + payload_bits * g / (i as f64 * rates[0]);
                let b = fixed[1] + payload_bits * g / ((levels - i) as f64 * rates[1]);
                a.max(b)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let up = best(compute_s, up_rates);
    let down = best(update_s, down_rates);
    decay / (up + down)
}

/// Shared body for the two oracle-equivalence criteria: the solver must
/// never lose to the exhaustive grid, and the grid may only trail by slot
/// quantization (verified against the solver's own allocation projected
/// onto the grid).
fn check_against_grid(plan: &RoundPlan, grid_eff: f64, quantized_plan_eff: f64, label: &str) {
    assert!(
        plan.efficiency >= grid_eff * (1.0 - 1e-9),
        "{label}: solver {} below grid {}",
        plan.efficiency,
        grid_eff
    );
    let within_tol = plan.efficiency - grid_eff <= 1e-3 * plan.efficiency;
    let within_step = grid_eff >= quantized_plan_eff * (1.0 - 1e-12);
    assert!(
        within_tol || within_step,
        "{label}: grid {} trails solver {} beyond one grid step ({})",
        grid_eff,
        plan.efficiency,
        quantized_plan_eff
    );
}

#[test]
fn oracle_equivalence_cpu() {
    criterion("oracle_equivalence_cpu", || {
        let started = Instant::now();
        let spec = GridSpec {
            batch_values: (1..=8).collect(),
            slot_levels: 64,
            max_points: 50_000_000,
        };
        let mut worst_gap = 0.0f64;
        for case in 0..20u64 {
            let mut rng = substream(SEED, &[10, case]);
            let devices = vec![
                CpuProfile::new(rng.random_range(0.5e9..3.0e9)).unwrap(),
                CpuProfile::new(rng.random_range(0.5e9..3.0e9)).unwrap(),
            ];
            let rates = vec![
                RateEstimate::new(
                    rng.random_range(1.5e7..1.2e8),
                    rng.random_range(2.0e7..1.2e8),
                )
                .unwrap(),
                RateEstimate::new(
                    rng.random_range(1.5e7..1.2e8),
                    rng.random_range(2.0e7..1.2e8),
                )
                .unwrap(),
            ];
            let inst = CpuInstance::new(
                devices.clone(),
                rates.clone(),
                ModelCost::default(),
                0.010,
                0.010,
                8,
            )
            .unwrap();
            let plan = inst.optimize_round().unwrap();
            let grid = grid_search_cpu(&inst, &spec).unwrap();
            let q_eff = quantized_efficiency_k2(
                [
                    cpu_compute_latency(plan.device_batches[0] as f64, &inst.cost, &devices[0]),
                    cpu_compute_latency(plan.device_batches[1] as f64, &inst.cost, &devices[1]),
                ],
                [
                    cpu_update_latency(&inst.cost, &devices[0]),
                    cpu_update_latency(&inst.cost, &devices[1]),
                ],
                [rates[0].uplink_bps, rates[1].uplink_bps],
                [rates[0].downlink_bps, rates[1].downlink_bps],
                inst.cost.gradient_bits(),
                64,
                inst.cost.loss_coefficient * (plan.global_batch as f64).sqrt(),
            );
            check_against_grid(&plan, grid.efficiency, q_eff, &format!("case {case}"));
            worst_gap = worst_gap.max((plan.efficiency - grid.efficiency) / plan.efficiency);
        }
        let elapsed = started.elapsed();
        println!("  worst solver-vs-grid gap: {worst_gap:.3e}; elapsed {elapsed:.2?}");
        assert!(elapsed.as_secs() < 300, "exceeded the five-minute budget");
    });
}

#[test]
fn oracle_equivalence_gpu() {
    criterion("oracle_equivalence_gpu", || {
        let started = Instant::now();
        let spec = GridSpec {
            batch_values: (1..=8).collect(),
            slot_levels: 64,
            max_points: 50_000_000,
        };
        for case in 0..20u64 {
            let mut rng = substream(SEED, &[11, case]);
            let devices: Vec<GpuProfile> = (0..2)
                .map(|_| {
                    GpuProfile::new(
                        rng.random_range(0.05..0.4),
                        rng.random_range(5e-3..5e-2),
                        rng.random_range(2..=3) as f64,
                        rng.random_range(1e11..1e13),
                    )
                    .unwrap()
                })
                .collect();
            let rates: Vec<RateEstimate> = (0..2)
                .map(|_| {
                    RateEstimate::new(
                        rng.random_range(1.5e7..1.2e8),
                        rng.random_range(2.0e7..1.2e8),
                    )
                    .unwrap()
                })
                .collect();
            let inst = GpuInstance::new(
                devices.clone(),
                rates.clone(),
                ModelCost::default(),
                0.010,
                0.010,
                8,
            )
            .unwrap();
            let plan = inst.optimize_round().unwrap();
            // The solver keeps every device in the linear (compute-bound)
            // region: batches never fall below the threshold.
            for (i, d) in devices.iter().enumerate() {
                assert!(
                    plan.device_batches[i] as f64 >= d.threshold_batch,
                    "case {case}: batch {} under threshold {}",
                    plan.device_batches[i],
                    d.threshold_batch
                );
            }
            let grid = grid_search_gpu(&inst, &spec).unwrap();
            let q_eff = quantized_efficiency_k2(
                [
                    gpu_compute_latency(plan.device_batches[0] as f64, &devices[0], 8.0).unwrap(),
                    gpu_compute_latency(plan.device_batches[1] as f64, &devices[1], 8.0).unwrap(),
                ],
                [
                    gpu_update_latency(&inst.cost, &devices[0]),
                    gpu_update_latency(&inst.cost, &devices[1]),
                ],
                [rates[0].uplink_bps, rates[1].uplink_bps],
                [rates[0].downlink_bps, rates[1].downlink_bps],
                inst.cost.gradient_bits(),
                64,
                inst.cost.loss_coefficient * (plan.global_batch as f64).sqrt(),
            );
            check_against_grid(&plan, grid.efficiency, q_eff, &format!("case {case}"));
        }
        let elapsed = started.elapsed();
        println!("  elapsed {elapsed:.2?}");
        assert!(elapsed.as_secs() < 300, "exceeded the five-minute budget");
    });
}

/// The 1000-instance sweep shared by the certification and containment
/// criteria: alternating CPU and GPU fleets with up to twelve devices.
fn certification_case(case: u64) -> (Option<CpuInstance>, Option<GpuInstance>, u64) {
    let mut rng = substream(SEED, &[3, case]);
    if case.is_multiple_of(2) {
        let inst = random_cpu(case, 12);
        let k = inst.devices.len() as u64;
        let b = rng.random_range(k..=k * 128);
        (Some(inst), None, b)
    } else {
        let inst = random_gpu(case, 12);
        let min_total: u64 = inst
            .devices
            .iter()
            .map(|d| (d.threshold_batch.max(1.0)).ceil() as u64)
            .sum();
        let b = rng.random_range(min_total..=inst.devices.len() as u64 * 128);
        (None, Some(inst), b)
    }
}

fn completion_spread(times: &[f64]) -> f64 {
    let max = times.iter().fold(f64::MIN, |a, &b| a.max(b));
    let min = times.iter().fold(f64::MAX, |a, &b| a.min(b));
    (max - min) / max
}

#[test]
fn kkt_certification_at_scale() {
    criterion("kkt_certification_at_scale", || {
        let mut worst = 0.0f64;
        for case in 0..1000u64 {
            let (cpu, gpu, b) = certification_case(case);
            let (plan, report, s, up_frame, down_frame, compute, update): (
                RoundPlan,
                _,
                f64,
                f64,
                f64,
                Vec<f64>,
                Vec<f64>,
            ) = if let Some(inst) = &cpu {
                let plan = inst.plan_for_batch(b).unwrap();
                let report = inst.kkt_residuals(&plan).unwrap();
                let compute = inst
                    .devices
                    .iter()
                    .zip(&plan.uplink.batches)
                    .map(|(d, &bk)| cpu_compute_latency(bk, &inst.cost, d))
                    .collect();
                let update = inst
                    .devices
                    .iter()
                    .map(|d| cpu_update_latency(&inst.cost, d))
                    .collect();
                (
                    plan,
                    report,
                    inst.cost.gradient_bits(),
                    inst.uplink_frame_s,
                    inst.downlink_frame_s,
                    compute,
                    update,
                )
            } else {
                let inst = gpu.as_ref().unwrap();
                let plan = inst.plan_for_batch(b).unwrap();
                let report = inst.kkt_residuals(&plan).unwrap();
                let cap = inst.max_batch as f64;
                let compute = inst
                    .devices
                    .iter()
                    .zip(&plan.uplink.batches)
                    .map(|(d, &bk)| gpu_compute_latency(bk.min(cap), d, cap).unwrap())
                    .collect();
                let update = inst
                    .devices
                    .iter()
                    .map(|d| gpu_update_latency(&inst.cost, d))
                    .collect();
                (
                    plan,
                    report,
                    inst.cost.gradient_bits(),
                    inst.uplink_frame_s,
                    inst.downlink_frame_s,
                    compute,
                    update,
                )
            };

            assert!(
                report.max_abs_residual < 1e-6,
                "case {case}: stationarity residual {}",
                report.max_abs_residual
            );
            worst = worst.max(report.max_abs_residual);

            // Both subperiods hand out exactly one frame of slots.
            let up_sum: f64 = plan.uplink.slots_s.iter().sum();
            assert!(
                (up_sum - up_frame).abs() <= 1e-9 * up_frame,
                "case {case}: uplink slots sum to {up_sum}"
            );
            let int_sum: f64 = plan.device_slots_s.iter().sum();
            assert!(
                (int_sum - up_frame).abs() <= 1e-9 * up_frame,
                "case {case}: integer-stage slots sum to {int_sum}"
            );
            let down_sum: f64 = plan.downlink.slots_s.iter().sum();
            assert!(
                (down_sum - down_frame).abs() <= 1e-9 * down_frame,
                "case {case}: downlink slots sum to {down_sum}"
            );

            // Every device finishes each subperiod at the same moment.
            let rates = cpu
                .as_ref()
                .map(|i| i.rates.clone())
                .unwrap_or_else(|| gpu.as_ref().unwrap().rates.clone());
            let up_done: Vec<f64> = (0..rates.len())
                .map(|i| {
                    compute[i]
                        + transmission_latency(
                            s,
                            up_frame,
                            plan.uplink.slots_s[i],
                            rates[i].uplink_bps,
                        )
                        .unwrap()
                })
                .collect();
            assert!(
                completion_spread(&up_done) < 1e-6,
                "case {case}: uplink completions spread {:.3e}",
                completion_spread(&up_done)
            );
            let down_done: Vec<f64> = (0..rates.len())
                .map(|i| {
                    transmission_latency(
                        s,
                        down_frame,
                        plan.downlink.slots_s[i],
                        rates[i].downlink_bps,
                    )
                    .unwrap()
                        + update[i]
                })
                .collect();
            assert!(
                completion_spread(&down_done) < 1e-6,
                "case {case}: downlink completions spread {:.3e}",
                completion_spread(&down_done)
            );
        }
        println!("  worst stationarity residual over 1000 cases: {worst:.3e}");
    });
}

#[test]
fn bound_containment() {
    criterion("bound_containment", || {
        let mut interior_cases = 0u32;
        for case in 0..1000u64 {
            let (cpu, gpu, b) = certification_case(case);
            let bf = b as f64;
            let (up, bounds, bracket, min_batches, cap) = if let Some(inst) = &cpu {
                let up = inst.solve_uplink(bf).unwrap();
                let bounds = inst.eu_bounds(bf).unwrap();
                let bracket = inst.mu_bounds(up.eu_star, bf).unwrap();
                (up, bounds, bracket, vec![1.0; inst.devices.len()], 128.0)
            } else {
                let inst = gpu.as_ref().unwrap();
                let up = inst.solve_uplink(bf).unwrap();
                let bounds = inst.eu_bounds(bf).unwrap();
                let bracket = inst.mu_bounds(up.eu_star, bf).unwrap();
                let mins = inst
                    .devices
                    .iter()
                    .map(|d| d.threshold_batch.max(1.0))
                    .collect();
                (up, bounds, bracket, mins, 128.0)
            };
            let any_interior = up
                .batches
                .iter()
                .zip(&min_batches)
                .any(|(&bk, &lo)| bk > lo + 1e-3 && bk < cap - 1e-3);
            if !any_interior {
                continue;
            }
            interior_cases += 1;
            let (elo, ehi) = bounds;
            assert!(
                elo <= up.eu_star * (1.0 + 1e-9) && up.eu_star <= ehi * (1.0 + 1e-9),
                "case {case}: eu {} outside [{elo}, {ehi}]",
                up.eu_star
            );
            assert!(
                !bracket.degenerate,
                "case {case}: interior allocation flagged degenerate"
            );
            let slack = 1e-9 * bracket.upper;
            assert!(
                bracket.lower - slack <= up.mu_star && up.mu_star <= bracket.upper + slack,
                "case {case}: mu {} outside [{}, {}]",
                up.mu_star,
                bracket.lower,
                bracket.upper
            );
        }
        println!("  interior cases checked: {interior_cases} of 1000");
        assert!(
            interior_cases > 300,
            "sweep degenerated; regenerate parameters"
        );
    });
}

#[test]
fn closed_form_exactness_k1() {
    criterion("closed_form_exactness_k1", || {
        let cost = ModelCost::default();
        let s = cost.gradient_bits();
        // CPU device: subperiods and multiplier against the closed forms.
        let inst = CpuInstance::new(
            vec![CpuProfile::new(1.2e9).unwrap()],
            vec![RateEstimate::new(4.5e7, 6.5e7).unwrap()],
            cost,
            0.010,
            0.010,
            128,
        )
        .unwrap();
        for b in [1u64, 13, 64, 128] {
            let bf = b as f64;
            let dl = bf.sqrt();
            let up = inst.solve_uplink(bf).unwrap();
            let y_closed = bf * 1e7 / 1.2e9 + s / 4.5e7;
            assert!(((up.eu_star * dl) - y_closed).abs() <= 1e-9 * y_closed);
            assert!((up.slots_s[0] - 0.010).abs() <= 1e-11);
            // mu = s / (R * frame * decay), from inverting the slot rule.
            // Exact equality holds at interior batches; at the clamped
            // endpoints the multiplier is a half-line and the closed form
            // is its edge.
            let mu_closed = s / (4.5e7 * 0.010 * dl);
            if b == 1 {
                assert!(
                    up.mu_star >= mu_closed * (1.0 - 1e-6),
                    "b={b}: mu {} below edge {mu_closed}",
                    up.mu_star
                );
            } else if b == 128 {
                assert!(
                    up.mu_star <= mu_closed * (1.0 + 1e-6),
                    "b={b}: mu {} above edge {mu_closed}",
                    up.mu_star
                );
            } else {
                assert!(
                    (up.mu_star - mu_closed).abs() <= 1e-9 * mu_closed,
                    "b={b}: mu {} vs {mu_closed}",
                    up.mu_star
                );
            }
            let down = inst.solve_downlink(bf).unwrap();
            let x_closed = 7e8 / 1.2e9 + s / 6.5e7;
            assert!(((down.ed_star * dl) - x_closed).abs() <= 1e-9 * x_closed);

            let plan = inst.plan_for_batch(b).unwrap();
            assert_eq!(plan.device_batches, vec![b]);
            let total_closed = y_closed + x_closed;
            assert!((plan.latency.round_total_s - total_closed).abs() <= 1e-9 * total_closed);
        }
        // The chosen batchsize also has a closed form: with round time
        // alpha*B + beta, efficiency sqrt(B)/(alpha*B + beta) peaks at
        // B = beta/alpha; the integer plan must pick the better neighbor.
        let light = ModelCost {
            param_count: 500_000,
            ..ModelCost::default()
        };
        let s_l = light.gradient_bits();
        let inst = CpuInstance::new(
            vec![CpuProfile::new(0.7e9).unwrap()],
            vec![RateEstimate::new(4.5e7, 6.5e7).unwrap()],
            light,
            0.010,
            0.010,
            128,
        )
        .unwrap();
        let alpha = 1e7 / 0.7e9;
        let beta = s_l / 4.5e7 + 7e8 / 0.7e9 + s_l / 6.5e7;
        let b_star = beta / alpha;
        assert!(b_star > 1.0 && b_star < 128.0, "test instance not interior");
        let eff = |b: f64| light.loss_coefficient * b.sqrt() / (alpha * b + beta);
        let best = if eff(b_star.floor()) >= eff(b_star.ceil()) {
            b_star.floor() as u64
        } else {
            b_star.ceil() as u64
        };
        let plan = inst.optimize_round().unwrap();
        assert_eq!(plan.global_batch, best, "optimal batch vs closed form");
        let eff_closed = eff(best as f64);
        assert!(
            (plan.efficiency - eff_closed).abs() <= 1e-9 * eff_closed,
            "efficiency {} vs closed form {eff_closed}",
            plan.efficiency
        );

        // GPU device in its linear region.
        let gpu = GpuInstance::new(
            vec![GpuProfile::new(0.08, 2e-3, 4.0, 1.5e12).unwrap()],
            vec![RateEstimate::new(4.5e7, 6.5e7).unwrap()],
            ModelCost::default(),
            0.010,
            0.010,
            128,
        )
        .unwrap();
        for b in [4u64, 32, 128] {
            let bf = b as f64;
            let up = gpu.solve_uplink(bf).unwrap();
            let y_closed = 0.08 + 2e-3 * (bf - 4.0) + s / 4.5e7;
            assert!(((up.eu_star * bf.sqrt()) - y_closed).abs() <= 1e-9 * y_closed);
            let down = gpu.solve_downlink(bf).unwrap();
            let x_closed = 7e8 / 1.5e12 + s / 6.5e7;
            assert!(((down.ed_star * bf.sqrt()) - x_closed).abs() <= 1e-9 * x_closed);
        }
    });
}

#[test]
fn structural_equivalence_gpu_cpu() {
    criterion("structural_equivalence_gpu_cpu", || {
        for case in 0..100u64 {
            let cpu = random_cpu(2000 + case, 5);
            let cost = cpu.cost;
            // Degenerate profile: no latency floor, no threshold, slope
            // equal to the per-sample CPU cost, update throughput equal to
            // the CPU frequency (the default cost spends the same count of
            // cycles and flops on the update).
            let gpu = GpuInstance::new(
                cpu.devices
                    .iter()
                    .map(|d| {
                        let slope = cost.cycles_per_sample / d.cpu_freq_hz;
                        GpuProfile::new(0.0, slope, 0.0, d.cpu_freq_hz).unwrap()
                    })
                    .collect(),
                cpu.rates.clone(),
                cost,
                0.010,
                0.010,
                128,
            )
            .unwrap();
            let pc = cpu.optimize_round().unwrap();
            let pg = gpu.optimize_round().unwrap();
            assert_eq!(pc.global_batch, pg.global_batch, "case {case}");
            assert_eq!(pc.device_batches, pg.device_batches, "case {case}");
            for i in 0..cpu.devices.len() {
                let rel =
                    (pc.device_slots_s[i] - pg.device_slots_s[i]).abs() / pc.device_slots_s[i];
                assert!(rel < 1e-6, "case {case} slot {i}: rel {rel}");
                let rel = (pc.uplink.batches[i] - pg.uplink.batches[i]).abs()
                    / pc.uplink.batches[i].max(1.0);
                assert!(rel < 1e-6, "case {case} batch {i}: rel {rel}");
            }
            let rel = (pc.efficiency - pg.efficiency).abs() / pc.efficiency;
            assert!(rel < 1e-6, "case {case} efficiency: rel {rel}");
        }
    });
}

#[test]
fn gpu_fit_round_trip() {
    criterion("gpu_fit_round_trip", || {
        // Noiseless data: exact recovery and plan identity.
        let profiles = [
            GpuProfile::new(0.05, 4e-4, 16.0, 1e12).unwrap(),
            GpuProfile::new(0.12, 2.5e-3, 7.0, 5e11).unwrap(),
            GpuProfile::new(0.02, 1e-3, 1.0, 2e12).unwrap(),
        ];
        let batches = [
            1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0, 96.0, 128.0,
        ];
        for (pi, p) in profiles.iter().enumerate() {
            let samples: Vec<GpuFitSample> = batches
                .iter()
                .map(|&b| GpuFitSample {
                    batch: b,
                    latency_s: p.flat_latency_s
                        + p.slope_s_per_sample * (b - p.threshold_batch).max(0.0),
                })
                .collect();
            let fitted = fit_gpu_profile(&samples, p.gpu_flops).unwrap();
            assert_eq!(
                fitted.threshold_batch, p.threshold_batch,
                "profile {pi}: threshold"
            );
            assert!(
                (fitted.flat_latency_s - p.flat_latency_s).abs() <= 1e-9 * p.flat_latency_s,
                "profile {pi}: flat {} vs {}",
                fitted.flat_latency_s,
                p.flat_latency_s
            );
            assert!(
                (fitted.slope_s_per_sample - p.slope_s_per_sample).abs()
                    <= 1e-9 * p.slope_s_per_sample,
                "profile {pi}: slope"
            );

            // Planning with the fitted profile reproduces the true plan.
            let rates = vec![RateEstimate::new(4.0e7, 6.0e7).unwrap()];
            let with_true = GpuInstance::new(
                vec![*p],
                rates.clone(),
                ModelCost::default(),
                0.010,
                0.010,
                128,
            )
            .unwrap()
            .optimize_round()
            .unwrap();
            let with_fit =
                GpuInstance::new(vec![fitted], rates, ModelCost::default(), 0.010, 0.010, 128)
                    .unwrap()
                    .optimize_round()
                    .unwrap();
            assert_eq!(with_true.global_batch, with_fit.global_batch);
            assert_eq!(with_true.device_batches, with_fit.device_batches);
            let rel = (with_true.efficiency - with_fit.efficiency).abs() / with_true.efficiency;
            assert!(rel < 1e-9, "profile {pi}: efficiency rel {rel}");
        }

        // One percent multiplicative noise: coefficients recovered within
        // five percent, breakpoint within one grid unit, over 100 draws.
        let mut rng = substream(SEED, &[12]);
        for draw in 0..100u64 {
            let truth = GpuProfile::new(
                rng.random_range(0.04..0.15),
                rng.random_range(1.5e-3..6e-3),
                rng.random_range(2..=20) as f64,
                1e12,
            )
            .unwrap();
            let samples: Vec<GpuFitSample> = (1..=96)
                .map(|b| {
                    let clean = truth.flat_latency_s
                        + truth.slope_s_per_sample * (b as f64 - truth.threshold_batch).max(0.0);
                    let noise = 1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0);
                    GpuFitSample {
                        batch: b as f64,
                        latency_s: clean * noise,
                    }
                })
                .collect();
            let fitted = fit_gpu_profile(&samples, truth.gpu_flops).unwrap();
            assert!(
                (fitted.flat_latency_s - truth.flat_latency_s).abs() <= 0.05 * truth.flat_latency_s,
                "draw {draw}: flat {} vs {}",
                fitted.flat_latency_s,
                truth.flat_latency_s
            );
            assert!(
                (fitted.slope_s_per_sample - truth.slope_s_per_sample).abs()
                    <= 0.05 * truth.slope_s_per_sample,
                "draw {draw}: slope {} vs {}",
                fitted.slope_s_per_sample,
                truth.slope_s_per_sample
            );
            assert!(
                (fitted.threshold_batch - truth.threshold_batch).abs() <= 1.0,
                "draw {draw}: threshold {} vs {}",
                fitted.threshold_batch,
                truth.threshold_batch
            );
        }
    });
}

#[test]
fn scheme_dominance() {
    criterion("scheme_dominance", || {
        let started = Instant::now();
        let system = SystemConfig {
            channel: ChannelParams {
                mc_samples: 4_000,
                ..ChannelParams::default()
            },
            ..SystemConfig::default()
        };
        let choices = [
            ComputeProfile::Cpu(CpuProfile::new(0.7e9).unwrap()),
            ComputeProfile::Cpu(CpuProfile::new(1.4e9).unwrap()),
            ComputeProfile::Cpu(CpuProfile::new(2.1e9).unwrap()),
        ];
        let loss = LossProxy::new(0.5, 100.0, 0.0).unwrap();
        let threshold = 50.0; // half the initial loss
        let baselines = [
            Scheme::Online,
            Scheme::FullBatch,
            Scheme::RandomBatch,
            Scheme::EqualAllocation,
        ];
        for seed_idx in 0..20u64 {
            let master = SEED ^ (0x5eed << 8) ^ seed_idx;
            let fleet = sim::generate_fleet(&system, 6, &choices, master).unwrap();
            let mut cfg = SimulationConfig {
                rounds: 60,
                trials: 1,
                master_seed: master,
                scheme: Scheme::Proposed,
                slot_policy: SlotPolicy::Optimal,
                static_channel: false,
                integer_frames: false,
                loss,
                learning_rate: Default::default(),
            };
            let proposed_traces = sim::run(&system, &fleet, &cfg).unwrap();
            let proposed = summarize(&proposed_traces, Some(threshold)).unwrap();
            let t_proposed = proposed
                .time_to_threshold_mean_s
                .unwrap_or_else(|| panic!("seed {seed_idx}: proposed never crossed"));

            let mut summaries = vec![(Scheme::Proposed, proposed)];
            for &scheme in &baselines {
                cfg.scheme = scheme;
                let traces = sim::run(&system, &fleet, &cfg).unwrap();
                // Per-round dominance on the same channel draws, skipping
                // rounds where either trajectory is clipped by the floor.
                for (rp, rb) in proposed_traces[0].rounds.iter().zip(&traces[0].rounds) {
                    if rp.loss > loss.floor_loss && rb.loss > loss.floor_loss {
                        assert!(
                            rp.efficiency >= rb.efficiency * (1.0 - 1e-12),
                            "seed {seed_idx} round {} vs {scheme:?}: {} < {}",
                            rp.round,
                            rp.efficiency,
                            rb.efficiency
                        );
                    }
                }
                let summary = summarize(&traces, Some(threshold)).unwrap();
                if let Some(t) = summary.time_to_threshold_mean_s {
                    assert!(
                        t_proposed <= t * (1.0 + 1e-9),
                        "seed {seed_idx}: proposed {t_proposed} s slower than {scheme:?} {t} s"
                    );
                }
                summaries.push((scheme, summary));
            }
            // Speedups are anchored to the full-batch baseline and the
            // proposed scheme never ranks below 1.
            let table = compare_schemes(&summaries, Scheme::FullBatch, loss.initial_loss).unwrap();
            let by = |s: Scheme| table.iter().find(|c| c.scheme == s).unwrap();
            assert!((by(Scheme::FullBatch).speedup - 1.0).abs() < 1e-12);
            assert!(
                by(Scheme::Proposed).speedup >= 1.0 - 1e-9,
                "seed {seed_idx}: proposed speedup {}",
                by(Scheme::Proposed).speedup
            );
        }
        let elapsed = started.elapsed();
        println!("  elapsed {elapsed:.2?}");
        assert!(elapsed.as_secs() < 600, "exceeded the ten-minute budget");
    });
}

#[test]
fn formula_monotonicity_suite() {
    criterion("formula_monotonicity_suite", || {
        // (a) The pre-clamp batch formula: increasing in training speed,
        // priority share and uplink rate, decreasing in the multiplier.
        let mut rng = substream(SEED, &[7]);
        for case in 0..10_000u64 {
            let y = rng.random_range(0.05..20.0);
            let a = rng.random_range(0.0..0.5) * y;
            let v = rng.random_range(1e7..1e12);
            let rho = rng.random_range(0.01..1.0);
            let rate = rng.random_range(1e6..1e9);
            let payload = rng.random_range(1e6..1e9);
            let frame = rng.random_range(1e-3..1e-1);
            let mu = rng.random_range(1e-6..1e3);
            let base = preclamp_batch(y, a, v, rho, rate, payload, frame, mu);
            assert!(
                preclamp_batch(y, a, v, rho * 1.05, rate, payload, frame, mu) >= base,
                "case {case}: not increasing in the priority share"
            );
            assert!(
                preclamp_batch(y, a, v, rho, rate * 1.05, payload, frame, mu) >= base,
                "case {case}: not increasing in the rate"
            );
            assert!(
                preclamp_batch(y, a, v, rho, rate, payload, frame, mu * 1.05) <= base,
                "case {case}: not decreasing in the multiplier"
            );
            // Speed scales a positive budget up and a deficit down.
            if base > 0.0 {
                assert!(
                    preclamp_batch(y, a, v * 1.05, rho, rate, payload, frame, mu) >= base,
                    "case {case}: not increasing in speed"
                );
            }
        }

        // (b) Loss decay is concave in the batch total.
        let mut rng = substream(SEED, &[8]);
        for case in 0..10_000u64 {
            let proxy = LossProxy::new(rng.random_range(0.01..10.0), 100.0, 0.0).unwrap();
            let b1 = rng.random_range(1.0..1e6);
            let b2 = rng.random_range(1.0..1e6);
            let mid = 0.5 * (b1 + b2);
            let lhs = loss_decay(&proxy, mid).unwrap();
            let rhs = 0.5 * (loss_decay(&proxy, b1).unwrap() + loss_decay(&proxy, b2).unwrap());
            assert!(
                lhs >= rhs * (1.0 - 1e-12),
                "case {case}: midpoint concavity violated"
            );
        }

        // (c) Average rates: increasing in transmit power, decreasing in
        // distance, on identical fading draws.
        let params = ChannelParams {
            mc_samples: 2_000,
            ..ChannelParams::default()
        };
        let mut rng = substream(SEED, &[9]);
        for case in 0..300u64 {
            let p = rng.random_range(5.0..35.0);
            let d = rng.random_range(0.01..0.2);
            let tags = [42, case];
            let base = params.average_rate_stream(p, d, &tags).unwrap();
            let hotter = params.average_rate_stream(p + 1.0, d, &tags).unwrap();
            let farther = params.average_rate_stream(p, d * 1.1, &tags).unwrap();
            assert!(hotter > base, "case {case}: rate not increasing in power");
            assert!(
                farther < base,
                "case {case}: rate not decreasing in distance"
            );
        }

        // (d) Solver-level ordering laws on random instances.
        let mut rng = substream(SEED, &[13]);
        for case in 0..50u64 {
            let k = rng.random_range(2..=6);
            let mut freqs: Vec<f64> = (0..k).map(|_| rng.random_range(0.5e9..3.0e9)).collect();
            freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rate = RateEstimate::new(
                rng.random_range(2.0e7..9.0e7),
                rng.random_range(3.0e7..9.0e7),
            )
            .unwrap();
            let inst = CpuInstance::new(
                freqs.iter().map(|&f| CpuProfile::new(f).unwrap()).collect(),
                vec![rate; k],
                ModelCost::default(),
                0.010,
                0.010,
                128,
            )
            .unwrap();
            let b = rng.random_range(k as u64..=k as u64 * 128) as f64;
            let up = inst.solve_uplink(b).unwrap();
            let interior = |x: f64| x > 1.0 + 1e-6 && x < 128.0 - 1e-6;
            for i in 1..k {
                assert!(
                    up.batches[i] >= up.batches[i - 1] - 1e-9,
                    "case {case}: batches not ordered by speed"
                );
                // Slot ordering by speed is an interior-regime law: a slow
                // device pinned at the minimum batch still finishes compute
                // late and needs a large slot, so it is not asserted across
                // clamped devices.
                if interior(up.batches[i]) && interior(up.batches[i - 1]) {
                    assert!(
                        up.slots_s[i] >= up.slots_s[i - 1] - 1e-12,
                        "case {case}: interior slots not ordered by speed"
                    );
                }
                assert!(up.priority_ratio[i] >= up.priority_ratio[i - 1]);
            }
            // Devices pinned low form a prefix and devices pinned high a
            // suffix of the speed ordering.
            let first_above = up.batches.iter().position(|&x| x > 1.0 + 1e-6);
            if let Some(p) = first_above {
                assert!(
                    up.batches[..p].iter().all(|&x| x <= 1.0 + 1e-6),
                    "case {case}: low-pinned devices not a prefix"
                );
            }
            let last_below = up.batches.iter().rposition(|&x| x < 128.0 - 1e-6);
            if let Some(p) = last_below {
                assert!(
                    up.batches[p + 1..].iter().all(|&x| x >= 128.0 - 1e-6),
                    "case {case}: high-pinned devices not a suffix"
                );
            }
        }
        for case in 0..50u64 {
            let k = rng.random_range(2..=6);
            let freq = rng.random_range(0.5e9..3.0e9);
            let mut ups: Vec<f64> = (0..k).map(|_| rng.random_range(2.0e7..9.0e7)).collect();
            ups.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let inst = CpuInstance::new(
                vec![CpuProfile::new(freq).unwrap(); k],
                ups.iter()
                    .map(|&u| RateEstimate::new(u, 5.0e7).unwrap())
                    .collect(),
                ModelCost::default(),
                0.010,
                0.010,
                128,
            )
            .unwrap();
            let b = rng.random_range(k as u64..=k as u64 * 128) as f64;
            let up = inst.solve_uplink(b).unwrap();
            for i in 1..k {
                assert!(
                    up.batches[i] >= up.batches[i - 1] - 1e-9,
                    "case {case}: batches not ordered by rate"
                );
                assert!(
                    up.slots_s[i] <= up.slots_s[i - 1] + 1e-12,
                    "case {case}: slots not anti-ordered by rate"
                );
            }
        }

        // (e) Strict interior ordering on a hand-tuned light instance.
        let light = ModelCost {
            param_count: 500_000,
            ..ModelCost::default()
        };
        let inst = CpuInstance::new(
            vec![
                CpuProfile::new(0.7e9).unwrap(),
                CpuProfile::new(1.4e9).unwrap(),
                CpuProfile::new(2.1e9).unwrap(),
            ],
            vec![RateEstimate::new(5e7, 5e7).unwrap(); 3],
            light,
            0.010,
            0.010,
            128,
        )
        .unwrap();
        let up = inst.solve_uplink(185.0).unwrap();
        for &b in &up.batches {
            assert!(
                b > 1.0 + 1e-6 && b < 128.0 - 1e-6,
                "expected interior, got {b}"
            );
        }
        assert!(up.batches[0] < up.batches[1] && up.batches[1] < up.batches[2]);
        assert!(up.slots_s[0] < up.slots_s[1] && up.slots_s[1] < up.slots_s[2]);

        // (f) The uplink subperiod grows with the global batch; the
        // downlink slot split does not depend on it.
        let inst = random_cpu(4000, 4);
        let k = inst.devices.len() as u64;
        let mut prev_y = 0.0;
        let mut prev_slots: Option<Vec<f64>> = None;
        for b in [k, k * 16, k * 48, k * 96, k * 128] {
            let bf = b as f64;
            let up = inst.solve_uplink(bf).unwrap();
            let y = up.eu_star * bf.sqrt();
            assert!(y > prev_y, "subperiod must grow with the batch");
            prev_y = y;
            let down = inst.solve_downlink(bf).unwrap();
            if let Some(prev) = &prev_slots {
                assert_eq!(prev, &down.slots_s);
            }
            prev_slots = Some(down.slots_s);
        }

        // (g) GPU compute latency is flat then strictly increasing.
        let gp = GpuProfile::new(0.05, 4e-4, 16.0, 1e12).unwrap();
        let mut prev = 0.0;
        for b in 1..=64u64 {
            let t = gpu_compute_latency(b as f64, &gp, 64.0).unwrap();
            if b as f64 <= gp.threshold_batch {
                assert_eq!(t, gp.flat_latency_s);
            } else {
                assert!(t > prev);
            }
            prev = t;
        }
    });
}
