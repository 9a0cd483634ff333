//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use numax_core::power::{brute_force_oracle, kkt_allocate, waterfill, AllocationProblem, Carrier};
use numax_core::sim::{
    run_scenario, simulation_csv, sweep_audited, sweep_csv, Audit, ScenarioConfig, SweepRow,
};
use numax_core::traffic::{ServiceClass, TrafficModel, TrafficParams, TrafficSession};
use numax_core::utility::{
    criterion_check, fit_polynomial_utility, make_utility, CaseParams, UtilityError, UtilityModel,
    UtilitySpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IDENTITY_TOL: f64 = 1e-8;
const CONCAVITY_TOL: f64 = 1e-8;
const WATERFILL_TOL: f64 = 1e-6;
const ORACLE_SLACK: f64 = 1e-4;
const ORACLE_STEP: f64 = 1e-3;
const ROUND_TRIP_TOL: f64 = 1e-9;
const POWER_SLACK: f64 = 1e-9;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1} s (limit {limit_s} s)"))
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `t(x)` of each closed-form case, written independently of the library.
fn slack_by_hand(case: &CaseParams, x: f64) -> f64 {
    match *case {
        CaseParams::Power { a, k } => a * x.powi(k as i32),
        CaseParams::Polynomial { ref coeffs } => coeffs
            .iter()
            .enumerate()
            .map(|(n, c)| c * x.powi(n as i32))
            .sum(),
        CaseParams::Exponential { a } => (a * x).exp(),
        CaseParams::ExponentialUnit => x.exp(),
        CaseParams::ProportionalFairness {
            weight,
            slope,
            intercept,
            ..
        } => {
            let u = slope * x + intercept;
            weight * slope / u + (weight * slope / u) * (slope / u)
        }
        CaseParams::Sigmoid { x0 } => {
            let s = logistic(x - x0);
            2.0 * s * s * (1.0 - s)
        }
        CaseParams::Linear { a } => a,
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn exponent(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..3) {
        0 => uniform(rng, -2.0, -0.05),
        1 => uniform(rng, 0.05, 0.95),
        _ => uniform(rng, 1.05, 1.3),
    }
}

/// 100 random specs of each of the five cases; the exponential case mixes in its unit branch.
fn random_specs(rng: &mut ChaCha8Rng, per_case: usize) -> Vec<UtilitySpec> {
    let mut out = Vec::new();
    for case in 1..=5 {
        for i in 0..per_case {
            let (c1, c2) = (uniform(rng, -1.0, 1.0), uniform(rng, -5.0, 5.0));
            let params = match case {
                1 => CaseParams::Power {
                    a: uniform(rng, 0.0, 2.0),
                    k: rng.random_range(0..=4),
                },
                2 => CaseParams::Polynomial {
                    coeffs: (0..rng.random_range(1..=5))
                        .map(|_| uniform(rng, 0.0, 2.0))
                        .collect(),
                },
                3 if i % 10 == 0 => CaseParams::ExponentialUnit,
                3 => CaseParams::Exponential { a: exponent(rng) },
                4 => CaseParams::ProportionalFairness {
                    weight: uniform(rng, 0.0, 5.0),
                    slope: uniform(rng, 0.0, 5.0),
                    intercept: uniform(rng, 0.1, 5.0),
                    offset: c2,
                    exp_coeff: c1,
                },
                _ => CaseParams::Sigmoid {
                    x0: uniform(rng, -5.0, 15.0),
                },
            };
            let spec = UtilitySpec::new(params);
            out.push(if case == 4 {
                spec
            } else {
                spec.with_constants(c1, c2)
            });
        }
    }
    out
}

fn criterion_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let specs = random_specs(&mut rng, 100);
    let mut worst: f64 = 0.0;
    for spec in &specs {
        let u = make_utility(spec).expect("admissible parameters");
        for i in 0..=1000 {
            let x = i as f64 * 0.01;
            let (_, d1, d2) = u.eval(x);
            worst = worst.max((d1 - d2 - slack_by_hand(&spec.case, x)).abs());
        }
    }
    let (fast, time) = within(start.elapsed(), 10.0);
    outcome(
        worst <= IDENTITY_TOL && fast,
        format!(
            "max |f'-f''-t| = {worst:.3e} (tol {IDENTITY_TOL:e}) over {} instances, {time}",
            specs.len()
        ),
    )
}

fn criterion_concavity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let specs = random_specs(&mut rng, 100);
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0;
    for spec in &specs {
        let u = make_utility(spec).expect("admissible parameters");
        if !criterion_check(&u, 20.0, 4096)
            .expect("finite on grid")
            .passed
        {
            continue;
        }
        checked += 1;
        for _ in 0..20 {
            let beta = 100.0 * (1.0 - rng.random::<f64>());
            let g = |p: f64| u.value((beta * p).ln_1p());
            let step = (10.0 - 1e-4) / 199.0;
            for j in 1..199 {
                let p = 1e-4 + j as f64 * step;
                worst = worst.max(g(p - step) - 2.0 * g(p) + g(p + step));
            }
        }
    }
    let e2x = UtilityModel::custom(
        |x| (2.0 * x).exp(),
        |x| 2.0 * (2.0 * x).exp(),
        |x| 4.0 * (2.0 * x).exp(),
    );
    let rejects_e2x = !criterion_check(&e2x, 20.0, 4096)
        .expect("finite on grid")
        .passed;
    outcome(
        worst <= CONCAVITY_TOL && rejects_e2x && checked == specs.len(),
        format!(
            "max second difference = {worst:.3e} (tol {CONCAVITY_TOL:e}) over {checked} passing utilities x 20 betas; e^(2x) rejected = {rejects_e2x}"
        ),
    )
}

fn criterion_waterfill() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let linear = make_utility(&UtilitySpec::linear(1.0)).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..=16);
        let mut betas: Vec<f64> = (0..k)
            .map(|_| {
                if rng.random::<f64>() < 0.1 {
                    0.0
                } else {
                    uniform(&mut rng, 0.01, 100.0)
                }
            })
            .collect();
        if betas.iter().all(|&b| b == 0.0) {
            betas[0] = 1.0;
        }
        let budget = uniform(&mut rng, 0.01, 50.0);
        let problem = AllocationProblem::uniform(&betas, &linear, budget).unwrap();
        let kkt = kkt_allocate(&problem, 1e-8, 200).unwrap();
        let exact = waterfill(&betas, budget).unwrap();
        for (a, b) in kkt.powers.iter().zip(&exact.powers) {
            worst = worst.max((a - b).abs());
        }
    }
    let hand = kkt_allocate(
        &AllocationProblem::uniform(&[4.0, 1.0], &linear, 1.0).unwrap(),
        1e-8,
        200,
    )
    .unwrap();
    let hand_err = (hand.powers[0] - 0.875)
        .abs()
        .max((hand.powers[1] - 0.125).abs());
    outcome(
        worst <= WATERFILL_TOL && hand_err <= WATERFILL_TOL,
        format!(
            "max |p_kkt - p_wf| = {worst:.3e} over 200 instances, hand case error {hand_err:.3e} (tol {WATERFILL_TOL:e})"
        ),
    )
}

fn criterion_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..50 {
        let k = rng.random_range(1..=3);
        let models: Vec<UtilityModel> = (0..k)
            .map(|_| {
                let spec = match rng.random_range(0..3) {
                    0 => UtilitySpec::linear(uniform(&mut rng, 0.1, 3.0)),
                    1 => UtilitySpec::log(
                        uniform(&mut rng, 0.1, 3.0),
                        uniform(&mut rng, 0.1, 3.0),
                        uniform(&mut rng, 0.1, 3.0),
                    ),
                    _ => UtilitySpec::sigmoid(uniform(&mut rng, -2.0, 6.0)),
                };
                make_utility(&spec).unwrap()
            })
            .collect();
        let carriers: Vec<Carrier<'_>> = models
            .iter()
            .map(|u| Carrier {
                beta: uniform(&mut rng, 0.1, 50.0),
                utility: u,
            })
            .collect();
        let problem = AllocationProblem::new(carriers, 1.0).unwrap();
        let kkt = kkt_allocate(&problem, 1e-8, 200).unwrap();
        let grid = brute_force_oracle(&problem, ORACLE_STEP).unwrap();
        worst_gap = worst_gap.max(grid.objective - kkt.objective);
    }
    let (fast, time) = within(start.elapsed(), 60.0);
    outcome(
        worst_gap <= ORACLE_SLACK && fast,
        format!("max (oracle - kkt) objective = {worst_gap:.3e} (slack {ORACLE_SLACK:e}) over 50 instances, {time}"),
    )
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

fn criterion_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    let mut fits = 0;
    while fits < 200 {
        // Random fits: half drawn freely, half built from a nonnegative slack.
        let n = rng.random_range(1..=6);
        let fit: Vec<f64> = if fits % 2 == 0 {
            (0..=n).map(|_| uniform(&mut rng, -1.0, 2.0)).collect()
        } else {
            let t: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.0, 2.0)).collect();
            let mut f = vec![uniform(&mut rng, -1.0, 1.0)];
            f.extend(
                (1..=n)
                    .map(|j| (j - 1..n).map(|m| t[m] * factorial(m)).sum::<f64>() / factorial(j)),
            );
            f
        };
        let Ok(result) = fit_polynomial_utility(&fit) else {
            continue;
        };
        if result.t_coeffs.iter().any(|&a| a < 0.0) && fits % 2 == 1 {
            return outcome(
                false,
                format!("nonnegative slack recovered as {:?}", result.t_coeffs),
            );
        }
        let back = result
            .model
            .polynomial_coefficients()
            .expect("polynomial model");
        for (a, b) in back.iter().zip(&fit) {
            worst = worst.max((a - b).abs());
        }
        fits += 1;
    }
    let flagged = matches!(
        fit_polynomial_utility(&[0.0, 0.0, 1.0]),
        Err(UtilityError::NonnegativityViolation { .. })
    );
    outcome(
        worst <= ROUND_TRIP_TOL && flagged,
        format!(
            "max coefficient error = {worst:.3e} (tol {ROUND_TRIP_TOL:e}) over {fits} fits; (0,0,1) flagged = {flagged}"
        ),
    )
}

fn criterion_traffic() -> Outcome {
    let model = TrafficModel::new(TrafficParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let steps = 1_000_000;
    let dt = 0.01;

    let mut voip = TrafficSession::new(ServiceClass::Voip, &model, &mut rng);
    let mut video = TrafficSession::new(ServiceClass::Video, &model, &mut rng);
    for i in 0..steps {
        let now = i as f64 * dt;
        voip.step(&model, dt, now, &mut rng);
        video.step(&model, dt, now, &mut rng);
        voip.serve(u64::MAX, now + dt);
        video.serve(u64::MAX, now + dt);
    }
    let span = steps as f64 * dt;
    let duty = voip.on_time_s() / span;
    let state_ms = 1e3 * span / video.transitions() as f64;

    let (mut sum, mut in_range) = (0.0, true);
    for _ in 0..steps {
        let r = model.sample_video_rate(&mut rng);
        in_range &= (64.0..=256.0).contains(&r);
        sum += r;
    }
    let rate = sum / steps as f64;
    let ok = (duty - 0.4).abs() <= 0.02
        && (rate - 180.0).abs() <= 0.5
        && in_range
        && (state_ms - 160.0).abs() <= 2.0;
    outcome(
        ok,
        format!(
            "voip duty {duty:.4} (0.4 +/- 0.02), video rate {rate:.3} kbps (180 +/- 0.5, all in [64, 256] = {in_range}), state mean {state_ms:.2} ms (160 +/- 2)"
        ),
    )
}

fn class_series(rows: &[SweepRow], class: ServiceClass) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.class == class)
        .map(|r| r.mean_utility)
        .collect()
}

fn fmt_series(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|u| format!("{u:.4}")).collect();
    format!("[{}]", parts.join(" "))
}

const TREND_BASE: &str = "scheduler.mode = utility_greedy\n";
const FIG3_VALUES: [u64; 4] = [10, 20, 30, 40];
const FIG4_VALUES: [u64; 5] = [4, 8, 12, 16, 20];

fn criterion_trends(audit: &mut Audit) -> Outcome {
    let start = Instant::now();
    let cfg = ScenarioConfig::parse(TREND_BASE).unwrap();
    let (fig3, a3) =
        sweep_audited(&cfg, "traffic.voip.users", &FIG3_VALUES, 5).expect("fig3 sweep");
    let (fig4, a4) =
        sweep_audited(&cfg, "traffic.video.users", &FIG4_VALUES, 5).expect("fig4 sweep");
    audit.merge(&a3);
    audit.merge(&a4);

    let mut ok = true;
    let mut detail = Vec::new();
    for (name, rows) in [("fig3", &fig3), ("fig4", &fig4)] {
        for class in ServiceClass::ALL {
            let u = class_series(rows, class);
            let holds = u.last() <= u.first();
            ok &= holds;
            detail.push(format!(
                "{name} {class} {} {}",
                fmt_series(&u),
                if holds { "ok" } else { "rises" }
            ));
        }
    }
    let step = |rows: &[SweepRow], n: usize| {
        let u = class_series(rows, ServiceClass::Video);
        (u[0] - u[u.len() - 1]) / (n - 1) as f64
    };
    let (s3, s4) = (
        step(&fig3, FIG3_VALUES.len()),
        step(&fig4, FIG4_VALUES.len()),
    );
    ok &= s4 > s3;
    detail.push(format!(
        "video decline per step fig4 {s4:.5} vs fig3 {s3:.5}"
    ));
    let (fast, time) = within(start.elapsed(), 600.0);
    ok &= fast;
    detail.push(time);
    outcome(ok, detail.join("; "))
}

fn criterion_determinism(audit: &Audit) -> Outcome {
    let cfg = ScenarioConfig::parse(TREND_BASE).unwrap();
    let first = simulation_csv(&run_scenario(&cfg).unwrap());
    let second = simulation_csv(&run_scenario(&cfg).unwrap());
    let short = ScenarioConfig::parse(&format!("{TREND_BASE}sim.duration_s = 1\n")).unwrap();
    let sweep_bytes = || {
        sweep_csv(
            &sweep_audited(&short, "traffic.be.users", &[5, 10], 2)
                .unwrap()
                .0,
        )
    };
    let same = first == second && sweep_bytes() == sweep_bytes();
    let feasible = audit.max_power_excess <= POWER_SLACK && audit.partition_failures == 0;
    outcome(
        same && feasible && audit.capacity_violations == 0 && audit.frames > 0,
        format!(
            "identical bytes = {same}; {} frames, {} blocks audited, max power excess {:.3e} (tol {POWER_SLACK:e}), partition failures {}, capacity violations {}",
            audit.frames, audit.blocks, audit.max_power_excess, audit.partition_failures, audit.capacity_violations
        ),
    )
}

fn main() -> ExitCode {
    let mut audit = Audit::default();
    let mut all = true;
    let mut report = |n: usize, o: Outcome| {
        all &= o.passed;
        println!(
            "criterion {n}: {} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, criterion_identity());
    report(2, criterion_concavity());
    report(3, criterion_waterfill());
    report(4, criterion_oracle());
    report(5, criterion_round_trip());
    report(6, criterion_traffic());
    report(7, criterion_trends(&mut audit));
    report(8, criterion_determinism(&audit));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
