//! Acceptance criteria. Each criterion prints one PASS/FAIL line with the
//! measured quantities; the process exits non-zero if any criterion fails.
//!
//! Run with `cargo test --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use perfsim::agents::{
    AgentPool, ArKernel, BestResponseLaw, GaussianEnv, GaussianIid, InnerSolver, Kernel, Utility,
    UtilityKind,
};
use perfsim::harness::{self, aggregate, generate_synthetic, Algorithm, ExperimentSpec};
use perfsim::losses::{LabeledSample, LossModel, Sample};
use perfsim::numeric::{check_schedule, ParamVector, ProblemConstants, RngStream, StepSchedule};
use perfsim::oracle::{fit_rate, theta_ps_fixed_point, FixedPointTolerances};
use perfsim::solver::{one_step_contraction_probe, RunTrace};

// Criterion 1 and 2.
const SLOPE_RANGE: (f64, f64) = (-1.25, -0.75);
const SLOPE_WINDOW: (u64, u64) = (1_000, 100_000);
const GAUSSIAN_BUDGET_S: f64 = 60.0;
const ORDERING_STDERRS: f64 = 2.0;

// Criterion 3.
const AR_BURN_IN: usize = 10_000;
const AR_SAMPLES: usize = 100_000;
const AR_MEAN_REL_TOL: f64 = 0.01;
const AR_VAR_REL_TOL: f64 = 0.05;
const AR_BUDGET_S: f64 = 5.0;

// Criterion 4.
const ORACLE_TOL: f64 = 1e-8;
const ORACLE_BUDGET_S: f64 = 10.0;

// Criterion 5.
const SC_HORIZON: u64 = 20_000;
const SC_TRIALS: usize = 10;
const SC_EARLY_K: u64 = 100;
const SC_RATIO_MAX: f64 = 0.01;
const SC_BUDGET_S: f64 = 120.0;

// Criterion 6.
const LAZY_R: usize = 4;
const LAZY_TRANSIENT_END: u64 = 100;
const LAZY_CHECKPOINTS_PER_DECADE: u32 = 20;
const LAZY_MIN_FRACTION: f64 = 0.8;

// Criterion 7.
const PROBE_POINTS: usize = 50;
const PROBE_DRAWS: usize = 20_000;

// Criterion 8.
const POOL_STEPS: usize = 2_000;
const POOL_TOL: f64 = 1e-10;

// Criterion 9.
const PROPERTY_CASES: usize = 500;
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec()).unwrap()
}

/// Runs every trial of every sweep point of `json` and returns, per point,
/// its label, k grid and per-trial traces.
fn run_trials(json: &str) -> Vec<(String, Vec<u64>, Vec<RunTrace>)> {
    let spec = ExperimentSpec::from_json(json).unwrap();
    spec.expand()
        .unwrap()
        .into_iter()
        .map(|p| {
            let r = harness::resolve(&p.spec, &p.label, &p.assignments).unwrap();
            let traces: Vec<RunTrace> = (0..r.run.trials as u64)
                .into_par_iter()
                .map(|t| r.run_trial(t).unwrap())
                .collect();
            (p.label, r.grid(), traces)
        })
        .collect()
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn gaussian_rate_and_ordering() -> (Verdict, Verdict) {
    let start = Instant::now();
    let points = run_trials(
        r#"{"preset":"gaussian_ar",
            "problem":{"z_bar":10,"sigma":50,"epsilon":0.1},
            "run":{"horizon":100000,"trials":20},
            "sweep":[{"param":"rho","values":[0.1,0.5,1.0]}]}"#,
    );
    let elapsed = start.elapsed().as_secs_f64();

    let mut slopes_ok = true;
    let mut slope_text = Vec::new();
    let mut tails = Vec::new();
    for (label, grid, traces) in &points {
        let agg = aggregate(grid, traces);
        let series: Vec<(u64, f64)> = agg.k.iter().copied().zip(agg.err_mean).collect();
        let fit = fit_rate(&series, SLOPE_WINDOW.0, SLOPE_WINDOW.1).unwrap();
        let ok = (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&fit.slope);
        slopes_ok &= ok;
        slope_text.push(format!(
            "{label}: {:.3}{}",
            fit.slope,
            if ok { "" } else { " (out)" }
        ));

        // Per-trial mean error over the last decade of recorded k.
        let last_decade = SLOPE_WINDOW.1 / 10;
        let per_trial: Vec<f64> = traces
            .iter()
            .map(|t| {
                let tail: Vec<f64> = t
                    .records
                    .iter()
                    .filter(|r| r.k >= last_decade)
                    .map(|r| r.error)
                    .collect();
                tail.iter().sum::<f64>() / tail.len() as f64
            })
            .collect();
        tails.push((label.clone(), mean_and_stderr(&per_trial)));
    }
    let in_time = elapsed <= GAUSSIAN_BUDGET_S;
    let rate = verdict(
        slopes_ok && in_time,
        format!(
            "slopes over [{}, {}]: {}; runtime {elapsed:.1}s / {GAUSSIAN_BUDGET_S}s",
            SLOPE_WINDOW.0,
            SLOPE_WINDOW.1,
            slope_text.join(", ")
        ),
    );

    let mut ordered = true;
    for w in tails.windows(2) {
        let ((_, (m0, s0)), (_, (m1, s1))) = (&w[0], &w[1]);
        ordered &= *m0 <= m1 + ORDERING_STDERRS * (s0 * s0 + s1 * s1).sqrt();
    }
    let text: Vec<String> = tails
        .iter()
        .map(|(l, (m, s))| format!("{l}: {m:.3} ± {s:.3}"))
        .collect();
    let ordering = verdict(
        ordered,
        format!("last-decade mean error {}", text.join(", ")),
    );
    (rate, ordering)
}

fn ar_stationary_law() -> Verdict {
    let start = Instant::now();
    let (z_bar, epsilon, sigma) = (10.0, 0.1, 5.0);
    let theta = pv(&[z_bar / (1.0 - epsilon)]);
    let mut pass = true;
    let mut text = Vec::new();
    for (i, &rho) in [0.25, 0.5, 1.0].iter().enumerate() {
        let env = GaussianEnv::new(z_bar, epsilon, sigma, rho).unwrap();
        let mut kernel = ArKernel::new(env, z_bar);
        let mut rng = RngStream::new(100 + i as u64);
        for _ in 0..AR_BURN_IN {
            kernel.advance(&theta, &mut rng).unwrap();
        }
        let mut xs = Vec::with_capacity(AR_SAMPLES);
        for _ in 0..AR_SAMPLES {
            kernel.advance(&theta, &mut rng).unwrap();
            xs.push(kernel.state());
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let (m_true, v_true) = (env.mean_at(theta.first()), env.stationary_variance());
        let (dm, dv) = (
            (mean - m_true).abs() / m_true,
            (var - v_true).abs() / v_true,
        );
        pass &= dm <= AR_MEAN_REL_TOL && dv <= AR_VAR_REL_TOL;
        text.push(format!(
            "rho={rho}: mean off {:.3}%, var off {:.2}%",
            100.0 * dm,
            100.0 * dv
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        pass && elapsed <= AR_BUDGET_S,
        format!(
            "{}; runtime {elapsed:.2}s / {AR_BUDGET_S}s",
            text.join(", ")
        ),
    )
}

fn oracle_consistency() -> Verdict {
    let start = Instant::now();
    let tol = FixedPointTolerances::default();
    let env = GaussianEnv::new(10.0, 0.1, 50.0, 0.5).unwrap();
    let g = theta_ps_fixed_point(&LossModel::Quadratic, &env, &pv(&[0.0]), &tol).unwrap();
    let gauss_err = (g.theta.first() - 100.0 / 9.0).abs();

    let m = 200;
    let ds = generate_synthetic(3, m, 0).unwrap();
    let utility = Utility::new(UtilityKind::Quadratic, 0.01).unwrap();
    let law = BestResponseLaw::new(ds.samples, utility, InnerSolver::default()).unwrap();
    let loss = LossModel::RegLogistic {
        beta: 1000.0 / m as f64,
    };
    let starts = [
        pv(&[0.0, 0.0, 0.0]),
        pv(&[3.0, -3.0, 3.0]),
        pv(&[-10.0, 5.0, 8.0]),
    ];
    let fps: Vec<_> = starts
        .iter()
        .map(|s| theta_ps_fixed_point(&loss, &law, s, &tol).unwrap())
        .collect();
    let residual = fps.iter().map(|f| f.residual).fold(0.0, f64::max);
    let spread = fps
        .iter()
        .skip(1)
        .map(|f| f.theta.dist_sq(&fps[0].theta).sqrt())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        gauss_err <= ORACLE_TOL
            && residual <= ORACLE_TOL
            && spread <= ORACLE_TOL
            && elapsed <= ORACLE_BUDGET_S,
        format!(
            "gaussian |θ - z̄/(1-ε)| = {gauss_err:.1e}; pool residual {residual:.1e}, \
             init spread {spread:.1e}; runtime {elapsed:.2}s / {ORACLE_BUDGET_S}s"
        ),
    )
}

/// Mean of `values` over half-decade windows `[10^{j/2}, 10^{(j+1)/2})`
/// starting at k = 10.
fn half_decade_means(k: &[u64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let k_max = *k.last().unwrap() as f64;
    let mut j = 2;
    while 10f64.powf(j as f64 / 2.0) <= k_max {
        let (lo, hi) = (10f64.powf(j as f64 / 2.0), 10f64.powf((j + 1) as f64 / 2.0));
        let window: Vec<f64> = k
            .iter()
            .zip(values)
            .filter(|(&k, _)| (lo..hi).contains(&(k as f64)))
            .map(|(_, &v)| v)
            .collect();
        if !window.is_empty() {
            out.push(window.iter().sum::<f64>() / window.len() as f64);
        }
        j += 1;
    }
    out
}

fn strategic_convergence() -> Verdict {
    let start = Instant::now();
    let mut pass = true;
    let mut text = Vec::new();
    for preset in ["strat_class_linear", "strat_class_logistic"] {
        let json = format!(
            r#"{{"preset":"{preset}","problem":{{"d":3,"m":200}},
                 "run":{{"horizon":{SC_HORIZON},"trials":{SC_TRIALS}}}}}"#
        );
        let results = harness::execute(&ExperimentSpec::from_json(&json).unwrap()).unwrap();
        let a = &results[0].aggregate;
        let at = |k: u64| a.err_mean[a.k.iter().position(|&x| x == k).unwrap()];
        let ratio = at(SC_HORIZON) / at(SC_EARLY_K);
        let smoothed = half_decade_means(&a.k, &a.err_mean);
        let monotone = smoothed.windows(2).all(|w| w[1] <= w[0]);
        pass &= ratio < SC_RATIO_MAX && monotone;
        text.push(format!(
            "{preset}: err(K)/err({SC_EARLY_K}) = {:.2}%, smoothed non-increasing: {monotone}",
            100.0 * ratio
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        pass && elapsed <= SC_BUDGET_S,
        format!(
            "{}; runtime {elapsed:.1}s / {SC_BUDGET_S}s",
            text.join("; ")
        ),
    )
}

fn lazy_ordering() -> Verdict {
    let mut pass = true;
    let mut text = Vec::new();
    for preset in ["strat_class_linear", "strat_class_logistic"] {
        // Mean error at the end of each agent round, keyed by agent updates.
        let at_budget = |r: usize| {
            let json = format!(
                r#"{{"preset":"{preset}","run":{{"algorithm":"lazy","horizon":{},
                     "trials":{SC_TRIALS},"learner_iters_per_agent_round":{r},
                     "recording":{{"kind":"every"}}}}}}"#,
                SC_HORIZON * r as u64
            );
            let results = harness::execute(&ExperimentSpec::from_json(&json).unwrap()).unwrap();
            assert_eq!(results[0].point.algorithm, Algorithm::Lazy);
            let a = results[0].aggregate.clone();
            let mut by_budget = std::collections::BTreeMap::new();
            for (updates, err) in a.agent_updates.iter().zip(a.err_mean) {
                by_budget.insert(updates.unwrap(), err);
            }
            by_budget
        };
        let (one, lazy) = (at_budget(1), at_budget(LAZY_R));
        let mut checkpoints: Vec<u64> = (0..)
            .map(|i| {
                let e = (LAZY_TRANSIENT_END as f64).log10()
                    + i as f64 / LAZY_CHECKPOINTS_PER_DECADE as f64;
                10f64.powf(e).round() as u64
            })
            .take_while(|&b| b <= SC_HORIZON)
            .collect();
        checkpoints.dedup();
        let wins = checkpoints.iter().filter(|b| lazy[b] <= one[b]).count();
        let frac = wins as f64 / checkpoints.len() as f64;
        pass &= frac >= LAZY_MIN_FRACTION;
        text.push(format!(
            "{preset}: r={LAZY_R} ≤ r=1 at {wins}/{} checkpoints",
            checkpoints.len()
        ));
    }
    verdict(pass, text.join("; "))
}

fn contraction_probe() -> Verdict {
    let (z_bar, epsilon, sigma) = (10.0, 0.1, 50.0);
    let env = GaussianEnv::new(z_bar, epsilon, sigma, 1.0).unwrap();
    let mut kernel = GaussianIid::new(env);
    let constants = ProblemConstants::new(1.0, 1.0, epsilon, sigma).unwrap();
    let gamma_max = constants.mu_tilde() / (2.0 * constants.lipschitz().powi(2));
    let theta_ps = pv(&[z_bar / (1.0 - epsilon)]);
    let mut pick = RngStream::new(7);
    let mut draws = RngStream::new(8);
    let mut passed = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..PROBE_POINTS {
        let theta = pv(&[theta_ps.first() + pick.random_range(-100.0..100.0)]);
        let gamma = gamma_max * (1.0 - pick.random::<f64>());
        let r = one_step_contraction_probe(
            &LossModel::Quadratic,
            &mut kernel,
            &constants,
            &theta,
            &theta_ps,
            gamma,
            PROBE_DRAWS,
            &mut draws,
        )
        .unwrap();
        passed += r.passes() as usize;
        worst = worst.max((r.lhs - r.rhs) / r.stderr.max(f64::MIN_POSITIVE));
    }
    verdict(
        passed == PROBE_POINTS,
        format!(
            "{passed}/{PROBE_POINTS} points with γ ≤ μ̃/(2L²) = {gamma_max}; \
             worst (lhs - rhs)/stderr = {worst:.1}"
        ),
    )
}

fn pool_closed_form() -> Verdict {
    let ds = generate_synthetic(3, 200, 0).unwrap();
    let epsilon = 0.01;
    let theta = pv(&[0.3, -0.2, 0.1]);
    let utility = Utility::new(UtilityKind::Quadratic, epsilon).unwrap();
    let mut worst = 0.0f64;
    let mut settled = 0.0f64;
    for (i, alpha) in [0.5 * epsilon, 1.5 * epsilon].into_iter().enumerate() {
        let factor = 1.0 - alpha / epsilon;
        let mut pool = AgentPool::new(ds.samples.clone(), utility, alpha, 5).unwrap();
        let mut agent_rng = RngStream::new(20 + i as u64);
        let mut sample_rng = RngStream::new(30 + i as u64);
        for _ in 0..POOL_STEPS {
            pool.pool_step(&theta, &mut agent_rng, &mut sample_rng)
                .unwrap();
            for (a, base) in ds.samples.iter().enumerate() {
                let n = pool.update_count(a) as i32;
                let decay = factor.powi(n);
                for (j, (&x, &xb)) in pool.features_of(a).iter().zip(&base.features).enumerate() {
                    let shift = epsilon * theta[j];
                    let predicted = xb + shift - decay * shift;
                    worst = worst.max((x - predicted).abs());
                }
            }
        }
        for (a, base) in ds.samples.iter().enumerate() {
            for (j, (&x, &xb)) in pool.features_of(a).iter().zip(&base.features).enumerate() {
                settled = settled.max((x - xb - epsilon * theta[j]).abs());
            }
        }
    }
    verdict(
        worst <= POOL_TOL,
        format!(
            "max deviation from x̄ + εθ(1 - (1-α/ε)^n) over {POOL_STEPS} steps: {worst:.1e}; final distance to x̄ + εθ {settled:.1e}"
        ),
    )
}

fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> bool {
    let scale = 1.0 + grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    (0..x.len()).all(|j| {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[j] += FD_STEP;
        down[j] -= FD_STEP;
        let fd = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        (fd - grad[j]).abs() <= FD_TOL * scale
    })
}

fn uniform_vec(rng: &mut RngStream, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-r..r)).collect()
}

fn property_suites() -> Verdict {
    let mut rng = RngStream::new(2024);
    let mut failures = Vec::new();

    let mut fd_loss = 0;
    let mut fd_util = 0;
    let mut convex = 0;
    for _ in 0..PROPERTY_CASES {
        let beta = rng.random_range(0.01..10.0);
        let loss = LossModel::RegLogistic { beta };
        let x = uniform_vec(&mut rng, 3, 3.0);
        let z = Sample::Labeled(LabeledSample::new(x.clone(), rng.random_range(0..2)));
        let theta = uniform_vec(&mut rng, 3, 3.0);
        let g = loss.grad(&pv(&theta), &z).unwrap();
        fd_loss += fd_check(|t| loss.loss(&pv(t), &z).unwrap(), &theta, g.as_slice()) as usize;

        let zs = Sample::Scalar(rng.random_range(-50.0..50.0));
        let ts = [rng.random_range(-50.0..50.0)];
        let gs = LossModel::Quadratic.grad(&pv(&ts), &zs).unwrap();
        fd_loss += fd_check(
            |t| LossModel::Quadratic.loss(&pv(t), &zs).unwrap(),
            &ts,
            gs.as_slice(),
        ) as usize;

        let other = uniform_vec(&mut rng, 3, 3.0);
        let (a, b) = (pv(&theta), pv(&other));
        let (ga, gb) = (loss.grad(&a, &z).unwrap(), loss.grad(&b, &z).unwrap());
        let inner: f64 = ga
            .as_slice()
            .iter()
            .zip(gb.as_slice())
            .zip(theta.iter().zip(&other))
            .map(|((p, q), (u, v))| (p - q) * (u - v))
            .sum();
        convex += (inner >= beta * a.dist_sq(&b) * (1.0 - 1e-9)) as usize;

        for kind in [UtilityKind::Quadratic, UtilityKind::Logistic] {
            let u = Utility::new(kind, rng.random_range(0.01..1.0)).unwrap();
            let base = LabeledSample::new(uniform_vec(&mut rng, 3, 3.0), rng.random_range(0..2));
            let xn = uniform_vec(&mut rng, 3, 3.0);
            let g = u.grad(&xn, &base, &theta);
            fd_util += fd_check(|p| u.value(p, &base, &theta), &xn, &g) as usize;
        }
    }
    if fd_loss != 2 * PROPERTY_CASES {
        failures.push(format!("loss FD {fd_loss}/{}", 2 * PROPERTY_CASES));
    }
    if fd_util != 2 * PROPERTY_CASES {
        failures.push(format!("utility FD {fd_util}/{}", 2 * PROPERTY_CASES));
    }
    if convex != PROPERTY_CASES {
        failures.push(format!("strong convexity {convex}/{PROPERTY_CASES}"));
    }

    let c = ProblemConstants::new(1.0, 1.0, 0.1, 1.0).unwrap();
    let constant =
        check_schedule(&StepSchedule::constant(0.05).unwrap(), &c, 10_000, 0.05).unwrap();
    let mt = c.mu_tilde();
    let inverse = StepSchedule::inverse(500.0 / mt, 1.0).unwrap();
    let inverse = check_schedule(&inverse, &c, 1_000_000, f64::MAX).unwrap();
    let zero_offset = check_schedule(
        &StepSchedule::inverse(1.0, 0.0).unwrap(),
        &ProblemConstants::new(0.01, 0.0, 0.0, 0.0).unwrap(),
        100,
        10.0,
    )
    .unwrap();
    if !constant.passed() || !inverse.passed() || zero_offset.first_ratio_violation != Some(1) {
        failures.push("schedule checker".into());
    }

    let json = r#"{"preset":"strat_class_linear","run":{"horizon":2000,"trials":3,"seed":11}}"#;
    let bytes: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut spec = ExperimentSpec::from_json(json).unwrap();
            spec.output_dir = dir.path().to_path_buf();
            harness::run_experiment(&spec).unwrap();
            std::fs::read(dir.path().join("trace.csv")).unwrap()
        })
        .collect();
    if bytes[0] != bytes[1] {
        failures.push("trace.csv not byte-identical".into());
    }

    let pass = failures.is_empty();
    verdict(
        pass,
        if pass {
            format!(
                "{PROPERTY_CASES} cases each: loss/utility FD, strong convexity; schedule \
                 checker cases; byte-identical trace.csv"
            )
        } else {
            format!("failing: {}", failures.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let (rate, ordering) = gaussian_rate_and_ordering();
    lines.push((1, "Gaussian O(1/k) rate", rate));
    lines.push((2, "rho ordering", ordering));
    lines.push((3, "AR stationary law", ar_stationary_law()));
    lines.push((4, "theta_PS oracle consistency", oracle_consistency()));
    lines.push((
        5,
        "strategic classification convergence",
        strategic_convergence(),
    ));
    lines.push((6, "lazy deploy ordering", lazy_ordering()));
    lines.push((7, "one-step contraction probe", contraction_probe()));
    lines.push((8, "closed-form best response", pool_closed_form()));
    lines.push((9, "property suites", property_suites()));

    let mut failed = 0;
    for (n, name, v) in &lines {
        failed += !v.pass as usize;
        println!(
            "criterion {n} [{}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        lines.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
