use std::path::Path;
use std::process::Command;

use perfsim::harness::{self, generate_synthetic, ExperimentSpec, Preset};
use perfsim::losses::LossModel;
use perfsim::numeric::{dot, ParamVector};
use perfsim::solver::minimize_empirical;

fn spec(json: &str, out: &Path) -> ExperimentSpec {
    let mut s = ExperimentSpec::from_json(json).unwrap();
    s.output_dir = out.to_path_buf();
    s
}

#[test]
fn same_spec_gives_byte_identical_outputs() {
    let json = r#"{"preset":"strat_class_logistic","run":{"horizon":3000,"trials":4,"seed":7},
                   "sweep":[{"param":"alpha","values":[0.001,0.005]}]}"#;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run_experiment(&spec(json, a.path())).unwrap();
    harness::run_experiment(&spec(json, b.path())).unwrap();
    for file in ["trace.csv", "summary.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs between identical runs");
    }

    let c = tempfile::tempdir().unwrap();
    let mut other = spec(json, c.path());
    other.run.seed = Some(8);
    harness::run_experiment(&other).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("trace.csv")).unwrap(),
        std::fs::read(c.path().join("trace.csv")).unwrap()
    );
}

#[test]
fn zero_horizon_writes_the_initial_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(
        r#"{"preset":"gaussian_ar","run":{"trials":1,"horizon":0,"theta0":[3.0]}}"#,
        dir.path(),
    );
    harness::run_experiment(&s).unwrap();
    let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "k,samples_drawn,agent_updates,err_mean,err_p05,err_p95"
    );
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "0");
    let expected = (3.0 - 100.0 / 9.0f64).powi(2);
    for f in &fields[3..] {
        assert_eq!(f.parse::<f64>().unwrap(), expected);
    }
}

#[test]
fn summary_carries_what_a_figure_needs() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(
        r#"{"preset":"gaussian_ar","run":{"trials":3,"horizon":5000},
            "sweep":[{"param":"rho","values":[0.1,1.0]}]}"#,
        dir.path(),
    );
    harness::run_experiment(&s).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(v["schema"], 1);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    for p in points {
        assert!((p["theta_ps"][0].as_f64().unwrap() - 100.0 / 9.0).abs() < 1e-12);
        assert!(p["rate_fit_slope"].is_f64());
        assert_eq!(p["schedule"]["kind"], "inverse");
        assert!(p["schedule"]["c0"].is_f64() && p["schedule"]["c1"].is_f64());
        assert_eq!(p["run"]["seed"], 0);
        assert_eq!(p["failed_trials"].as_array().unwrap().len(), 0);
    }
    assert_eq!(points[0]["sweep"]["rho"], 0.1);

    let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("k,rho=0.1/samples_drawn,"), "{header}");
    assert!(header.ends_with("rho=1.0/err_p95"), "{header}");
    assert!(text.lines().all(|l| l.split(',').count() == 11));
}

#[test]
fn synthetic_population_is_learnable() {
    let ds = generate_synthetic(3, 200, 0).unwrap();
    let samples = ds.as_samples();
    let loss = LossModel::RegLogistic { beta: 1e-6 };
    let (theta, _) = minimize_empirical(&loss, &samples, &ParamVector::zeros(3), 1e-8).unwrap();
    let correct = ds
        .samples
        .iter()
        .filter(|s| (dot(theta.as_slice(), &s.features) > 0.0) == (s.label == 1))
        .count();
    let accuracy = correct as f64 / ds.m() as f64;
    assert!(accuracy > 0.5, "training accuracy {accuracy}");
}

fn perfsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_perfsim"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, json: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, json).unwrap();
        p.to_str().unwrap().to_string()
    };

    let out = perfsim(&["presets"]);
    assert!(out.status.success());
    let listed = String::from_utf8(out.stdout).unwrap();
    for (name, _) in harness::PRESETS {
        assert!(listed.contains(name));
    }

    let good = write(
        "good.json",
        r#"{"preset":"gaussian_ar","run":{"trials":2,"horizon":100}}"#,
    );
    let out_dir = dir.path().join("run");
    let out = perfsim(&[
        "run",
        "--config",
        &good,
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = std::fs::read_to_string(out_dir.join("summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 3"));

    let out = perfsim(&["oracle", "--config", &good]);
    assert!(out.status.success());
    let theta: f64 = String::from_utf8(out.stdout)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert_eq!(theta, 100.0 / 9.0);

    let bad = write("bad.json", r#"{"preset":"gaussian_ar","run":{"trials":0}}"#);
    let out = perfsim(&["run", "--config", &bad, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trials"));

    let out = perfsim(&[
        "run",
        "--config",
        &dir.path().join("missing.json").to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // |1 - γ(1 - ε)| = 3.5: every trial blows up.
    let divergent = write(
        "divergent.json",
        r#"{"preset":"custom","problem":{"family":"gaussian"},
            "schedule":{"kind":"constant","gamma":5.0},"run":{"trials":3,"horizon":1000}}"#,
    );
    let div_dir = dir.path().join("div");
    let out = perfsim(&[
        "run",
        "--config",
        &divergent,
        "--out",
        div_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let summary = std::fs::read_to_string(div_dir.join("summary.json")).unwrap();
    assert!(summary.contains("\"all_trials_diverged\": true"));
}

#[test]
fn presets_resolve() {
    for preset in [
        Preset::GaussianAr,
        Preset::StratClassLinear,
        Preset::StratClassLogistic,
    ] {
        let s = ExperimentSpec::preset(preset);
        let points = s.expand().unwrap();
        harness::resolve(&points[0].spec, "", &[]).unwrap();
    }
}
