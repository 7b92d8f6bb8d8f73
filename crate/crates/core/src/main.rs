use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use perfsim::harness::{self, ExperimentSpec, HarnessError, Preset};

#[derive(Parser)]
#[command(
    name = "perfsim",
    version,
    about = "Stochastic approximation under state-dependent data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trace.csv and summary.json.
    Run(Source),
    /// List the built-in presets.
    Presets,
    /// Print θ_PS for every sweep point.
    Oracle(Source),
}

#[derive(Args)]
struct Source {
    /// JSON experiment file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Run a preset with its defaults instead of a config file.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown preset `{s}`; see `perfsim presets`"))
}

impl Source {
    fn load(&self) -> Result<ExperimentSpec, HarnessError> {
        let mut spec = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentSpec::from_path(path)?,
            (None, Some(p)) => ExperimentSpec::preset(p),
            (None, None) => unreachable!("clap requires one of --config / --preset"),
        };
        if self.seed.is_some() {
            spec.run.seed = self.seed;
        }
        if self.trials.is_some() {
            spec.run.trials = self.trials;
        }
        if self.horizon.is_some() {
            spec.run.horizon = self.horizon;
        }
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        Ok(spec)
    }
}

fn run(source: &Source) -> Result<ExitCode, HarnessError> {
    let spec = source.load()?;
    let outcome = harness::run_experiment(&spec)?;
    for r in &outcome.results {
        let name = if r.point.label.is_empty() {
            "run"
        } else {
            r.point.label.as_str()
        };
        let slope = match &r.rate_fit {
            Ok(fit) => format!("{:.3}", fit.slope),
            Err(_) => "n/a".into(),
        };
        eprintln!(
            "{name}: {}/{} trials ok, final mean error {:.3e}, rate slope {slope}",
            r.aggregate.trials_used,
            r.point.run.trials,
            r.aggregate.err_mean.last().copied().unwrap_or(f64::NAN),
        );
        for f in &r.failures {
            eprintln!("  trial {}: {}", f.trial, f.message);
        }
    }
    eprintln!(
        "wrote {} and {}",
        outcome.trace_path.display(),
        outcome.summary_path.display()
    );
    if outcome.all_diverged() {
        eprintln!("error: every trial diverged");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle(source: &Source) -> Result<ExitCode, HarnessError> {
    let spec = source.load()?;
    for point in spec.expand()? {
        let r = harness::resolve(&point.spec, &point.label, &point.assignments)?;
        let theta: Vec<String> = r
            .theta_ps
            .as_slice()
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        if point.label.is_empty() {
            println!("{}", theta.join(" "));
        } else {
            println!("{}\t{}", point.label, theta.join(" "));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Presets => {
            for (name, about) in harness::PRESETS {
                println!("{name:<22}{about}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(source) => run(source),
        Command::Oracle(source) => oracle(source),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}
