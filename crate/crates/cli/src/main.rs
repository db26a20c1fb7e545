use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xicoal::kernels::SpatialConfig;
use xicoal::normalization::{grad_log_n, normalization_n, NormMethod, NormOptions};
use xicoal::rates::{build_rate_table, check_consistency, RateTable};
use xicoal::rng::stream_rng;
use xicoal::sampler::{sample_decorated_forest, sample_paths, sde_sample, write_events_csv, write_paths_csv, MergeRule, SamplerOptions, Scheme, SdeOptions};
use xicoal::{Error, Result};
use xicoal_cli::experiments::{runtimes, summary};
use xicoal_cli::{run_experiment, ExperimentSpec, EXPERIMENTS};
use xicoal_forward::run::{write_events_jsonl, write_trajectories_csv};
use xicoal_forward::{cannings_simulate, extract_genealogy, lookdown_simulate, ForwardRun, OffspringLaw, RunOptions};
use xicoal_reversal::{simulate_reversal, write_epochs_csv, write_observations_csv, ReversalOptions};

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec (JSON); flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the rate table of a measure and check its consistency.
    Rates,
    /// Evaluate N (and ∇ log N) at a configuration.
    Normalization {
        /// Points separated by spaces, coordinates by commas: "0.1 0.4 0.8".
        #[arg(long)]
        points: String,
        #[arg(long)]
        grad: bool,
    },
    /// Sample spatial coalescent genealogies from a configuration.
    SampleCoalescent {
        #[arg(long)]
        points: String,
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.01)]
        record_dt: f64,
    },
    /// Forward Cannings model with a pair-resampling or fixed-family law.
    SimulateCannings {
        /// Population size N.
        #[arg(long, default_value_t = 30)]
        population: usize,
        /// Family size k of the law (2 = pair resampling).
        #[arg(long, default_value_t = 2)]
        family: usize,
        /// Event rate T_N; defaults to N(N−1)/2.
        #[arg(long)]
        tn: Option<f64>,
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.1)]
        record_dt: f64,
    },
    /// Lookdown construction for the measure in the config.
    SimulateLookdown {
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.1)]
        record_dt: f64,
    },
    /// Time reversal by merge-and-resample from a stationary start.
    Reverse {
        #[arg(long, default_value_t = 2.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.5)]
        record_dt: f64,
    },
    /// Run a named validation experiment, or `all`.
    Check {
        experiment: String,
        /// Reduced sizes, for smoke runs.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Parser)]
#[command(name = "xicoal", version, about = "Spatial Ξ-coalescents on the torus: rates, normalisation, samplers, forward models and checks")]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn load_spec(c: &Common, name: &str) -> Result<ExperimentSpec> {
    let mut spec = match &c.config {
        Some(p) => ExperimentSpec::from_json(&fs::read_to_string(p).map_err(io)?)?,
        None => ExperimentSpec::new(name, 0),
    };
    if !name.is_empty() {
        spec.name = name.to_string();
    }
    spec.d = c.dim.or(spec.d);
    spec.n = c.n.or(spec.n);
    spec.seed = c.seed.unwrap_or(spec.seed);
    spec.replicates = c.replicates.or(spec.replicates);
    spec.out = c.out.clone().or(spec.out);
    spec.method = c.method.clone().or(spec.method);
    Ok(spec)
}

fn parse_points(s: &str, dim: Option<usize>) -> Result<SpatialConfig> {
    let pts: Vec<Vec<f64>> = s
        .split_whitespace()
        .map(|p| p.split(',').map(|c| c.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("point `{p}`: {e}")))).collect())
        .collect::<Result<_>>()?;
    if pts.is_empty() {
        return Err(Error::InvalidArgument("no points".into()));
    }
    if let Some(d) = dim {
        if pts.iter().any(|p| p.len() != d) {
            return Err(Error::InvalidArgument(format!("points must have {d} coordinates")));
        }
    }
    SpatialConfig::singletons(pts)
}

fn table(spec: &ExperimentSpec, n: usize) -> Result<RateTable> {
    build_rate_table(&spec.measure.to_measure()?, n.max(2))
}

fn out_dir(spec: &ExperimentSpec) -> Result<PathBuf> {
    let dir = spec.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(io)?;
    Ok(dir)
}

fn csv_at(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(dir.join(name)).map_err(io)
}

fn norm_method(m: Option<&str>) -> Result<NormMethod> {
    Ok(match m.unwrap_or("auto") {
        "auto" => NormMethod::Auto,
        "quadrature" => NormMethod::Quadrature,
        "monte-carlo" => NormMethod::MonteCarlo,
        other => return Err(Error::InvalidArgument(format!("method `{other}` (auto | quadrature | monte-carlo)"))),
    })
}

fn forward_outputs(dir: &Path, runs: &[ForwardRun], n: usize) -> Result<()> {
    let mut traj = csv_at(dir, "trajectories.csv")?;
    let mut events = csv_at(dir, "events.csv")?;
    let mut jsonl = fs::File::create(dir.join("events.jsonl")).map_err(io)?;
    for (r, run) in runs.iter().enumerate() {
        write_trajectories_csv(&mut traj, r, run, r == 0)?;
        write_events_jsonl(run, &mut jsonl)?;
        let g = extract_genealogy(run, n.min(run.recorded_levels))?;
        write_events_csv(&mut events, r, &g.path, r == 0)?;
    }
    traj.flush().map_err(io)?;
    events.flush().map_err(io)?;
    Ok(())
}

fn run(top: Top) -> Result<bool> {
    let c = &top.common;
    match top.command {
        Command::Rates => {
            let spec = load_spec(c, "")?;
            let n = spec.n.unwrap_or(6);
            let t = table(&spec, n)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["n", "signature", "rate"]).map_err(io)?;
            for (m, s, r) in t.entries() {
                w.write_record([m.to_string(), s.to_string(), r.to_string()]).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(io)?;
            match &spec.out {
                Some(_) => fs::write(out_dir(&spec)?.join("rates.csv"), bytes).map_err(io)?,
                None => std::io::stdout().write_all(&bytes).map_err(io)?,
            }
            let rep = check_consistency(&t, 1e-10);
            eprintln!("consistency: {} ({} identities)", if rep.pass { "pass" } else { "FAIL" }, rep.checks.len());
            Ok(rep.pass)
        }
        Command::Normalization { points, grad } => {
            let spec = load_spec(c, "")?;
            let x = parse_points(&points, spec.d)?;
            let t = table(&spec, x.len())?;
            let opts = NormOptions {
                method: norm_method(spec.method.as_deref())?,
                seed: spec.seed,
                ..NormOptions::default()
            };
            let e = normalization_n(&x, &t, &opts)?;
            let mut out = serde_json::json!({
                "value": e.value,
                "std_error": e.std_error,
                "method": e.method,
                "near_diagonal": e.near_diagonal,
            });
            if grad {
                out["grad_log_n"] = serde_json::to_value(grad_log_n(&x, &t, &opts)?.grad).map_err(io)?;
            }
            println!("{}", serde_json::to_string_pretty(&out).map_err(io)?);
            Ok(true)
        }
        Command::SampleCoalescent { points, horizon, record_dt } => {
            let spec = load_spec(c, "")?;
            let x = parse_points(&points, spec.d)?;
            let t = table(&spec, x.len())?;
            let dir = out_dir(&spec)?;
            let (mut events, mut paths) = (csv_at(&dir, "events.csv")?, csv_at(&dir, "trajectories.csv")?);
            let method = spec.method.clone().unwrap_or_else(|| "exact".into());
            for r in 0..spec.replicates.unwrap_or(1) {
                let mut rng = stream_rng(spec.seed, r as u64);
                let path = match method.as_str() {
                    "exact" | "sir" => {
                        let scheme = if method == "exact" { Scheme::Exact } else { Scheme::Sir };
                        let df = sample_decorated_forest(&x, &t, scheme, &SamplerOptions::default(), &mut rng)?;
                        sample_paths(&df, &x, horizon, record_dt, &mut rng)?
                    }
                    "sde" | "sde-handoff" => {
                        let opts = SdeOptions {
                            horizon,
                            record_dt,
                            rule: if method == "sde" { MergeRule::Mean } else { MergeRule::ExactHandoff },
                            ..SdeOptions::default()
                        };
                        sde_sample(&x, &t, &opts, None, &mut rng)?
                    }
                    other => return Err(Error::InvalidArgument(format!("method `{other}` (exact | sir | sde | sde-handoff)"))),
                };
                write_events_csv(&mut events, r, &path, r == 0)?;
                write_paths_csv(&mut paths, r, &path, r == 0)?;
            }
            events.flush().map_err(io)?;
            paths.flush().map_err(io)?;
            Ok(true)
        }
        Command::SimulateCannings { population, family, tn, horizon, record_dt } => {
            let spec = load_spec(c, "")?;
            let law = if family == 2 {
                OffspringLaw::PairResampling { n: population }
            } else {
                OffspringLaw::DiracFamily { n: population, k: family }
            };
            let t_n = tn.unwrap_or((population * (population - 1) / 2) as f64);
            let n = spec.n.unwrap_or(2);
            let mut opts = RunOptions::new(spec.d.unwrap_or(1), horizon).record(record_dt, n);
            opts.seed = Some(spec.seed);
            let runs = (0..spec.replicates.unwrap_or(1))
                .map(|r| cannings_simulate(&law, t_n, &opts, &mut stream_rng(spec.seed, r as u64)))
                .collect::<Result<Vec<_>>>()?;
            forward_outputs(&out_dir(&spec)?, &runs, n)?;
            Ok(true)
        }
        Command::SimulateLookdown { horizon, record_dt } => {
            let spec = load_spec(c, "")?;
            let n = spec.n.unwrap_or(4);
            let m = spec.measure.to_measure()?;
            let mut opts = RunOptions::new(spec.d.unwrap_or(1), horizon).record(record_dt, n);
            opts.seed = Some(spec.seed);
            let runs = (0..spec.replicates.unwrap_or(1))
                .map(|r| lookdown_simulate(&m, n, &opts, &mut stream_rng(spec.seed, r as u64)))
                .collect::<Result<Vec<_>>>()?;
            forward_outputs(&out_dir(&spec)?, &runs, n)?;
            Ok(true)
        }
        Command::Reverse { horizon, record_dt } => {
            let spec = load_spec(c, "")?;
            let n = spec.n.unwrap_or(2);
            let t = table(&spec, n)?;
            let mut opts = ReversalOptions::new(horizon);
            let steps = (horizon / record_dt).round() as usize;
            opts.observe = (0..=steps).map(|k| (k as f64 * record_dt).min(horizon)).collect();
            let dir = out_dir(&spec)?;
            let (mut ep, mut obs) = (csv_at(&dir, "events.csv")?, csv_at(&dir, "trajectories.csv")?);
            for r in 0..spec.replicates.unwrap_or(1) {
                let run = simulate_reversal(&t, n, spec.d.unwrap_or(1), &opts, &mut stream_rng(spec.seed, r as u64))?;
                write_epochs_csv(&mut ep, r, &run, r == 0)?;
                write_observations_csv(&mut obs, r, &run, r == 0)?;
            }
            ep.flush().map_err(io)?;
            obs.flush().map_err(io)?;
            Ok(true)
        }
        Command::Check { experiment, quick } => {
            let names: Vec<&str> = if experiment == "all" { EXPERIMENTS.to_vec() } else { vec![experiment.as_str()] };
            let mut all = true;
            for name in names {
                let mut spec = load_spec(c, name)?;
                if quick {
                    spec.knobs.insert("quick".into(), 1.0);
                }
                if experiment == "all" {
                    spec.out = spec.out.map(|o| o.join(name));
                }
                let report = run_experiment(&spec)?;
                print!("{}", summary(&report));
                eprint!("{}", runtimes(&report));
                all &= report.pass;
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    match run(Top::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
