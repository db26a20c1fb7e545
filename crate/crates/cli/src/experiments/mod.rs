//! Named validation experiments and their report plumbing.
//!
//! Each experiment records deterministic checks and statistical tests into a
//! [`Ctx`]. Statistical tests that fail are retried once: the whole
//! experiment reruns from `child_seed(seed, 1)` with `attempt = 1`, skipping
//! its deterministic parts, and the second verdict replaces the first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use xicoal::rates::MeasureSpec;
use xicoal::rng::child_seed;
use xicoal::{Error, Result};

use crate::stats::TestStat;

mod consistency;
mod drift;
mod duality;
mod kernels;
mod markov;
mod rates;
mod reversal;
mod wright_malecot;

/// Significance level of every statistical test.
pub const ALPHA: f64 = 0.01;

pub const EXPERIMENTS: [&str; 8] = [
    "rates-recursion",
    "kernels",
    "consistency",
    "wright-malecot",
    "duality",
    "drift-scaling",
    "reversal-stationarity",
    "markov-resample",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "MeasureSpec::kingman")]
    pub measure: MeasureSpec,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Option<String>,
    /// Experiment-specific numeric settings, e.g. `quick = 1`.
    #[serde(default)]
    pub knobs: BTreeMap<String, f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(name: &str, seed: u64) -> Self {
        ExperimentSpec {
            name: name.to_string(),
            measure: MeasureSpec::kingman(),
            d: None,
            n: None,
            horizon: None,
            replicates: None,
            seed,
            method: None,
            knobs: BTreeMap::new(),
            out: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("experiment spec: {e}")))
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == Some(0) {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidArgument(format!("horizon {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    /// Pass threshold on the statistic, for deterministic checks.
    pub threshold: Option<f64>,
    pub p_value: Option<f64>,
    pub pass: bool,
    pub statistical: bool,
    pub retried: bool,
    pub note: String,
    /// Wall-clock seconds; kept out of `report.json` so reports are reproducible.
    #[serde(skip)]
    pub runtime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub experiment: String,
    pub seed: u64,
    pub tests: Vec<TestResult>,
    /// Reported, never gating.
    pub diagnostics: Vec<TestResult>,
    pub pass: bool,
}

impl TestReport {
    pub fn test(&self, name: &str) -> Option<&TestResult> {
        self.tests.iter().find(|t| t.name == name)
    }
}

/// Recorder handed to an experiment body.
pub struct Ctx<'a> {
    pub spec: &'a ExperimentSpec,
    pub seed: u64,
    pub attempt: u32,
    tests: Vec<TestResult>,
    diagnostics: Vec<TestResult>,
    samples: Vec<[String; 4]>,
    files: BTreeMap<String, csv::Writer<Vec<u8>>>,
    clock: Instant,
}

impl<'a> Ctx<'a> {
    fn new(spec: &'a ExperimentSpec, seed: u64, attempt: u32) -> Self {
        Ctx {
            spec,
            seed,
            attempt,
            tests: Vec::new(),
            diagnostics: Vec::new(),
            samples: Vec::new(),
            files: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    pub fn first_attempt(&self) -> bool {
        self.attempt == 0
    }

    pub fn knob(&self, name: &str, default: f64) -> f64 {
        self.spec.knobs.get(name).copied().unwrap_or(default)
    }

    pub fn quick(&self) -> bool {
        self.knob("quick", 0.0) != 0.0
    }

    pub fn replicates(&self, default: usize) -> usize {
        self.spec.replicates.unwrap_or(default)
    }

    /// Seed for an independent family of streams inside this attempt.
    pub fn stream_seed(&self, tag: u64) -> u64 {
        child_seed(self.seed, tag + 100)
    }

    fn lap(&mut self) -> f64 {
        let t = self.clock.elapsed().as_secs_f64();
        self.clock = Instant::now();
        t
    }

    /// Deterministic check: passes when `statistic ≤ threshold`.
    pub fn check(&mut self, name: &str, statistic: f64, threshold: f64, note: impl Into<String>) {
        let runtime = self.lap();
        self.tests.push(TestResult {
            name: name.into(),
            statistic,
            threshold: Some(threshold),
            p_value: None,
            pass: statistic <= threshold,
            statistical: false,
            retried: false,
            note: note.into(),
            runtime,
        });
    }

    /// Deterministic check with an explicit verdict.
    pub fn check_that(&mut self, name: &str, statistic: f64, pass: bool, note: impl Into<String>) {
        let runtime = self.lap();
        self.tests.push(TestResult {
            name: name.into(),
            statistic,
            threshold: None,
            p_value: None,
            pass,
            statistical: false,
            retried: false,
            note: note.into(),
            runtime,
        });
    }

    /// Statistical test at level [`ALPHA`].
    pub fn test(&mut self, name: &str, r: TestStat, note: impl Into<String>) {
        let t = self.stat_result(name, r, note.into());
        self.tests.push(t);
    }

    /// Agreement of two estimates within `3σ`, σ combining their standard
    /// errors; statistical (retried) when either side is Monte Carlo.
    pub fn within_3_sigma(&mut self, name: &str, a: f64, b: f64, sigma: f64, statistical: bool, note: impl Into<String>) {
        let z = (a - b).abs() / sigma;
        let p = 2.0 * (1.0 - Normal::standard().cdf(z));
        let runtime = self.lap();
        self.tests.push(TestResult {
            name: name.into(),
            statistic: z,
            threshold: Some(3.0),
            p_value: statistical.then_some(p),
            pass: z <= 3.0,
            statistical,
            retried: false,
            note: note.into(),
            runtime,
        });
    }

    pub fn diagnostic(&mut self, name: &str, r: TestStat, note: impl Into<String>) {
        let t = self.stat_result(name, r, note.into());
        self.diagnostics.push(t);
    }

    fn stat_result(&mut self, name: &str, r: TestStat, note: String) -> TestResult {
        TestResult {
            name: name.into(),
            statistic: r.statistic,
            threshold: None,
            p_value: Some(r.p_value),
            pass: r.p_value > ALPHA,
            statistical: true,
            retried: false,
            note,
            runtime: self.lap(),
        }
    }

    /// Raw sample values in long format.
    pub fn samples(&mut self, series: &str, variable: &str, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.samples.push([series.to_string(), i.to_string(), variable.to_string(), v.to_string()]);
        }
    }

    /// CSV artifact `name`; the closure gets the writer and whether the
    /// header is still due.
    pub fn with_csv<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut csv::Writer<Vec<u8>>, bool) -> Result<()>,
    {
        let fresh = !self.files.contains_key(name);
        let w = self.files.entry(name.to_string()).or_insert_with(|| csv::Writer::from_writer(Vec::new()));
        f(w, fresh)
    }
}

type Body = fn(&mut Ctx) -> Result<()>;

fn body(name: &str) -> Result<Body> {
    Ok(match name {
        "rates-recursion" => rates::run,
        "kernels" => kernels::run,
        "consistency" => consistency::run,
        "wright-malecot" => wright_malecot::run,
        "duality" => duality::run,
        "drift-scaling" => drift::run,
        "reversal-stationarity" => reversal::run,
        "markov-resample" => markov::run,
        _ => return Err(Error::InvalidArgument(format!("unknown experiment `{name}` (known: {})", EXPERIMENTS.join(", ")))),
    })
}

/// Run an experiment, retry failed statistical tests once, and write
/// artifacts when `spec.out` is set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<TestReport> {
    spec.validate()?;
    let f = body(&spec.name)?;
    let context = |e: Error| Error::Diagnostics(format!("{}: {e}", spec.name));

    let mut first = Ctx::new(spec, spec.seed, 0);
    f(&mut first).map_err(context)?;
    let mut tests = std::mem::take(&mut first.tests);
    let mut diagnostics = std::mem::take(&mut first.diagnostics);
    let mut samples: Vec<(u32, [String; 4])> = first.samples.drain(..).map(|s| (0, s)).collect();
    let files = std::mem::take(&mut first.files);

    if tests.iter().any(|t| t.statistical && !t.pass) {
        let mut second = Ctx::new(spec, child_seed(spec.seed, 1), 1);
        f(&mut second).map_err(context)?;
        for t in tests.iter_mut().filter(|t| t.statistical && !t.pass) {
            if let Some(r) = second.tests.iter().find(|r| r.name == t.name) {
                *t = TestResult { retried: true, ..r.clone() };
            }
        }
        for d in diagnostics.iter_mut() {
            if let Some(r) = second.diagnostics.iter().find(|r| r.name == d.name) {
                if !d.pass {
                    *d = TestResult { retried: true, ..r.clone() };
                }
            }
        }
        samples.extend(second.samples.drain(..).map(|s| (1, s)));
    }

    let pass = tests.iter().all(|t| t.pass);
    let report = TestReport {
        experiment: spec.name.clone(),
        seed: spec.seed,
        tests,
        diagnostics,
        pass,
    };
    if let Some(dir) = &spec.out {
        write_artifacts(dir, &report, &samples, files)?;
    }
    Ok(report)
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn write_artifacts(dir: &Path, report: &TestReport, samples: &[(u32, [String; 4])], files: BTreeMap<String, csv::Writer<Vec<u8>>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(report).map_err(io)?;
    fs::write(dir.join("report.json"), json + "\n").map_err(io)?;

    let mut w = csv::Writer::from_path(dir.join("samples.csv")).map_err(io)?;
    w.write_record(["series", "attempt", "replicate", "variable", "value"]).map_err(io)?;
    for (attempt, [series, rep, var, val]) in samples {
        w.write_record([series.as_str(), &attempt.to_string(), rep, var, val]).map_err(io)?;
    }
    w.flush().map_err(io)?;

    for (name, w) in files {
        let bytes = w.into_inner().map_err(io)?;
        fs::write(dir.join(name), bytes).map_err(io)?;
    }
    Ok(())
}

/// Human-readable summary, one line per test.
pub fn summary(report: &TestReport) -> String {
    let mut s = format!("{} (seed {}): {}\n", report.experiment, report.seed, if report.pass { "PASS" } else { "FAIL" });
    let line = |t: &TestResult, tag: &str| {
        let verdict = if t.pass { "pass" } else { "FAIL" };
        let crit = match (t.p_value, t.threshold) {
            (Some(p), _) => format!("p = {p:.4}"),
            (None, Some(th)) => format!("threshold {th:e}"),
            _ => String::new(),
        };
        let retry = if t.retried { " [retried]" } else { "" };
        format!("  {tag}{:<40} {verdict:<5} stat {:<12.6e} {crit}{retry}  {}\n", t.name, t.statistic, t.note)
    };
    for t in &report.tests {
        s += &line(t, "");
    }
    for t in &report.diagnostics {
        s += &line(t, "(diag) ");
    }
    s
}

/// Runtimes go to stderr since reports must be byte-reproducible.
pub fn runtimes(report: &TestReport) -> String {
    report
        .tests
        .iter()
        .chain(&report.diagnostics)
        .map(|t| format!("  {}: {:.2}s\n", t.name, t.runtime))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_experiment_is_an_error() {
        assert!(run_experiment(&ExperimentSpec::new("nope", 0)).is_err());
        let mut s = ExperimentSpec::new("rates-recursion", 0);
        s.replicates = Some(0);
        assert!(run_experiment(&s).is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s = ExperimentSpec::from_json(r#"{"name": "duality", "seed": 3, "knobs": {"quick": 1}}"#).unwrap();
        assert_eq!(s.measure, MeasureSpec::kingman());
        assert_eq!(s.seed, 3);
        assert_eq!(s.knobs["quick"], 1.0);
        assert!(ExperimentSpec::from_json(r#"{"name": "x", "bogus": 1}"#).is_err());
    }

    #[test]
    fn rates_recursion_passes_quickly() {
        let t = Instant::now();
        let r = run_experiment(&ExperimentSpec::new("rates-recursion", 0)).unwrap();
        assert!(r.pass, "{}", summary(&r));
        assert!(t.elapsed().as_secs_f64() < 1.0);
    }
}
