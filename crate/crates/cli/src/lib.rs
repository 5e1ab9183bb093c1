//! Implementation of the `brrace` command-line tool.
//!
//! Exit codes: 0 success, 1 bad input (config, flags, unreadable files),
//! 2 the run itself failed (faulted world, singular fit), 3 a scenario missed
//! its pass criterion.

pub mod export;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use brrace_core::config::Config;
use brrace_core::dynamics::{fit_basis, load_dataset_csv, NeuralNetModel, BASIS_NAMES};
use brrace_core::scenarios::Scenario;
use brrace_core::sim::{read_trace, run_race, run_replay, InputScript, RaceOutcome};
use brrace_core::{Error, TrackMap};

use export::Plot;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn run(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::input(e.to_string())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            let joined = base.join(&*path);
            *path = std::path::absolute(&joined).unwrap_or(joined);
        }
    }
}

/// Loads a config file (or the built-in default) and rewrites its relative
/// paths as absolute ones, so the effective config can be re-run from any
/// directory.
pub fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let base = cfg.base_dir.clone();
    absolutize(&base, &mut cfg.track.file);
    absolutize(&base, &mut cfg.race.controller_model);
    absolutize(&base, &mut cfg.race.plant_model);
    Ok(cfg)
}

/// Builds everything a run needs up front so missing files are reported as
/// input errors rather than mid-run.
fn preflight(cfg: &Config) -> Result<(), Failure> {
    cfg.validate()?;
    cfg.build_track()?;
    cfg.build_plant_model()?;
    cfg.build_controller_model()?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RaceArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    /// JSON input script, or a `.jsonl` trace to replay.
    pub script: Option<PathBuf>,
    pub out: PathBuf,
}

pub const TRACE_FILE: &str = "trace.jsonl";
pub const OUTCOME_FILE: &str = "outcome.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Runs one race and writes `trace.jsonl`, `outcome.json` and the effective
/// `config.toml` into `args.out`.
pub fn race(args: &RaceArgs) -> Result<RaceOutcome, Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.race.seed = seed;
    }
    if let Some(d) = args.duration {
        cfg.race.duration = d;
    }
    preflight(&cfg)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", args.out.display())))?;
    let trace = args.out.join(TRACE_FILE);

    let outcome = match &args.script {
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => {
            let rows = read_trace(p)?;
            cfg.race.duration = rows.len() as f64 * cfg.race.dt;
            run_replay(&cfg, &rows, Some(&trace))?
        }
        Some(p) => run_race(&cfg, Some(&InputScript::load(p)?), Some(&trace))?,
        None => run_race(&cfg, None, Some(&trace))?,
    };
    write_file(&args.out.join(CONFIG_FILE), &cfg.to_toml())?;
    let json = serde_json::to_string_pretty(&outcome).expect("outcome serialises");
    write_file(&args.out.join(OUTCOME_FILE), &(json + "\n"))?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Basis,
    Nn,
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub dataset: PathBuf,
    pub model: ModelKind,
    pub out: PathBuf,
    /// Network to evaluate; a fresh random one otherwise.
    pub init: Option<PathBuf>,
    pub hidden: [usize; 2],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub rows: usize,
    /// Per output channel, in `dv_x, dv_y, dyaw_rate, droll` order.
    pub rms: [f64; 4],
    pub condition: Option<f64>,
}

pub const OUTPUT_CHANNELS: [&str; 4] = ["dv_x", "dv_y", "dyaw_rate", "droll"];

impl fmt::Display for FitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows {}", self.rows)?;
        if let Some(c) = self.condition {
            writeln!(f, "condition {c:.6e}")?;
        }
        for (name, r) in OUTPUT_CHANNELS.iter().zip(self.rms) {
            writeln!(f, "rms {name} {r:.6e}")?;
        }
        Ok(())
    }
}

/// Fits a basis model in closed form, or evaluates a network's forward-pass
/// residual. Singular or too-short datasets exit with code 2.
pub fn fit(args: &FitArgs) -> Result<FitSummary, Failure> {
    let data = load_dataset_csv(&args.dataset)?;
    match args.model {
        ModelKind::Basis => {
            let report = fit_basis(&data).map_err(|e| match e {
                Error::SingularFit { .. } => Failure::run(format!(
                    "{e}; the {} basis functions ({}) need at least that many linearly independent rows",
                    BASIS_NAMES.len(),
                    BASIS_NAMES.join(", ")
                )),
                other => Failure::input(other.to_string()),
            })?;
            report.model.save(&args.out)?;
            Ok(FitSummary {
                rows: report.rows,
                rms: report.rms_residual,
                condition: Some(report.condition),
            })
        }
        ModelKind::Nn => {
            if data.is_empty() {
                return Err(Failure::run("dataset has no rows"));
            }
            let net = match &args.init {
                Some(p) => NeuralNetModel::load(p)?,
                None => NeuralNetModel::random(args.hidden, args.seed)?,
            };
            let mut sq = [0.0; 4];
            for (i, s) in data.iter().enumerate() {
                let pred = brrace_core::dynamics::nn_predict(&net, &s.state(), &s.control())
                    .map_err(|e| Failure::input(format!("dataset row {}: {e}", i + 1)))?
                    .as_array();
                for ((acc, p), t) in sq.iter_mut().zip(pred).zip(s.derivative().as_array()) {
                    *acc += (p - t) * (p - t);
                }
            }
            net.save(&args.out)?;
            Ok(FitSummary {
                rows: data.len(),
                rms: sq.map(|v| (v / data.len() as f64).sqrt()),
                condition: None,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceArgs {
    pub trace: PathBuf,
    pub plot: Plot,
    pub out: PathBuf,
    /// Config describing the track for `xy`; defaults to `config.toml` next
    /// to the trace, then to the built-in track.
    pub config: Option<PathBuf>,
}

/// Track the trace was recorded on, as far as it can be recovered.
fn trace_track(args: &TraceArgs) -> Result<TrackMap, Failure> {
    let sibling = args.trace.with_file_name(CONFIG_FILE);
    let path = match &args.config {
        Some(p) => Some(p.clone()),
        None => sibling.exists().then_some(sibling),
    };
    let cfg = load_config(path.as_deref())?;
    Ok(cfg.build_track()?)
}

pub fn trace(args: &TraceArgs) -> Result<usize, Failure> {
    let rows = read_trace(&args.trace)?;
    let io = |e: csv::Error| Failure::input(format!("cannot write {}: {e}", args.out.display()));
    let create = || {
        fs::File::create(&args.out).map_err(|e| Failure::input(format!("cannot write {}: {e}", args.out.display())))
    };
    match args.plot {
        Plot::Xy => write_file(&args.out, &export::render_xy(&rows, &trace_track(args)?))?,
        Plot::Speed => export::write_speed_csv(&rows, create()?).map_err(io)?,
        Plot::Costs => export::write_costs_csv(&rows, create()?).map_err(io)?,
    }
    Ok(rows.len())
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioArgs {
    pub scenarios: Vec<Scenario>,
    /// Run only the first `n` seeds of each scenario.
    pub seeds: Option<usize>,
    /// Traces, outcomes and the S3 plot go here when set.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub outcomes: Vec<RaceOutcome>,
    pub passed: usize,
    pub required: usize,
}

impl ScenarioResult {
    pub fn met(&self) -> bool {
        self.passed >= self.required
    }
}

/// Required passes when only `ran` of the scenario's seeds are run: the same
/// number of allowed misses as the full set.
fn required_of(s: Scenario, ran: usize) -> usize {
    let misses = s.seeds().len() - s.required();
    ran.saturating_sub(misses)
}

pub fn scenario(args: &ScenarioArgs, mut progress: impl FnMut(Scenario, &RaceOutcome, bool)) -> Result<Vec<ScenarioResult>, Failure> {
    let mut results = Vec::new();
    for &s in &args.scenarios {
        let mut seeds = s.seeds();
        if let Some(n) = args.seeds {
            seeds.truncate(n.max(1));
        }
        let dir = args.out.as_ref().map(|d| d.join(s.name()));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Failure::input(format!("cannot create {}: {e}", d.display())))?;
            write_file(&d.join(CONFIG_FILE), s.toml())?;
        }
        let mut outcomes = Vec::new();
        let mut passed = 0;
        for &seed in &seeds {
            let mut cfg = s.config();
            cfg.race.seed = seed;
            let trace = dir.as_ref().map(|d| d.join(format!("seed{seed:02}.jsonl")));
            let outcome = run_race(&cfg, None, trace.as_deref())?;
            let ok = s.run_passes(&outcome);
            passed += ok as usize;
            if let (Some(d), Some(t)) = (&dir, &trace) {
                let json = serde_json::to_string_pretty(&outcome).expect("outcome serialises");
                write_file(&d.join(format!("seed{seed:02}.outcome.json")), &json)?;
                if s == Scenario::S3 {
                    let rows = read_trace(t)?;
                    let svg = export::render_xy(&rows, &cfg.build_track()?);
                    write_file(&d.join(format!("seed{seed:02}.svg")), &svg)?;
                }
            }
            progress(s, &outcome, ok);
            outcomes.push(outcome);
        }
        results.push(ScenarioResult {
            scenario: s,
            required: required_of(s, seeds.len()),
            outcomes,
            passed,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_seed_runs_keep_the_miss_allowance() {
        assert_eq!(required_of(Scenario::S3, 20), 18);
        assert_eq!(required_of(Scenario::S3, 5), 3);
        assert_eq!(required_of(Scenario::S3, 1), 0);
        assert_eq!(required_of(Scenario::S2, 4), 4);
    }

    #[test]
    fn relative_model_paths_become_absolute() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[race]\nplant_model = \"m.json\"\n").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        let p = cfg.race.plant_model.unwrap();
        assert!(p.is_absolute());
        assert!(p.ends_with("m.json"));
    }
}
