//! Running experiments: data preparation, repeated runs, summaries, sweeps
//! and reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, Policy, RawConfig};
use super::trace::{write_trace_file, TraceRecord};
use crate::baselines::{run_async, run_centralized, BaselineConfig, BaselineRun};
use crate::control::{run_protocol, Flag, ProtocolConfig, ProtocolOutcome, TauPolicy};
use crate::data::{generate, load_csv, partition, Dataset};
use crate::error::{Error, Result};
use crate::models::{LossModel, Sample};
use crate::resources::meter_for;
use crate::rng::{derive_seed, Stream};

/// Fraction of test samples with `sign(wᵀx) = y`, where `sign(0) = +1`.
pub fn compute_accuracy(model: &LossModel, w: &[f64], test: &[Sample]) -> Result<f64> {
    if !matches!(model, LossModel::SquaredSvm { .. }) {
        return Err(Error::config("accuracy is defined for the SVM model only"));
    }
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let mut correct = 0usize;
    for s in test {
        if s.x.len() != w.len() {
            return Err(Error::Dimension {
                expected: w.len(),
                got: s.x.len(),
            });
        }
        let margin: f64 = s.x.iter().zip(w).map(|(a, b)| a * b).sum();
        let pred = if margin >= 0.0 { 1.0 } else { -1.0 };
        if pred == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Training and test data of an experiment; fixed across repeats.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (ds, split_seed) = match &cfg.data {
        DataSource::Synthetic(spec) => (generate(spec)?, spec.seed),
        DataSource::Csv { path, .. } => (load_csv(path, cfg.data.csv_schema().expect("csv source"))?, cfg.seed),
    };
    let (train, test) = ds.split(cfg.train_fraction, derive_seed(split_seed, Stream::Split, 0))?;
    Ok(PreparedData { train, test })
}

/// Outcome of one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub repeat: u32,
    pub seed: u64,
    /// `F(w^f)` on the training set (`F(w(T))` for the baselines without `w^f`).
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub mean_tau: Option<f64>,
    pub iterations: u64,
    pub consumed: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

fn accuracy_of(model: &LossModel, w: &[f64], test: &[Sample]) -> Result<Option<f64>> {
    if matches!(model, LossModel::SquaredSvm { .. }) && !test.is_empty() {
        compute_accuracy(model, w, test).map(Some)
    } else {
        Ok(None)
    }
}

fn protocol_trace(out: &ProtocolOutcome, model: &LossModel, test: &[Sample]) -> Result<Vec<TraceRecord>> {
    out.records
        .iter()
        .map(|r| {
            let accuracy = match &r.w_eval {
                Some(w) => accuracy_of(model, w, test)?,
                None => None,
            };
            Ok(TraceRecord {
                round: r.round,
                t: r.t,
                tau: r.tau,
                loss: r.loss,
                accuracy,
                rho: r.params.map(|p| p.rho),
                beta: r.params.map(|p| p.beta),
                delta: r.params.map(|p| p.delta),
                c_hat: r.c_hat.clone(),
                b_hat: r.b_hat.clone(),
                consumed: r.consumed.clone(),
                flags: r.flags.clone(),
            })
        })
        .collect()
}

fn baseline_trace(run: &BaselineRun, final_loss: f64, accuracy: Option<f64>) -> Vec<TraceRecord> {
    let mut rows: Vec<TraceRecord> = run
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| TraceRecord {
            round: k as u64 + 1,
            t: s.t,
            tau: 1,
            loss: None,
            accuracy: None,
            rho: None,
            beta: None,
            delta: None,
            c_hat: s.step_cost.clone(),
            b_hat: Vec::new(),
            consumed: s.consumed.clone(),
            flags: Vec::new(),
        })
        .collect();
    if run.batch_clamped {
        if let Some(first) = rows.first_mut() {
            first.flags.push(Flag::BatchClamped);
        }
    }
    rows.push(TraceRecord {
        round: rows.len() as u64 + 1,
        t: run.t,
        tau: 0,
        loss: Some(final_loss),
        accuracy,
        rho: None,
        beta: None,
        delta: None,
        c_hat: Vec::new(),
        b_hat: Vec::new(),
        consumed: run.consumed.clone(),
        flags: vec![Flag::Final],
    });
    rows
}

/// Seed of repeat `r`.
pub fn repeat_seed(cfg: &ExperimentConfig, r: u32) -> u64 {
    derive_seed(cfg.seed, Stream::Repeat, u64::from(r))
}

/// Runs a single repeat.
pub fn run_once(cfg: &ExperimentConfig, data: &PreparedData, repeat: u32) -> Result<RunResult> {
    let seed = repeat_seed(cfg, repeat);
    let model = &cfg.model;
    let train = &data.train.samples;
    let test = &data.test.samples;
    let mut meter = meter_for(&cfg.resources, seed);
    let baseline = BaselineConfig {
        eta: cfg.control.eta,
        mode: cfg.mode,
        init: cfg.init,
        seed,
    };
    let (final_loss, accuracy, mean_tau, iterations, consumed, trace) = match cfg.policy {
        Policy::Adaptive | Policy::Fixed(_) => {
            let parts = partition(&data.train, cfg.nodes, cfg.case, seed)?;
            let pcfg = ProtocolConfig {
                control: cfg.control,
                policy: match cfg.policy {
                    Policy::Fixed(t) => TauPolicy::Fixed(t),
                    _ => TauPolicy::Adaptive,
                },
                mode: cfg.mode,
                init: cfg.init,
                seed,
                parallel: cfg.parallel,
            };
            let out = run_protocol(&pcfg, &parts, model, &cfg.resources, meter.as_mut())?;
            let loss = model.subset_loss(&out.w_f, train, None)?;
            let acc = accuracy_of(model, &out.w_f, test)?;
            let taus: Vec<f64> = out
                .records
                .iter()
                .filter(|r| r.tau > 0)
                .map(|r| f64::from(r.tau))
                .collect();
            let mean_tau = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
            let trace = protocol_trace(&out, model, test)?;
            (loss, acc, mean_tau, out.t, out.consumed, trace)
        }
        Policy::Centralized => {
            let run = run_centralized(&baseline, train, model, &cfg.resources, meter.as_mut())?;
            let loss = model.subset_loss(&run.w, train, None)?;
            let acc = accuracy_of(model, &run.w, test)?;
            let trace = baseline_trace(&run, loss, acc);
            (loss, acc, None, run.t, run.consumed, trace)
        }
        Policy::Async => {
            let parts = partition(&data.train, cfg.nodes, cfg.case, seed)?;
            let run = run_async(&baseline, &parts, model, &cfg.resources)?;
            let loss = model.subset_loss(&run.w, train, None)?;
            let acc = accuracy_of(model, &run.w, test)?;
            let trace = baseline_trace(&run, loss, acc);
            (loss, acc, None, run.t, run.consumed, trace)
        }
    };
    Ok(RunResult {
        repeat,
        seed,
        final_loss,
        accuracy,
        mean_tau,
        iterations,
        consumed,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub repeat: u32,
    pub seed: u64,
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub mean_tau: Option<f64>,
    pub iterations: u64,
    pub consumed: Vec<f64>,
}

/// Averages over the repeats of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub policy: String,
    pub model: String,
    pub case: u8,
    pub mode: String,
    pub nodes: usize,
    pub repeats: u32,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    pub mean_accuracy: Option<f64>,
    pub mean_tau: Option<f64>,
    pub mean_iterations: f64,
    pub mean_consumed: Vec<f64>,
    pub runs: Vec<RunSummary>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, runs: &[RunResult]) -> Self {
        let losses: Vec<f64> = runs.iter().map(|r| r.final_loss).collect();
        let m = mean(&losses);
        let var = losses.iter().map(|l| (l - m).powi(2)).sum::<f64>() / losses.len() as f64;
        let n_res = runs.first().map_or(0, |r| r.consumed.len());
        let mean_consumed = (0..n_res)
            .map(|k| mean(&runs.iter().map(|r| r.consumed[k]).collect::<Vec<_>>()))
            .collect();
        Self {
            name: cfg.name.clone(),
            policy: cfg.policy.label(),
            model: cfg.model.kind().name().to_string(),
            case: cfg.case.index(),
            mode: match cfg.mode {
                crate::engine::Mode::Dgd => "dgd".into(),
                crate::engine::Mode::Sgd { batch_size } => format!("sgd:{batch_size}"),
            },
            nodes: cfg.nodes,
            repeats: runs.len() as u32,
            mean_final_loss: m,
            std_final_loss: var.sqrt(),
            mean_accuracy: mean_opt(runs.iter().map(|r| r.accuracy)),
            mean_tau: mean_opt(runs.iter().map(|r| r.mean_tau)),
            mean_iterations: mean(&runs.iter().map(|r| r.iterations as f64).collect::<Vec<_>>()),
            mean_consumed,
            runs: runs
                .iter()
                .map(|r| RunSummary {
                    repeat: r.repeat,
                    seed: r.seed,
                    final_loss: r.final_loss,
                    accuracy: r.accuracy,
                    mean_tau: r.mean_tau,
                    iterations: r.iterations,
                    consumed: r.consumed.clone(),
                })
                .collect(),
        }
    }
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "name",
    "policy",
    "model",
    "case",
    "mode",
    "nodes",
    "repeats",
    "mean_final_loss",
    "std_final_loss",
    "mean_accuracy",
    "mean_tau",
    "mean_iterations",
    "mean_consumed",
];

fn summary_row(s: &Summary) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        s.name.clone(),
        s.policy.clone(),
        s.model.clone(),
        s.case.to_string(),
        s.mode.clone(),
        s.nodes.to_string(),
        s.repeats.to_string(),
        s.mean_final_loss.to_string(),
        s.std_final_loss.to_string(),
        opt(s.mean_accuracy),
        opt(s.mean_tau),
        s.mean_iterations.to_string(),
        s.mean_consumed.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
    ]
}

/// Writes `summary.csv` and `summary.json` into `dir`.
pub fn write_summaries(dir: &Path, summaries: &[Summary]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::config(format!("{}: {e}", csv_path.display())))?;
    let werr = |e: csv::Error| Error::config(format!("{}: {e}", csv_path.display()));
    w.write_record(SUMMARY_COLUMNS).map_err(werr)?;
    for s in summaries {
        w.write_record(summary_row(s)).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summaries).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
}

/// Result of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: Summary,
    pub runs: Vec<RunResult>,
}

/// Runs all repeats (in parallel when `parallel` is set); with `out`, writes
/// `trace_<repeat>.csv` per repeat plus the summary files.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    let data = prepare_data(cfg)?;
    let runs: Vec<RunResult> = if cfg.parallel {
        (0..cfg.repeats)
            .into_par_iter()
            .map(|r| run_once(cfg, &data, r))
            .collect::<Result<_>>()?
    } else {
        (0..cfg.repeats)
            .map(|r| run_once(cfg, &data, r))
            .collect::<Result<_>>()?
    };
    let summary = Summary::new(cfg, &runs);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &runs {
            write_trace_file(dir.join(format!("trace_{}.csv", r.repeat)), &r.trace)?;
        }
        write_summaries(dir, std::slice::from_ref(&summary))?;
    }
    Ok(ExperimentOutput { summary, runs })
}

/// A parsed sweep file: a base config and one override line per run.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub base: RawConfig,
    pub out: Option<PathBuf>,
    pub runs: Vec<RawConfig>,
}

impl Sweep {
    /// Sweep files start with `base = <config path>` (relative to the sweep
    /// file), optionally `out = <dir>`, followed by lines of
    /// whitespace-separated `key=value` overrides, one run per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut base = None;
        let mut out = None;
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let header = line.split_once('=').map(|(k, v)| (k.trim(), v.trim()));
            match header {
                Some(("base", v)) => {
                    base = Some(RawConfig::load(dir.join(v))?);
                }
                Some(("out", v)) => out = Some(dir.join(v)),
                _ => lines.push((i + 1, line.to_string())),
            }
        }
        let base = base.ok_or_else(|| Error::config(format!("{}: missing `base = <config>` line", path.display())))?;
        let runs = lines
            .into_iter()
            .map(|(n, l)| {
                let mut raw = base.clone();
                raw.apply_overrides(&l)
                    .map_err(|e| Error::config(format!("{} line {n}: {e}", path.display())))?;
                Ok(raw)
            })
            .collect::<Result<_>>()?;
        Ok(Self { base, out, runs })
    }
}

/// Runs every line of a sweep; returns one summary per run. Output goes to
/// `out` (or the sweep's `out` line): `run_<i>/` per run plus combined
/// summary files.
pub fn run_sweep(path: impl AsRef<Path>, out: Option<&Path>) -> Result<Vec<Summary>> {
    let sweep = Sweep::load(path)?;
    let out = out.map(Path::to_path_buf).or(sweep.out.clone());
    let mut summaries = Vec::new();
    for (i, raw) in sweep.runs.iter().enumerate() {
        let mut raw = raw.clone();
        if !raw.0.contains_key("name") || sweep.base.0.get("name") == raw.0.get("name") {
            raw.set("name", format!("run_{i}"));
        }
        let cfg = ExperimentConfig::from_raw(&raw)?;
        let dir = out.as_ref().map(|d| d.join(format!("run_{i}")));
        summaries.push(run_experiment(&cfg, dir.as_deref())?.summary);
    }
    if let Some(d) = &out {
        write_summaries(d, &summaries)?;
    }
    Ok(summaries)
}

/// Renders `DIR/summary.csv` as an aligned text table.
pub fn report(dir: impl AsRef<Path>) -> Result<String> {
    let path = dir.as_ref().join("summary.csv");
    let mut rd = csv::Reader::from_path(&path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::config(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = vec![header];
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = (0..ncol)
            .map(|c| format!("{:<w$}", r.get(c).map_or("", String::as_str), w = widths[c]))
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
        if i == 0 {
            s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            s.push('\n');
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svm_samples() -> Vec<Sample> {
        vec![
            Sample::new(vec![1.0, 0.0], 1.0),
            Sample::new(vec![2.0, 1.0], 1.0),
            Sample::new(vec![-1.0, 0.5], -1.0),
            Sample::new(vec![0.0, -3.0], -1.0),
        ]
    }

    #[test]
    fn accuracy_examples() {
        let m = LossModel::svm(0.1).unwrap();
        let test = svm_samples();
        assert_eq!(compute_accuracy(&m, &[1.0, 0.5], &test).unwrap(), 1.0);
        // w = 0 predicts +1 everywhere
        assert_eq!(compute_accuracy(&m, &[0.0, 0.0], &test).unwrap(), 0.5);
        let a = compute_accuracy(&m, &[1.0, -0.2], &test).unwrap();
        let b = compute_accuracy(&m, &[-1.0, 0.2], &test).unwrap();
        assert_eq!(a + b, 1.0);
        assert!(compute_accuracy(&LossModel::LinearRegression, &[0.0, 0.0], &test).is_err());
    }

    #[test]
    fn repeats_are_deterministic() {
        let cfg = ExperimentConfig::parse(
            "data.samples = 200\ndata.dim = 4\nrepeats = 2\nresources.budget = 2\nmode.batch_size = 5",
        )
        .unwrap();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.runs, b.runs);
        assert_ne!(a.runs[0].seed, a.runs[1].seed);
    }

    #[test]
    fn fixed_one_and_centralized_agree_on_replicated_dgd() {
        // both converge to the same optimum on identical data
        let base = "model.lambda = 0.5\ndata.samples = 100\ndata.dim = 3\ncase = 3\nmode = dgd\ncontrol.eta = 0.5\nresources.budget = 60\nresources.noise = false\n";
        let fixed = ExperimentConfig::parse(&format!("{base}policy = fixed:1")).unwrap();
        let central = ExperimentConfig::parse(&format!("{base}policy = centralized")).unwrap();
        let a = run_experiment(&fixed, None).unwrap().summary.mean_final_loss;
        let b = run_experiment(&central, None).unwrap().summary.mean_final_loss;
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }

    #[test]
    fn summary_consumption_matches_trace() {
        let cfg = ExperimentConfig::parse("data.samples = 200\ndata.dim = 4\nresources.budget = 3").unwrap();
        let out = run_experiment(&cfg, None).unwrap();
        let run = &out.runs[0];
        assert_eq!(run.trace.last().unwrap().consumed, run.consumed);
        assert!(run.trace.last().unwrap().flags.contains(&Flag::Final));
        assert_eq!(out.summary.mean_consumed, run.consumed);
    }
}
