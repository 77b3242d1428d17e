//! Seeded experiments: single runs with exact snapshots, batches over fresh
//! GARNET instances, paired comparisons and record export.
//!
//! Run `i` of a batch uses seed `base_seed + i` for its GARNET instance, its
//! feature set and its interaction streams. Two arms compared on the same
//! experiment therefore see identical instances, identical transition
//! uniforms and identical reward noise.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actor_critic::{step, AgentState, AlgoConfig};
use crate::error::{Error, Result};
use crate::linalg::vecs_to_matrix;
use crate::mdp::{GarnetSpec, Mdp};
use crate::oracle::OracleBundle;
use crate::policy::{FeatureMode, FeatureSet};
use crate::rng::RunStreams;

pub const CONFIG_VERSION: u32 = 1;
/// Snapshots per run when no stride is configured.
pub const DEFAULT_SNAPSHOTS: u64 = 200;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureOptions {
    pub mode: FeatureMode,
    pub normalize_columns: bool,
    /// Explicit `|X| × L` basis shared by every run; overrides `mode`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<Vec<f64>>>,
}

impl FeatureOptions {
    pub fn build(&self, spec: &GarnetSpec, seed: u64) -> Result<FeatureSet> {
        let fs = match &self.phi {
            Some(rows) => {
                let phi: DMatrix<f64> = vecs_to_matrix(rows, "features.phi")?;
                if phi.nrows() != spec.states {
                    return Err(Error::param(format!(
                        "explicit basis has {} rows for {} states",
                        phi.nrows(),
                        spec.states
                    )));
                }
                FeatureSet::from_matrix(phi, spec.actions)?
            }
            None => FeatureSet::build(spec, seed, self.mode)?,
        };
        Ok(if self.normalize_columns { fs.normalized() } else { fs })
    }
}

/// A complete, versioned experiment description (the TOML config file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub version: u32,
    pub seed: u64,
    pub n_runs: usize,
    pub n_steps: u64,
    /// Steps between exact snapshots; 0 selects `n_steps / 200`.
    #[serde(default)]
    pub record_stride: u64,
    /// Use the instance of `seed` for every run instead of a fresh one.
    #[serde(default)]
    pub shared_instance: bool,
    pub garnet: GarnetSpec,
    #[serde(default)]
    pub features: FeatureOptions,
    #[serde(default)]
    pub agent: AlgoConfig,
}

impl Experiment {
    /// Desk-scale defaults: 20 runs of 2·10⁵ steps.
    pub fn new(garnet: GarnetSpec, agent: AlgoConfig, seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed,
            n_runs: 20,
            n_steps: 200_000,
            record_stride: 0,
            shared_instance: false,
            garnet,
            features: FeatureOptions::default(),
            agent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Format(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.n_runs == 0 || self.n_steps == 0 {
            return Err(Error::param("n_runs and n_steps must be at least 1"));
        }
        if self.record_stride > self.n_steps {
            return Err(Error::param("record_stride exceeds n_steps"));
        }
        self.garnet.validate()?;
        self.agent.validate()
    }

    pub fn stride(&self) -> u64 {
        if self.record_stride == 0 {
            (self.n_steps / DEFAULT_SNAPSHOTS).max(1)
        } else {
            self.record_stride
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// The GARNET instance and features of run `run`.
    pub fn instance(&self, run: usize) -> Result<(Mdp, FeatureSet)> {
        let seed = if self.shared_instance { self.seed } else { self.run_seed(run) };
        let mdp = Mdp::garnet(&self.garnet, seed)?;
        let fs = self.features.build(&self.garnet, seed)?;
        Ok((mdp, fs))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let exp: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn with_agent(&self, agent: &AlgoConfig) -> Self {
        Self {
            agent: agent.clone(),
            ..self.clone()
        }
    }
}

/// One strided observation of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub n: u64,
    pub eta_tilde: f64,
    /// Exact η(θ_n).
    pub eta_exact: f64,
    /// `‖∇η(θ_n)‖₂`.
    pub grad_norm: f64,
    /// `‖w_n − w*(θ_n)‖₂`, measured modulo the constant direction when the
    /// basis represents constants.
    pub w_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Rejected GARNET draws before the instance was accepted.
    pub instance_retries: u32,
    pub samples: Vec<Sample>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

fn snapshot(mdp: &Mdp, fs: &FeatureSet, state: &AgentState, lambda: f64) -> Result<Sample> {
    let bundle = OracleBundle::evaluate(mdp, fs, &state.theta, lambda)?;
    Ok(Sample {
        n: state.n,
        eta_tilde: state.eta_tilde,
        eta_exact: bundle.eta,
        grad_norm: bundle.grad_norm(),
        w_dist: fs.quotient_constant(&(&state.w - &bundle.w_star_td)).norm(),
    })
}

/// Runs `n_steps` of the configured algorithm from the zero initialization in
/// state 0, with exact snapshots at `n = 0, stride, 2·stride, ...`.
pub fn run_single(
    mdp: &Mdp,
    fs: &FeatureSet,
    config: &AlgoConfig,
    seed: u64,
    n_steps: u64,
    stride: u64,
) -> Result<RunRecord> {
    config.validate()?;
    if stride == 0 {
        return Err(Error::param("snapshot stride must be positive"));
    }
    let start = Instant::now();
    let lambda = config.effective_lambda();
    let mut state = AgentState::new(fs, 0);
    let mut streams = RunStreams::new(seed);
    let mut samples = Vec::with_capacity((n_steps / stride + 1) as usize);
    samples.push(snapshot(mdp, fs, &state, lambda)?);
    for k in 1..=n_steps {
        step(&mut state, mdp, fs, config, &mut streams)?;
        if k % stride == 0 {
            samples.push(snapshot(mdp, fs, &state, lambda)?);
        }
    }
    Ok(RunRecord {
        run: 0,
        seed,
        instance_retries: mdp.origin().map_or(0, |o| o.retries),
        samples,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: u64,
    pub eta_tilde_mean: f64,
    pub eta_exact_mean: f64,
    /// Standard error of the mean; absent for a single run.
    pub eta_exact_se: Option<f64>,
    pub grad_norm_mean: f64,
    pub w_dist_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_runs: usize,
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    fn std_error(&self) -> Option<f64> {
        (self.count > 1).then(|| (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt())
    }
}

/// Per-stride means and standard errors across runs sharing one sample grid.
pub fn aggregate(records: &[RunRecord], config_hash: &str) -> Result<BatchSummary> {
    let first = records.first().ok_or_else(|| Error::param("no runs to aggregate"))?;
    let grid: Vec<u64> = first.samples.iter().map(|s| s.n).collect();
    for r in records {
        if r.samples.len() != grid.len() || r.samples.iter().zip(&grid).any(|(s, &n)| s.n != n) {
            return Err(Error::param(format!("run {} has a different sample grid", r.run)));
        }
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut m = [Moments::default(); 4];
            for r in records {
                let s = &r.samples[k];
                for (acc, v) in m.iter_mut().zip([s.eta_tilde, s.eta_exact, s.grad_norm, s.w_dist]) {
                    acc.push(v);
                }
            }
            SummaryRow {
                n,
                eta_tilde_mean: m[0].mean,
                eta_exact_mean: m[1].mean,
                eta_exact_se: m[1].std_error(),
                grad_norm_mean: m[2].mean,
                w_dist_mean: m[3].mean,
            }
        })
        .collect();
    Ok(BatchSummary {
        n_runs: records.len(),
        config_hash: config_hash.to_string(),
        rows,
        failures: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub summary: BatchSummary,
    pub records: Vec<RunRecord>,
}

fn execute_run(exp: &Experiment, agent: &AlgoConfig, run: usize) -> Result<RunRecord> {
    let seed = exp.run_seed(run);
    let wrap = |source: Error| Error::Run {
        run,
        seed,
        source: Box::new(source),
    };
    let (mdp, fs) = exp.instance(run).map_err(wrap)?;
    let mut record = run_single(&mdp, &fs, agent, seed, exp.n_steps, exp.stride()).map_err(wrap)?;
    record.run = run;
    Ok(record)
}

fn failure(run: usize, seed: u64, err: &Error) -> RunFailure {
    RunFailure {
        run,
        seed,
        message: err.to_string(),
    }
}

/// Runs every seed of the experiment in parallel. Failed runs are listed in
/// the summary; the call fails only when no run succeeds.
pub fn run_batch(exp: &Experiment) -> Result<Batch> {
    exp.validate()?;
    let results: Vec<Result<RunRecord>> = (0..exp.n_runs)
        .into_par_iter()
        .map(|run| execute_run(exp, &exp.agent, run))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (run, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => records.push(r),
            Err(e) => {
                failures.push(failure(run, exp.run_seed(run), &e));
                first_error.get_or_insert(e);
            }
        }
    }
    if records.is_empty() {
        return Err(first_error.expect("at least one run"));
    }
    let mut summary = aggregate(&records, &exp.hash())?;
    summary.failures = failures;
    Ok(Batch { summary, records })
}

/// Per-stride mean and standard error of the paired difference `a − b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub n: u64,
    pub mean: f64,
    pub se: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub a: Batch,
    pub b: Batch,
    /// Exact-η differences over runs where both arms succeeded.
    pub diff: Vec<DiffRow>,
}

/// Runs both arms on identical instances and streams.
pub fn compare_algorithms(exp: &Experiment, arm_a: &AlgoConfig, arm_b: &AlgoConfig) -> Result<Comparison> {
    let exp_a = exp.with_agent(arm_a);
    let exp_b = exp.with_agent(arm_b);
    let a = run_batch(&exp_a)?;
    let b = run_batch(&exp_b)?;

    let paired: Vec<(&RunRecord, &RunRecord)> = a
        .records
        .iter()
        .filter_map(|ra| b.records.iter().find(|rb| rb.run == ra.run).map(|rb| (ra, rb)))
        .collect();
    if paired.is_empty() {
        return Err(Error::param("no run succeeded in both arms"));
    }
    let diff = (0..paired[0].0.samples.len())
        .map(|k| {
            let mut m = Moments::default();
            for (ra, rb) in &paired {
                m.push(ra.samples[k].eta_exact - rb.samples[k].eta_exact);
            }
            DiffRow {
                n: paired[0].0.samples[k].n,
                mean: m.mean,
                se: m.std_error(),
            }
        })
        .collect();
    Ok(Comparison { a, b, diff })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: [&str; 6] = [
    "n",
    "eta_tilde_mean",
    "eta_exact_mean",
    "eta_exact_se",
    "grad_norm_mean",
    "w_dist_mean",
];

const BATCH_FORMAT: &str = "tdac-batch";
const COMPARISON_FORMAT: &str = "tdac-comparison";

/// 17 significant digits, enough to recover every `f64` exactly.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn write_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::param("nothing to export"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            num(r.eta_tilde_mean),
            num(r.eta_exact_mean),
            opt_num(r.eta_exact_se),
            num(r.grad_norm_mean),
            num(r.w_dist_mean),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("not a number: {s:?}")))
    };
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != CSV_HEADER.len() {
                return Err(Error::Format(format!("row has {} columns", rec.len())));
            }
            Ok(SummaryRow {
                n: rec[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", &rec[0])))?,
                eta_tilde_mean: parse(&rec[1])?,
                eta_exact_mean: parse(&rec[2])?,
                eta_exact_se: if rec[3].is_empty() { None } else { Some(parse(&rec[3])?) },
                grad_norm_mean: parse(&rec[4])?,
                w_dist_mean: parse(&rec[5])?,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BatchExport {
    format: String,
    version: u32,
    config: Experiment,
    summary: BatchSummary,
}

#[derive(Serialize, Deserialize)]
struct ComparisonExport {
    format: String,
    version: u32,
    config: Experiment,
    a: BatchSummary,
    b: BatchSummary,
    a_config: AlgoConfig,
    b_config: AlgoConfig,
    diff: Vec<DiffRow>,
}

pub fn batch_to_json(exp: &Experiment, summary: &BatchSummary) -> Result<String> {
    if summary.rows.is_empty() {
        return Err(Error::param("nothing to export"));
    }
    let export = BatchExport {
        format: BATCH_FORMAT.into(),
        version: CONFIG_VERSION,
        config: exp.clone(),
        summary: summary.clone(),
    };
    Ok(serde_json::to_string_pretty(&export).expect("export serializes") + "\n")
}

/// Writes a batch summary as CSV or as JSON with the full config embedded.
pub fn export_records(
    exp: &Experiment,
    summary: &BatchSummary,
    format: ExportFormat,
    path: &Path,
) -> Result<()> {
    let bytes = match format {
        ExportFormat::Csv => {
            let mut buf = Vec::new();
            write_csv(&summary.rows, &mut buf)?;
            buf
        }
        ExportFormat::Json => batch_to_json(exp, summary)?.into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const COMPARISON_HEADER: [&str; 7] = [
    "n",
    "a_eta_exact_mean",
    "a_eta_exact_se",
    "b_eta_exact_mean",
    "b_eta_exact_se",
    "diff_mean",
    "diff_se",
];

pub fn write_comparison_csv<W: Write>(cmp: &Comparison, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_HEADER).map_err(csv_err)?;
    for ((ra, rb), d) in cmp.a.summary.rows.iter().zip(&cmp.b.summary.rows).zip(&cmp.diff) {
        w.write_record([
            d.n.to_string(),
            num(ra.eta_exact_mean),
            opt_num(ra.eta_exact_se),
            num(rb.eta_exact_mean),
            opt_num(rb.eta_exact_se),
            num(d.mean),
            opt_num(d.se),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn comparison_to_json(exp: &Experiment, cmp: &Comparison, a: &AlgoConfig, b: &AlgoConfig) -> String {
    let export = ComparisonExport {
        format: COMPARISON_FORMAT.into(),
        version: CONFIG_VERSION,
        config: exp.clone(),
        a: cmp.a.summary.clone(),
        b: cmp.b.summary.clone(),
        a_config: a.clone(),
        b_config: b.clone(),
        diff: cmp.diff.clone(),
    };
    serde_json::to_string_pretty(&export).expect("export serializes") + "\n"
}

/// `(n, mean, se)`.
type SeriesPoint = (u64, f64, Option<f64>);

/// Long-format series `series,n,mean,se` from a JSON export, one series per
/// arm (plus the paired difference for comparisons).
pub fn plot_series(json: &str) -> Result<String> {
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| Error::Format(format!("export: {e}")))?;
    let mut series: Vec<(String, Vec<SeriesPoint>)> = Vec::new();
    let eta = |s: &BatchSummary| s.rows.iter().map(|r| (r.n, r.eta_exact_mean, r.eta_exact_se)).collect();
    let bad = |e: serde_json::Error| Error::Format(format!("export: {e}"));
    match value.get("format").and_then(|f| f.as_str()) {
        Some(BATCH_FORMAT) => {
            let export: BatchExport = serde_json::from_value(value).map_err(bad)?;
            let label = format!("{:?}", export.config.agent.algorithm).to_lowercase();
            series.push((label, eta(&export.summary)));
        }
        Some(COMPARISON_FORMAT) => {
            let export: ComparisonExport = serde_json::from_value(value).map_err(bad)?;
            series.push(("a".into(), eta(&export.a)));
            series.push(("b".into(), eta(&export.b)));
            series.push((
                "a_minus_b".into(),
                export.diff.iter().map(|d| (d.n, d.mean, d.se)).collect(),
            ));
        }
        other => return Err(Error::Format(format!("unknown export format {other:?}"))),
    }
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["series", "n", "mean", "se"]).map_err(csv_err)?;
        for (name, points) in &series {
            for (n, mean, se) in points {
                w.write_record([name.clone(), n.to_string(), num(*mean), opt_num(*se)])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{average_reward, stationary_distribution};
    use crate::policy::FeatureMode;

    fn tiny_experiment(seed: u64) -> Experiment {
        let mut exp = Experiment::new(GarnetSpec::new(8, 3, 2, 0.1, 5, 2).unwrap(), AlgoConfig::default(), seed);
        exp.n_runs = 4;
        exp.n_steps = 2000;
        exp.record_stride = 500;
        exp
    }

    #[test]
    fn initial_snapshot_is_uniform_policy_reward() {
        let spec = GarnetSpec::small();
        let mdp = Mdp::garnet(&spec, 3).unwrap();
        let fs = FeatureSet::build(&spec, 3, FeatureMode::Garnet).unwrap();
        let rec = run_single(&mdp, &fs, &AlgoConfig::default(), 3, 10, 10).unwrap();
        let uniform = DMatrix::from_element(30, 4, 0.25);
        let p = mdp.transition_under_policy(&uniform).unwrap();
        let eta = average_reward(&stationary_distribution(&p).unwrap(), mdp.state_reward());
        assert_eq!(rec.samples[0].n, 0);
        assert!((rec.samples[0].eta_exact - eta).abs() < 1e-12);
        assert_eq!(rec.samples.len(), 2);
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = GarnetSpec::small();
        let mdp = Mdp::garnet(&spec, 5).unwrap();
        let fs = FeatureSet::build(&spec, 5, FeatureMode::Garnet).unwrap();
        let a = run_single(&mdp, &fs, &AlgoConfig::default(), 9, 3000, 100).unwrap();
        let b = run_single(&mdp, &fs, &AlgoConfig::default(), 9, 3000, 100).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn aggregation_matches_two_pass() {
        let batch = run_batch(&tiny_experiment(1)).unwrap();
        let runs = batch.records.len() as f64;
        for (k, row) in batch.summary.rows.iter().enumerate() {
            let vals: Vec<f64> = batch.records.iter().map(|r| r.samples[k].eta_exact).collect();
            let mean = vals.iter().sum::<f64>() / runs;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1.0);
            assert!((row.eta_exact_mean - mean).abs() <= 1e-12);
            assert!((row.eta_exact_se.unwrap() - (var / runs).sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_run_batch_has_no_standard_error() {
        let mut exp = tiny_experiment(2);
        exp.n_runs = 1;
        let batch = run_batch(&exp).unwrap();
        assert!(batch.summary.rows.iter().all(|r| r.eta_exact_se.is_none()));
        assert_eq!(batch.summary.rows[2].eta_exact_mean, batch.records[0].samples[2].eta_exact);
    }

    #[test]
    fn shared_instance_reuses_the_base_seed() {
        let mut exp = tiny_experiment(3);
        exp.shared_instance = true;
        assert_eq!(exp.instance(0).unwrap(), exp.instance(3).unwrap());
        exp.shared_instance = false;
        assert_ne!(exp.instance(0).unwrap().0, exp.instance(3).unwrap().0);
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let exp = tiny_experiment(4);
        let cmp = compare_algorithms(&exp, &exp.agent, &exp.agent).unwrap();
        assert!(cmp.diff.iter().all(|d| d.mean == 0.0));
    }

    #[test]
    fn swapping_arms_negates_difference() {
        let exp = tiny_experiment(5);
        let two = AlgoConfig::two_scale();
        let ab = compare_algorithms(&exp, &exp.agent, &two).unwrap();
        let ba = compare_algorithms(&exp, &two, &exp.agent).unwrap();
        for (x, y) in ab.diff.iter().zip(&ba.diff) {
            assert_eq!(x.mean, -y.mean);
            assert_eq!(x.se, y.se);
        }
        assert!(ab.diff.iter().skip(1).any(|d| d.mean != 0.0));
    }

    #[test]
    fn failures_are_reported_per_run() {
        let mut exp = tiny_experiment(6);
        exp.features.phi = Some(vec![vec![1.0, 0.0]; 8]);
        let err = run_batch(&exp).unwrap_err();
        assert!(matches!(err, Error::Run { run: 0, .. }), "{err}");
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let batch = run_batch(&tiny_experiment(7)).unwrap();
        let mut buf = Vec::new();
        write_csv(&batch.summary.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,eta_tilde_mean,eta_exact_mean,eta_exact_se,grad_norm_mean,w_dist_mean\n"));
        for line in text.lines() {
            assert_eq!(line.split(',').count(), 6);
        }
        assert_eq!(read_csv(&text).unwrap(), batch.summary.rows);
    }

    #[test]
    fn empty_export_is_rejected() {
        assert!(matches!(write_csv(&[], Vec::new()), Err(Error::Parameter(_))));
        let exp = tiny_experiment(0);
        let empty = BatchSummary {
            n_runs: 0,
            config_hash: exp.hash(),
            rows: Vec::new(),
            failures: Vec::new(),
        };
        assert!(batch_to_json(&exp, &empty).is_err());
    }

    #[test]
    fn json_export_round_trips_and_plots() {
        let exp = tiny_experiment(8);
        let batch = run_batch(&exp).unwrap();
        let json = batch_to_json(&exp, &batch.summary).unwrap();
        let back: BatchExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.config, exp);
        assert_eq!(back.summary, batch.summary);
        let series = plot_series(&json).unwrap();
        assert_eq!(series.lines().count(), 1 + batch.summary.rows.len());
        assert!(series.lines().nth(1).unwrap().starts_with("single,0,"));
    }

    #[test]
    fn config_toml_round_trip() {
        let mut exp = tiny_experiment(9);
        exp.features.phi = Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let text = exp.to_toml();
        assert_eq!(Experiment::from_toml(&text).unwrap(), exp);
        assert!(Experiment::from_toml(&text.replace("version = 1", "version = 2")).is_err());
        assert_ne!(exp.hash(), tiny_experiment(10).hash());
    }
}
