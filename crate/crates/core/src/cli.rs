//! Command-line front end. [`cli_dispatch`] maps an argument vector to an
//! exit code: 0 on success, 1 on runtime or verification failure and 2 on
//! usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::actor_critic::{AlgoConfig, Algorithm, RateParams};
use crate::error::{Error, Result};
use crate::harness::{
    comparison_to_json, compare_algorithms, plot_series, run_batch, write_comparison_csv, write_csv,
    batch_to_json, Experiment,
};
use crate::mdp::{GarnetSpec, Mdp};
use crate::policy::FeatureMode;
use crate::verify::{run_verification, VerifyOptions};

/// Default directory for outputs written without `--out`.
pub const OUT_DIR_ENV: &str = "TDAC_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tdac", version, about = "Average-reward actor-critic experiments on GARNET MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a GARNET instance and write it as JSON.
    Generate(GenerateArgs),
    /// Run a batch of one algorithm and export per-stride summaries.
    Run(RunArgs),
    /// Run the single-scale and two-scale algorithms on paired seeds.
    Compare(CompareArgs),
    /// Check the exact solvers on random instances.
    Verify(VerifyArgs),
    /// Turn a JSON export into a long-format series table.
    PlotData(PlotArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// States, actions, branching and reward noise, e.g. `30,4,2,0.1`.
    #[arg(long, value_name = "X,U,B,SIGMA")]
    spec: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgorithmArg {
    Single,
    TwoScale,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Single => Algorithm::Single,
            AlgorithmArg::TwoScale => Algorithm::TwoScale,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureModeArg {
    Garnet,
    ExcludeConstant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Experiment flags; each overrides the matching field of `--config`.
#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    seed: u64,
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_name = "X,U,B,SIGMA")]
    spec: Option<String>,
    /// Critic basis size L.
    #[arg(long)]
    basis: Option<usize>,
    /// Ones per feature row.
    #[arg(long)]
    active: Option<usize>,
    #[arg(long, value_enum)]
    feature_mode: Option<FeatureModeArg>,
    #[arg(long)]
    normalize_columns: bool,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    #[arg(long)]
    shared_instance: bool,
    #[arg(long)]
    gamma_eta: Option<f64>,
    #[arg(long)]
    gamma_w: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    b_w: Option<f64>,
    /// Critic (and single-scale) sequence `c0,c1,p`.
    #[arg(long, value_name = "C0,C1,P")]
    critic_rate: Option<String>,
    /// Baseline actor sequence `c0,c1,p`.
    #[arg(long, value_name = "C0,C1,P")]
    actor_rate: Option<String>,
    #[arg(long)]
    freeze_actor: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 5)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    #[arg(long, default_value_t = 2)]
    branching: usize,
    #[arg(long, default_value_t = 3)]
    basis: usize,
    #[arg(long, default_value_t = 2)]
    active: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Random parameter vectors per instance.
    #[arg(long, default_value_t = 5)]
    thetas: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// JSON export of `run` or `compare`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn experiment(&self, algorithm: Option<AlgorithmArg>) -> Result<Experiment> {
        let mut exp = match &self.config {
            Some(path) => Experiment::load(path)?,
            None => Experiment::new(GarnetSpec::small(), AlgoConfig::default(), self.seed),
        };
        exp.seed = self.seed;
        if let Some(text) = &self.spec {
            exp.garnet = GarnetSpec::parse(text, exp.garnet.basis, exp.garnet.active)?;
        }
        if let Some(l) = self.basis {
            exp.garnet.basis = l;
        }
        if let Some(l) = self.active {
            exp.garnet.active = l;
        }
        if let Some(mode) = self.feature_mode {
            exp.features.mode = match mode {
                FeatureModeArg::Garnet => FeatureMode::Garnet,
                FeatureModeArg::ExcludeConstant => FeatureMode::ExcludeConstant,
            };
        }
        exp.features.normalize_columns |= self.normalize_columns;
        exp.shared_instance |= self.shared_instance;
        if let Some(v) = self.runs {
            exp.n_runs = v;
        }
        if let Some(v) = self.steps {
            exp.n_steps = v;
        }
        if let Some(v) = self.stride {
            exp.record_stride = v;
        }
        let agent = &mut exp.agent;
        if let Some(a) = algorithm {
            agent.algorithm = a.into();
        }
        if let Some(v) = self.gamma_eta {
            agent.gamma_eta = v;
        }
        if let Some(v) = self.gamma_w {
            agent.gamma_w = v;
        }
        if let Some(v) = self.lambda {
            agent.lambda = v;
        }
        if let Some(v) = self.b_w {
            agent.b_w = v;
        }
        if let Some(text) = &self.critic_rate {
            agent.critic_rate = RateParams::parse(text)?;
        }
        if let Some(text) = &self.actor_rate {
            agent.actor_rate = RateParams::parse(text)?;
        }
        agent.freeze_actor |= self.freeze_actor;
        exp.validate()?;
        Ok(exp)
    }

    fn extension(&self) -> &'static str {
        match self.format {
            FormatArg::Csv => "csv",
            FormatArg::Json => "json",
        }
    }
}

/// `--out`, else `$TDAC_OUT_DIR/<default_name>`, else standard output.
fn destination(out: &Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
    out.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(|dir| Path::new(&dir).join(default_name)))
}

fn emit(bytes: &[u8], dest: Option<PathBuf>, stdout: &mut dyn Write) -> Result<()> {
    match dest {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        }
        None => stdout
            .write_all(bytes)
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn generate(args: &GenerateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let spec = GarnetSpec::parse(&args.spec, 1, 1)?;
    let mdp = Mdp::garnet(&spec, args.seed)?;
    let retries = mdp.origin().map_or(0, |o| o.retries);
    let name = format!(
        "garnet_{}_{}_{}_seed{}.json",
        spec.states, spec.actions, spec.branching, args.seed
    );
    emit(mdp.to_json().as_bytes(), destination(&args.out, &name), stdout)?;
    let _ = writeln!(stderr, "generated {}x{} instance after {retries} retries", spec.states, spec.actions);
    Ok(EXIT_OK)
}

fn run(args: &RunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let exp = args.exp.experiment(args.algorithm)?;
    let batch = run_batch(&exp)?;
    let bytes = match args.exp.format {
        FormatArg::Csv => {
            let mut buf = Vec::new();
            write_csv(&batch.summary.rows, &mut buf)?;
            buf
        }
        FormatArg::Json => batch_to_json(&exp, &batch.summary)?.into_bytes(),
    };
    let name = format!("run_{}_seed{}.{}", exp.hash(), exp.seed, args.exp.extension());
    emit(&bytes, destination(&args.exp.out, &name), stdout)?;
    for f in &batch.summary.failures {
        let _ = writeln!(stderr, "run {} (seed {}) failed: {}", f.run, f.seed, f.message);
    }
    Ok(if batch.summary.failures.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

fn compare(args: &CompareArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let exp = args.exp.experiment(None)?;
    let single = AlgoConfig {
        algorithm: Algorithm::Single,
        ..exp.agent.clone()
    };
    let two = AlgoConfig {
        algorithm: Algorithm::TwoScale,
        ..exp.agent.clone()
    };
    let cmp = compare_algorithms(&exp, &single, &two)?;
    let bytes = match args.exp.format {
        FormatArg::Csv => {
            let mut buf = Vec::new();
            write_comparison_csv(&cmp, &mut buf)?;
            buf
        }
        FormatArg::Json => comparison_to_json(&exp, &cmp, &single, &two).into_bytes(),
    };
    let name = format!("compare_{}_seed{}.{}", exp.hash(), exp.seed, args.exp.extension());
    emit(&bytes, destination(&args.exp.out, &name), stdout)?;
    let failures = cmp.a.summary.failures.len() + cmp.b.summary.failures.len();
    if failures > 0 {
        let _ = writeln!(stderr, "{failures} runs failed");
    }
    Ok(if failures == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn verify(args: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32> {
    let opts = VerifyOptions {
        branching: args.branching,
        basis: args.basis,
        active: args.active,
        thetas: args.thetas,
        ..VerifyOptions::new(args.states, args.actions, args.trials, args.seed)
    };
    let report = run_verification(&opts)?;
    write!(stdout, "{report}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn plot_data(args: &PlotArgs, stdout: &mut dyn Write) -> Result<i32> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let table = plot_series(&text)?;
    let stem = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("export");
    emit(table.as_bytes(), destination(&args.out, &format!("{stem}_series.csv")), stdout)?;
    Ok(EXIT_OK)
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn cli_dispatch_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a, stdout, stderr),
        Command::Run(a) => run(a, stdout, stderr),
        Command::Compare(a) => compare(a, stdout, stderr),
        Command::Verify(a) => verify(a, stdout),
        Command::PlotData(a) => plot_data(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Parameter(_) | Error::Format(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    cli_dispatch_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
