//! `rap` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/schema error, 4 infeasible
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{max_error, run_sweep, SweepAxis, SweepSpec, Synthetic, WorkloadSpec};
use crate::projection::{Normalization, ProjectionConfig, RelaxedDataset};
use crate::queries::{random_workload, QueryKind, Workload};
use crate::rap::{run_rap, RapConfig, DEFAULT_N_PRIME};
use crate::rounding::{randomized_round, RoundingConfig, DEFAULT_OVERSAMPLE};
use crate::schema::{load_csv_with, DiscreteDataset, LoadOptions, Schema, DEFAULT_BINS};

#[derive(Debug, Parser)]
#[command(
    name = "rap",
    version,
    about = "Differentially private synthetic data via relaxed adaptive projection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample marginals and write a workload file.
    Workload(WorkloadArgs),
    /// Privately fit a relaxed synthetic dataset.
    Fit(FitArgs),
    /// Randomly round a relaxed dataset to categorical records.
    Round(RoundArgs),
    /// Compare synthetic data against the real data on a workload.
    Eval(EvalArgs),
    /// Run an experiment sweep and write a result table.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema JSON; inferred from the data when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Equal-width bins for wide numeric columns during schema inference (0 disables).
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

impl DataArgs {
    fn load(&self) -> Result<DiscreteDataset> {
        let schema = self.schema.as_ref().map(Schema::from_json_file).transpose()?;
        let options = LoadOptions {
            bin_numeric: (self.bins > 0).then_some(self.bins),
        };
        load_csv_with(&self.data, schema.as_ref(), options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Product,
    OneOutOfK,
}

impl From<KindArg> for QueryKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Product => QueryKind::Product,
            KindArg::OneOutOfK => QueryKind::OneOutOfK,
        }
    }
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Marginal arity.
    #[arg(long)]
    pub k: usize,
    /// Number of marginals to sample.
    #[arg(long)]
    pub marginals: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = KindArg::Product)]
    pub kind: KindArg,
    #[arg(long, default_value = "workload.json")]
    pub out: PathBuf,
    /// Also dump the compiled column-index arrays to this file.
    #[arg(long)]
    pub dump_queries: Option<PathBuf>,
}

/// `auto` (1/n²) or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaArg {
    Auto(AutoTag),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl FromStr for DeltaArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(DeltaArg::Auto(AutoTag::Auto));
        }
        s.parse::<f64>()
            .map(DeltaArg::Value)
            .map_err(|_| format!("expected 'auto' or a number, got '{s}'"))
    }
}

/// Optional fit settings read from `--config`; command-line flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub epsilon: Option<f64>,
    pub delta: Option<DeltaArg>,
    #[serde(rename = "T")]
    pub rounds: Option<usize>,
    #[serde(rename = "K")]
    pub queries_per_round: Option<usize>,
    pub n_prime: Option<usize>,
    pub seed: Option<u64>,
    pub no_noise: Option<bool>,
    pub normalization: Option<String>,
    pub learning_rate: Option<f64>,
    pub max_steps: Option<usize>,
    pub early_stop: Option<f64>,
    pub batch_size: Option<usize>,
    pub os_entropy: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct RapArgs {
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `auto` resolves to 1/n².
    #[arg(long)]
    pub delta: Option<DeltaArg>,
    /// Rounds; 1 answers every query at once.
    #[arg(long = "T")]
    pub rounds: Option<usize>,
    /// Queries selected per round.
    #[arg(long = "K")]
    pub queries_per_round: Option<usize>,
    #[arg(long = "n-prime")]
    pub n_prime: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip all noise (non-private run).
    #[arg(long)]
    pub no_noise: bool,
    /// sparsemax, clip or clip+sparsemax.
    #[arg(long)]
    pub normalization: Option<String>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub early_stop: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed mechanism noise from OS entropy (output is not reproducible).
    #[arg(long)]
    pub os_entropy: bool,
    /// JSON file with default values for the flags above.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl RapArgs {
    fn resolve(&self, n: usize) -> Result<RapConfig> {
        let file: FitFile = match &self.config {
            Some(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
            }
            None => FitFile::default(),
        };
        let defaults = RapConfig::default();
        let proj_defaults = ProjectionConfig::default();
        let normalization = match self.normalization.as_ref().or(file.normalization.as_ref()) {
            Some(s) => s.parse::<Normalization>()?,
            None => proj_defaults.normalization,
        };
        let delta = match self.delta.or(file.delta) {
            None | Some(DeltaArg::Auto(_)) => 1.0 / (n as f64 * n as f64),
            Some(DeltaArg::Value(v)) => v,
        };
        let config = RapConfig {
            rounds: self.rounds.or(file.rounds).unwrap_or(defaults.rounds),
            queries_per_round: self
                .queries_per_round
                .or(file.queries_per_round)
                .unwrap_or(defaults.queries_per_round),
            n_prime: self.n_prime.or(file.n_prime).unwrap_or(DEFAULT_N_PRIME),
            epsilon: self.epsilon.or(file.epsilon).unwrap_or(defaults.epsilon),
            delta: Some(delta),
            no_noise: self.no_noise || file.no_noise.unwrap_or(false),
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
            projection: ProjectionConfig {
                learning_rate: self
                    .learning_rate
                    .or(file.learning_rate)
                    .unwrap_or(proj_defaults.learning_rate),
                max_steps: self.max_steps.or(file.max_steps).unwrap_or(proj_defaults.max_steps),
                early_stop_rel: self
                    .early_stop
                    .or(file.early_stop)
                    .unwrap_or(proj_defaults.early_stop_rel),
                normalization,
                batch_size: self.batch_size.or(file.batch_size).unwrap_or(proj_defaults.batch_size),
                ..proj_defaults
            },
            os_entropy: self.os_entropy || file.os_entropy.unwrap_or(false),
            keep_snapshots: false,
        };
        if !config.no_noise {
            if !(config.epsilon > 0.0) {
                return Err(Error::InvalidArgument("--epsilon must be positive".into()));
            }
            if !(delta > 0.0 && delta <= 1.0) {
                return Err(Error::InvalidArgument("--delta must lie in (0, 1]".into()));
            }
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub workload: PathBuf,
    #[command(flatten)]
    pub rap: RapArgs,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Write the per-step loss trace as CSV (round, step, loss).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoundArgs {
    /// Relaxed dataset CSV written by `fit`.
    #[arg(long)]
    pub relaxed: PathBuf,
    /// Schema JSON written by `fit`.
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value_t = DEFAULT_OVERSAMPLE)]
    pub oversample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub workload: PathBuf,
    /// Synthetic records CSV (labels in the data's schema).
    #[arg(long, conflicts_with = "relaxed", required_unless_present = "relaxed")]
    pub synth: Option<PathBuf>,
    /// Relaxed dataset CSV.
    #[arg(long)]
    pub relaxed: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// epsilon, workload, n-prime or oversample.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Number of seeds, run as 0..seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Comma-separated K grid.
    #[arg(long = "K-grid", value_delimiter = ',')]
    pub grid_k: Vec<usize>,
    /// Comma-separated T grid.
    #[arg(long = "T-grid", value_delimiter = ',')]
    pub grid_t: Vec<usize>,
    /// Marginal arity of the sweep workload.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Marginals in the sweep workload.
    #[arg(long, default_value_t = 1)]
    pub marginals: usize,
    #[arg(long, default_value_t = 0)]
    pub workload_seed: u64,
    #[arg(long, value_enum, default_value_t = KindArg::Product)]
    pub kind: KindArg,
    #[command(flatten)]
    pub rap: RapArgs,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_workload(args: &WorkloadArgs) -> Result<()> {
    let data = args.data.load()?;
    let w = random_workload(data.schema(), args.k, args.marginals, args.seed, args.kind.into())?;
    w.write_json(&args.out)?;
    if let Some(path) = &args.dump_queries {
        write_json(path, &w.column_dump())?;
    }
    println!("m = {}", w.len());
    for (s, count) in w.marginals().iter().zip(w.counts_per_marginal()) {
        println!("marginal {s:?}: {count} queries");
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedFit<'a> {
    data: &'a Path,
    workload: &'a Path,
    n: usize,
    m: usize,
    #[serde(flatten)]
    config: &'a RapConfig,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data = args.data.load()?;
    let workload = Workload::read_json(&args.workload, data.schema())?;
    let mut config = args.rap.resolve(data.len())?;
    config.projection.record_trace = args.trace.is_some();
    let resolved = ResolvedFit {
        data: &args.data.data,
        workload: &args.workload,
        n: data.len(),
        m: workload.len(),
        config: &config,
    };
    println!("{}", serde_json::to_string_pretty(&resolved)?);

    let result = run_rap(&data, &workload, &config)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let result_path = args.out_dir.join("result.json");
    fs::write(&result_path, result.to_json()?).map_err(|e| Error::io(&result_path, e))?;
    result.dataset.write_csv(args.out_dir.join("relaxed.csv"))?;
    data.schema().to_json_file(args.out_dir.join("schema.json"))?;
    write_json(&args.out_dir.join("timing.json"), &result.timing)?;
    if let Some(path) = &args.trace {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(["round", "step", "loss"])?;
        for round in &result.rounds {
            for (step, loss) in round.loss_trace.iter().flatten().enumerate() {
                w.write_record([round.round.to_string(), step.to_string(), loss.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let report = max_error(&workload, &data, Synthetic::Relaxed(&result.dataset))?;
    eprintln!(
        "rho spent {:.6e} ({} ledger entries, private: {}); max error {:.4}, naive {:.4}",
        result.budget.rho_spent,
        result.ledger.len(),
        result.budget.private,
        report.max_error,
        report.naive_baseline
    );
    Ok(())
}

fn cmd_round(args: &RoundArgs) -> Result<()> {
    let schema = Schema::from_json_file(&args.schema)?;
    let relaxed = RelaxedDataset::read_csv(&args.relaxed, &schema)?;
    let synth = randomized_round(
        &relaxed,
        &RoundingConfig {
            oversample: args.oversample,
            seed: args.seed,
        },
    )?;
    synth.write_csv(&args.out)?;
    println!("wrote {} rows to {}", synth.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let data = args.data.load()?;
    let workload = Workload::read_json(&args.workload, data.schema())?;
    let report = match (&args.synth, &args.relaxed) {
        (Some(path), _) => {
            let synth = load_csv_with(path, Some(data.schema()), LoadOptions { bin_numeric: None })?;
            max_error(&workload, &data, Synthetic::Discrete(&synth))?
        }
        (None, Some(path)) => {
            let relaxed = RelaxedDataset::read_csv(path, data.schema())?;
            max_error(&workload, &data, Synthetic::Relaxed(&relaxed))?
        }
        (None, None) => return Err(Error::InvalidArgument("pass --synth or --relaxed".into())),
    };
    write_json(&args.out, &report)?;
    println!(
        "max error {} mean error {} naive baseline {} (m = {})",
        report.max_error, report.mean_error, report.naive_baseline, report.m
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let data = args.data.load()?;
    let base = args.rap.resolve(data.len())?;
    let spec = SweepSpec {
        axis: args.axis.parse::<SweepAxis>()?,
        values: args.values.clone(),
        seeds: (0..args.seeds).collect(),
        grid_k: args.grid_k.clone(),
        grid_t: args.grid_t.clone(),
    };
    let workload = WorkloadSpec {
        k: args.k,
        num_marginals: args.marginals,
        seed: args.workload_seed,
        kind: args.kind.into(),
    };
    println!("{}", serde_json::to_string_pretty(&(&spec, &workload, &base))?);
    let table = run_sweep(&data, &spec, &base, &workload)?;
    table.write_csv_file(&args.out)?;
    for s in table.summaries() {
        println!(
            "{} = {}: median max error {:.4} over {} runs (naive {:.4})",
            spec.axis, s.value, s.median_max_error, s.runs, s.naive_baseline
        );
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Workload(a) => cmd_workload(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Round(a) => cmd_round(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("RAP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
