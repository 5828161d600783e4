//! `coxmix`: synthetic cohorts, training, evaluation, cross-validation and
//! prediction for deep Cox mixtures.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use coxmix::dataset::MissingPolicy;
use coxmix::harness::{run_cv, run_eval, run_predict, run_synth, run_train, RunConfig};
use coxmix::metrics::{MetricsReport, POPULATION};
use coxmix::par::Parallelism;
use coxmix::synth::{crossing_config, ph_config, separated_config, SynthConfig};

#[derive(Parser)]
#[command(name = "coxmix", version, about = "Deep Cox mixtures for right-censored survival data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (cohort.csv) and its ground truth (truth.json).
    Synth(SynthArgs),
    /// Standardize, fit and save a model with its training log.
    Train(TrainArgs),
    /// Evaluate a saved model overall and per group with bootstrap standard errors.
    Eval(EvalArgs),
    /// K-fold cross-validation with pooled held-out predictions.
    Cv(CvArgs),
    /// Survival probabilities of a saved model at the requested horizons.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Two clusters with crossing survival curves.
    Crossing,
    /// Two well-separated clusters.
    Separated,
    /// One proportional-hazards cluster, beta = (1, -0.5, 0.25).
    Ph,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "crossing")]
    preset: Preset,
    /// Generator config as JSON; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Target censored fraction in [0, 0.95].
    #[arg(long)]
    censoring: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Shared {
    /// Run config as JSON. Flags given on the command line override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    time_col: Option<String>,
    /// Event indicator column (1 = event, 0 = censored).
    #[arg(long)]
    event_col: Option<String>,
    /// Column holding group labels for per-group reports.
    #[arg(long)]
    group_col: Option<String>,
    /// Comma-separated columns excluded from the features.
    #[arg(long, value_delimiter = ',')]
    drop_columns: Option<Vec<String>>,
    /// Skip rows with missing values instead of rejecting the file.
    #[arg(long)]
    drop_missing: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Number of mixture components.
    #[arg(long)]
    k: Option<usize>,
    /// Number of hidden layers; 0 or "" gives a linear encoder.
    #[arg(long)]
    layers: Option<String>,
    /// Width of each hidden layer.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct EvalFlags {
    /// Comma-separated horizons: event-time quantiles such as q25 (lower
    /// nearest rank, no interpolation) or explicit times.
    #[arg(long)]
    horizons: Option<String>,
    /// Bootstrap replicates for standard errors; 0 disables the bootstrap.
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    eval: EvalFlags,
    /// Model file written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    folds: Option<usize>,
    /// Sweep K in {3,4,6}, layers in {1,2} and width in {50,100}, keeping the
    /// lowest pooled Brier score.
    #[arg(long)]
    grid: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    horizons: Option<String>,
}

impl Shared {
    fn base(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data {
            run.data = Some(v.clone());
        }
        if let Some(v) = &self.time_col {
            run.schema.time_col = v.clone();
        }
        if let Some(v) = &self.event_col {
            run.schema.event_col = v.clone();
        }
        if let Some(v) = &self.group_col {
            run.schema.group_col = Some(v.clone());
        }
        if let Some(v) = &self.drop_columns {
            run.schema.drop_columns = v.iter().filter(|c| !c.is_empty()).cloned().collect();
        }
        if self.drop_missing {
            run.schema.missing = MissingPolicy::Drop;
        }
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = &self.out {
            run.out = Some(v.clone());
        }
        if self.sequential {
            run.parallelism = Parallelism::Sequential;
        }
        Ok(run)
    }
}

impl ModelArgs {
    fn apply(&self, run: &mut RunConfig) -> Result<()> {
        let dcm = &mut run.dcm;
        if let Some(v) = self.k {
            dcm.k = v;
        }
        let width = self.hidden.or_else(|| dcm.hidden.first().copied()).unwrap_or(50);
        let layers = match self.layers.as_deref().map(str::trim) {
            Some("") => Some(0),
            Some(s) => Some(s.parse::<usize>().with_context(|| format!("--layers expects a layer count, got '{s}'"))?),
            None => None,
        };
        match (layers, self.hidden) {
            (Some(l), _) => dcm.hidden = vec![width; l],
            (None, Some(w)) => dcm.hidden.iter_mut().for_each(|h| *h = w),
            (None, None) => {}
        }
        if let Some(v) = self.lr {
            dcm.lr = v;
        }
        if let Some(v) = self.batch {
            dcm.batch_size = v;
        }
        if let Some(v) = self.epochs {
            dcm.max_epochs = v;
        }
        if let Some(v) = self.patience {
            dcm.patience = v;
        }
        Ok(())
    }
}

impl EvalFlags {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(v) = &self.horizons {
            run.horizons = v.clone();
        }
        if let Some(v) = self.bootstrap {
            run.bootstrap = v;
        }
    }
}

fn print_summary(report: &MetricsReport) {
    println!("{:<6} {:>12} {:>10} {:>10}", "metric", "horizon", "estimate", "se");
    for r in report.rows.iter().filter(|r| r.group == POPULATION) {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        println!("{:<6} {:>12.4} {:>10} {:>10}", r.metric.name(), r.horizon, fmt(r.estimate), fmt(r.se));
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut config: SynthConfig = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let (n, c, s) = (4000, 0.3, 0);
            match args.preset {
                Preset::Crossing => crossing_config(n, c, s),
                Preset::Separated => separated_config(n, c, s),
                Preset::Ph => ph_config(n, &[1.0, -0.5, 0.25], c, s),
            }
        }
    };
    if let Some(v) = args.n {
        config.n = v;
    }
    if let Some(v) = args.censoring {
        config.censoring_fraction = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let cohort = run_synth(&config, &args.out)?;
    println!(
        "wrote {} records ({:.1}% censored) to {}",
        cohort.len(),
        100.0 * cohort.censored_fraction(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args)?,
        Command::Train(args) => {
            let mut run = args.shared.base()?;
            args.model.apply(&mut run)?;
            let model = run_train(&run)?;
            println!(
                "trained K={} for {} epochs; model written to {}",
                model.k(),
                model.training_log.len().saturating_sub(1),
                run.out.as_deref().unwrap_or_else(|| ".".as_ref()).join("model.json").display()
            );
        }
        Command::Eval(args) => {
            let mut run = args.shared.base()?;
            args.eval.apply(&mut run);
            if let Some(m) = args.model {
                run.model = Some(m);
            }
            print_summary(&run_eval(&run)?);
        }
        Command::Cv(args) => {
            let mut run = args.shared.base()?;
            args.model.apply(&mut run)?;
            args.eval.apply(&mut run);
            if let Some(v) = args.folds {
                run.folds = v;
            }
            if args.grid {
                run.grid = true;
            }
            let outcome = run_cv(&run)?;
            if run.grid {
                println!("selected K={} hidden={:?}", outcome.config.k, outcome.config.hidden);
            }
            print_summary(&outcome.report);
        }
        Command::Predict(args) => {
            let mut run = args.shared.base()?;
            if let Some(m) = args.model {
                run.model = Some(m);
            }
            if let Some(h) = args.horizons {
                run.horizons = h;
            }
            let risk = run_predict(&run)?;
            println!("predicted {} records at {} horizons", risk.len(), risk.horizons.len());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
