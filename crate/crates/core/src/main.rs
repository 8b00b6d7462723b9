use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use finetune_ood::genmodels::Family;
use finetune_ood::harness::audit::audit_run;
use finetune_ood::harness::{plots, read_scores, CellStatus, ExperimentSpec, Indicator, PairInfo, PairSpec, Runner};
use finetune_ood::metrics::{curves, labelled};
use finetune_ood::theorylab::validate_default;
use finetune_ood::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

/// Out-of-distribution detection with deep generative models.
#[derive(Parser)]
#[command(name = "ftood", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment spec; unset fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the spec's (or environment's) data root.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Overrides the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn spec(&self) -> anyhow::Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(d) = &self.output_dir {
            spec.output_dir = d.clone();
        }
        if let Some(d) = &self.data_root {
            spec.data_root = Some(d.clone());
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        Ok(spec)
    }

    fn runner(&self) -> anyhow::Result<Runner> {
        Ok(Runner::new(self.spec()?)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the cached model of a dataset and print its checkpoint.
    Train {
        #[arg(long)]
        dataset: String,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[command(flatten)]
        common: Common,
    },
    /// Run the classifier gate on two datasets.
    Gate {
        a: String,
        b: String,
        #[command(flatten)]
        common: Common,
    },
    /// Score one (pair, family, indicator) cell and print its per-sample scores as CSV.
    Score {
        /// `in:out`
        #[arg(long, value_parser = parse_pair)]
        pair: PairSpec,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, value_parser = parse_indicator)]
        indicator: Indicator,
        #[command(flatten)]
        common: Common,
    },
    /// Run indicators on one pair and print the records as JSON lines.
    RunPair {
        #[arg(long, value_parser = parse_pair)]
        pair: PairSpec,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        /// Comma-separated; defaults to the spec's indicators.
        #[arg(long, value_delimiter = ',', value_parser = parse_indicator)]
        indicators: Vec<Indicator>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every cell of a spec and write records and tables.
    RunMatrix {
        #[command(flatten)]
        common: Common,
    },
    /// Numerical checks of the theoretical results.
    Theory {
        #[command(subcommand)]
        command: TheoryCommand,
    },
    /// Write a figure (SVG plus CSV).
    Plot {
        #[command(subcommand)]
        figure: Figure,
    },
    /// Recompute every metric and table of a run from its score files.
    Audit {
        /// A run directory (`<output_dir>/runs/<name>-<hash>`).
        run_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Validate one theorem on the default Gaussian pair and print a JSON report.
    Validate {
        #[arg(long)]
        theorem: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
}

#[derive(Subcommand)]
enum Figure {
    /// In/out score histograms of one cell.
    Histogram {
        #[arg(long, value_parser = parse_pair)]
        pair: PairSpec,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, value_parser = parse_indicator, default_value = "loglik")]
        indicator: Indicator,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// ROC and PR curves of several indicators on one pair.
    Roc {
        #[arg(long, value_parser = parse_pair)]
        pair: PairSpec,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, value_delimiter = ',', value_parser = parse_indicator)]
        indicators: Vec<Indicator>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// AUROC per naive fine-tune epoch, pretrained against from scratch.
    LearningCurves {
        #[arg(long, value_parser = parse_pair)]
        pair: PairSpec,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Log-likelihood against compressed size for several test sets.
    Correlation {
        /// Dataset the model is trained on.
        #[arg(long)]
        model: String,
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).map_err(|e| e.to_string())
}

fn parse_indicator(s: &str) -> Result<Indicator, String> {
    Indicator::parse(s).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<PairSpec, String> {
    PairSpec::parse(s).map_err(|e| e.to_string())
}

fn pair_info(p: &PairSpec) -> PairInfo {
    PairInfo { in_name: p.in_name.clone(), out_name: p.out_name.clone(), admitted: true, gate_auroc: None }
}

/// Outcome of a verb that ran to completion but may still signal failure.
enum Outcome {
    Done,
    TrainingFailed(String),
    AcceptanceFailed(String),
}

fn cell_scores(runner: &Runner, pair: &PairSpec, family: Family, indicator: Indicator) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let r = runner.run_cell(&pair_info(pair), family, indicator)?;
    match (r.status, &r.score_file) {
        (CellStatus::Ok, Some(f)) => {
            let rows = read_scores(&runner.output_dir().join(f))?;
            let (mut a, mut b) = (vec![], vec![]);
            for row in rows {
                if row.is_in()? {
                    a.push(row.score);
                } else {
                    b.push(row.score);
                }
            }
            Ok((a, b))
        }
        (CellStatus::Unsupported, _) => bail!("{indicator} is not supported for {family}"),
        _ => Err(Error::Divergence { epoch: 0, step: 0, detail: r.error.unwrap_or_default() }.into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Train { dataset, family, common } => {
            let runner = common.runner()?;
            let model = runner.theta(&dataset, family)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": runner.theta_path(&dataset, family)?,
                    "family": family,
                    "dataset": dataset,
                    "num_params": model.num_params(),
                    "param_hash": model.param_hash()?,
                })
            );
        }
        Command::Gate { a, b, common } => {
            let (admitted, auroc) = common.runner()?.gate(&a, &b)?;
            println!("{}", serde_json::json!({ "a": a, "b": b, "admitted": admitted, "gate_auroc": auroc }));
        }
        Command::Score { pair, family, indicator, common } => {
            let runner = common.runner()?;
            let r = runner.run_cell(&pair_info(&pair), family, indicator)?;
            match (&r.status, &r.score_file) {
                (CellStatus::Ok, Some(f)) => print!("{}", std::fs::read_to_string(runner.output_dir().join(f))?),
                (CellStatus::Unsupported, _) => bail!(Error::Unsupported(format!("{indicator} on {family}"))),
                _ => return Ok(Outcome::TrainingFailed(r.error.unwrap_or_default())),
            }
            eprintln!("{}", serde_json::to_string(&r.metrics)?);
        }
        Command::RunPair { pair, family, indicators, common } => {
            let spec = common.spec()?;
            let indicators = if indicators.is_empty() { spec.indicators.clone() } else { indicators };
            let records = finetune_ood::harness::run_pair(&pair, family, &indicators, &spec)?;
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
            if let Some(r) = records.iter().find(|r| r.status == CellStatus::Failed) {
                return Ok(Outcome::TrainingFailed(format!("{} {}: {}", r.pair, r.indicator, r.error.clone().unwrap_or_default())));
            }
        }
        Command::RunMatrix { common } => {
            let spec = common.spec()?;
            spec.validate()?;
            let report = Runner::new(spec)?.run_matrix()?;
            print!("{}", std::fs::read_to_string(report.run_dir.join("tables.txt"))?);
            println!("run directory: {}", report.run_dir.display());
            let failed = report.records.iter().filter(|r| r.status == CellStatus::Failed).count();
            if failed > 0 {
                return Ok(Outcome::TrainingFailed(format!("{failed} cells failed; see records.jsonl")));
            }
        }
        Command::Theory { command: TheoryCommand::Validate { theorem, seed, n } } => {
            let report = validate_default(theorem, n, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.pass {
                return Ok(Outcome::AcceptanceFailed(format!("theorem {theorem} check did not pass")));
            }
        }
        Command::Plot { figure } => plot(figure)?,
        Command::Audit { run_dir } => {
            let report = audit_run(&run_dir).with_context(|| format!("auditing {}", run_dir.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed() {
                return Ok(Outcome::AcceptanceFailed(format!("{} discrepancies", report.mismatches.len())));
            }
        }
    }
    Ok(Outcome::Done)
}

fn plot(figure: Figure) -> anyhow::Result<()> {
    match figure {
        Figure::Histogram { pair, family, indicator, bins, out, common } => {
            let runner = common.runner()?;
            let (a, b) = cell_scores(&runner, &pair, family, indicator)?;
            let title = format!("{} {family} {indicator}", pair.label());
            if indicator == Indicator::Loglik {
                let dims = finetune_ood::datasets::registry_entry(&pair.in_name)?.shape.dims() as f64;
                let bpd = |v: &[f64]| v.iter().map(|x| -x / (dims * std::f64::consts::LN_2)).collect::<Vec<_>>();
                // Bits/dim reverses the order, so the sides swap to keep the caption's AUROC.
                plots::score_histogram(&out, &title, "negative log-likelihood (bits/dim)", &bpd(&b), &bpd(&a), bins)?;
            } else {
                plots::score_histogram(&out, &title, "score", &a, &b, bins)?;
            }
        }
        Figure::Roc { pair, family, indicators, out, common } => {
            let runner = common.runner()?;
            let indicators = if indicators.is_empty() { vec![Indicator::Loglik, Indicator::KlOracle] } else { indicators };
            let mut all = Vec::new();
            for i in indicators {
                let (a, b) = cell_scores(&runner, &pair, family, i)?;
                all.push((i.to_string(), curves(&labelled(&a, &b))?));
            }
            plots::roc_pr(&out, &format!("{} {family}", pair.label()), &all)?;
        }
        Figure::LearningCurves { pair, family, epochs, out, common } => {
            let lc = common.runner()?.learning_curves(&pair_info(&pair), family, epochs)?;
            plots::learning_curves(&out, &lc)?;
        }
        Figure::Correlation { model, family, datasets, out, common } => {
            let points = common.runner()?.correlation(&model, family, &datasets)?;
            plots::correlation(&out, &format!("{family} trained on {model}"), &points)?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::UnknownDataset(_)
            | Error::SyntheticNotLoadable(_)
            | Error::MissingData { .. }
            | Error::CorruptData { .. }
            | Error::Unsupported(_),
        ) => EXIT_CONFIG,
        Some(Error::Divergence { .. } | Error::NonFiniteGradient) => EXIT_TRAINING,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::TrainingFailed(msg)) => {
            eprintln!("training failure: {msg}");
            ExitCode::from(EXIT_TRAINING)
        }
        Ok(Outcome::AcceptanceFailed(msg)) => {
            eprintln!("acceptance failure: {msg}");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
