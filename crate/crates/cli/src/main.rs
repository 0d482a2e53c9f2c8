use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phasesearch::{AggregateMode, CriterionKind, LayerWindow, TrainConfig};
use phasesearch_cli::{
    emit, parse_budgets, render_train_report, run_eval, run_infer, run_train_agg, run_verify, sweep_csv, CliError,
    InferArgs, RunConfig, TrainArgs, Tta, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED,
};

#[derive(Parser)]
#[command(name = "phasesearch", version, about = "Test-time phase search for subsampling CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SearchOpts {
    #[arg(long, default_value = "entropy", value_parser = parse_criterion)]
    criterion: CriterionKind,
    #[arg(long, default_value = "entropy", value_parser = parse_mode)]
    aggregate: AggregateMode,
    /// Attention aggregator parameters (PSB1).
    #[arg(long)]
    agg_params: Option<PathBuf>,
    /// Searchable layers to perturb, e.g. `2..3` (default: all but first and last).
    #[arg(long, value_parser = parse_window)]
    layer_window: Option<LayerWindow>,
    #[arg(long, default_value = "none")]
    tta: Tta,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only use the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Predict a class for every image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        budget: usize,
        #[command(flatten)]
        search: SearchOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 accuracy for each budget, as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "1,4,8", value_parser = parse_budgets)]
        budgets: std::vec::Vec<usize>,
        #[command(flatten)]
        search: SearchOpts,
        /// Report wall_ms as 0.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check golden logit fixtures against the engine.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        golden: PathBuf,
    },
    /// Train the attention aggregator and write its parameters.
    TrainAgg {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, value_parser = parse_window)]
        layer_window: Option<LayerWindow>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn parse_criterion(s: &str) -> Result<CriterionKind, String> {
    s.parse().map_err(|e: phasesearch::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<AggregateMode, String> {
    s.parse().map_err(|e: phasesearch::Error| e.to_string())
}

fn parse_window(s: &str) -> Result<LayerWindow, String> {
    s.parse().map_err(|e: phasesearch::Error| e.to_string())
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Infer {
            model,
            images,
            labels,
            budget,
            search,
            out,
        } => {
            let text = run_infer(&InferArgs {
                model,
                images,
                labels,
                budget,
                criterion: search.criterion,
                aggregate: search.aggregate,
                agg_params: search.agg_params,
                layer_window: search.layer_window,
                tta: search.tta,
                seed: search.seed,
                limit: search.limit,
            })?;
            emit(&text, out.as_deref())?;
        }
        Command::Eval {
            model,
            images,
            labels,
            budgets,
            search,
            no_timing,
            out,
        } => {
            let rows = run_eval(&RunConfig {
                model,
                images,
                labels,
                budgets,
                criterion: search.criterion,
                aggregate: search.aggregate,
                agg_params: search.agg_params,
                layer_window: search.layer_window,
                tta: search.tta,
                seed: search.seed,
                limit: search.limit,
                no_timing,
            })?;
            emit(&sweep_csv(&rows), out.as_deref())?;
        }
        Command::Verify { model, golden } => {
            let report = run_verify(&model, &golden)?;
            print!("{}", report.render());
            if report.failures() > 0 {
                return Ok(EXIT_VERIFY_FAILED);
            }
        }
        Command::TrainAgg {
            model,
            images,
            labels,
            out,
            budget,
            epochs,
            lr,
            batch,
            temperature,
            weight_decay,
            layer_window,
            seed,
            limit,
        } => {
            let config = TrainConfig {
                budget,
                layer_window,
                lr,
                epochs,
                batch,
                seed,
                temperature,
                weight_decay,
                ..TrainConfig::default()
            };
            let report = run_train_agg(&TrainArgs {
                model,
                images,
                labels,
                out,
                limit,
                config,
            })?;
            print!("{}", render_train_report(&report));
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("phasesearch: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
