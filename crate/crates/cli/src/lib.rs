//! Library side of the `phasesearch` command: evaluation sweeps, golden
//! verification, aggregator training and single-image inference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use phasesearch::model::{self, GoldenFixture};
use phasesearch::tensor;
use phasesearch::{
    AggregateMode, AggregatorParams, BudgetConfig, CriterionKind, Dataset, LayerWindow, ModelGraph, Tensor,
    TrainConfig, TrainReport,
};
use rayon::prelude::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable capping the number of worker threads (`0` = one per core).
pub const THREADS_ENV: &str = "PSUB_THREADS";

pub const CSV_HEADER: &str = "budget,criterion,aggregate,tta,top1,images,wall_ms,b_total";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] phasesearch::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Engine(phasesearch::Error::Config(_)) => EXIT_USAGE,
            CliError::Engine(_) => EXIT_IO,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tta {
    None,
    Hflip,
}

impl Tta {
    pub fn name(self) -> &'static str {
        match self {
            Tta::None => "none",
            Tta::Hflip => "hflip",
        }
    }

    /// Number of views (`B_tta`).
    pub fn views(self) -> usize {
        match self {
            Tta::None => 1,
            Tta::Hflip => 2,
        }
    }
}

impl std::str::FromStr for Tta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Tta::None),
            "hflip" => Ok(Tta::Hflip),
            _ => Err(format!("unknown tta mode `{s}` (expected none or hflip)")),
        }
    }
}

/// Everything an evaluation sweep needs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub budgets: Vec<usize>,
    pub criterion: CriterionKind,
    pub aggregate: AggregateMode,
    pub agg_params: Option<PathBuf>,
    pub layer_window: Option<LayerWindow>,
    pub tta: Tta,
    pub seed: u64,
    pub limit: Option<usize>,
    /// Report `wall_ms` as 0 so output is byte-reproducible.
    pub no_timing: bool,
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(CliError::Usage("budgets must be positive".into()));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Usage("budgets must be strictly increasing".into()));
        }
        let needs_params = self.aggregate == AggregateMode::Attention || self.criterion == CriterionKind::Learned;
        if needs_params && self.agg_params.is_none() {
            return Err(CliError::Usage(
                "--agg-params is required for attention aggregation and the learned criterion".into(),
            ));
        }
        Ok(())
    }
}

pub fn parse_budgets(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{t}` is not a budget"))
        })
        .collect()
}

/// Runs `f` on a pool sized by `PSUB_THREADS`.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> CliResult<R> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a thread count")))?,
        _ => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Mean of per-view logits.
pub fn tta_combine(logit_sets: &[Tensor]) -> phasesearch::Result<Tensor> {
    let first = logit_sets
        .first()
        .ok_or_else(|| phasesearch::Error::Validation("no logits to combine".into()))?;
    if let Some(bad) = logit_sets.iter().find(|l| l.shape() != first.shape()) {
        return Err(phasesearch::Error::Shape(format!(
            "cannot combine logits shaped {:?} and {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let n = logit_sets.len() as f64;
    let data = (0..first.len())
        .map(|i| (logit_sets.iter().map(|l| l.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Tensor::new(first.shape().to_vec(), data)
}

/// TTA views of one input.
pub fn tta_views(x: &Tensor, tta: Tta) -> phasesearch::Result<Vec<Tensor>> {
    Ok(match tta {
        Tta::None => vec![x.clone()],
        Tta::Hflip => vec![x.clone(), tensor::hflip(x)?],
    })
}

/// Logits for one image: phase search and aggregation on every TTA view,
/// then the mean over views.
pub fn predict_image(
    g: &ModelGraph,
    x: &Tensor,
    cfg: &BudgetConfig,
    mode: AggregateMode,
    params: Option<&AggregatorParams>,
    tta: Tta,
) -> phasesearch::Result<Tensor> {
    let logits = tta_views(x, tta)?
        .iter()
        .map(|v| phasesearch::predict(g, v, cfg, mode, params))
        .collect::<phasesearch::Result<Vec<_>>>()?;
    tta_combine(&logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub budget: usize,
    pub criterion: CriterionKind,
    pub aggregate: AggregateMode,
    pub tta: Tta,
    pub correct: usize,
    pub images: usize,
    pub wall_ms: u128,
    pub b_total: usize,
}

impl SweepRow {
    /// Top-1 accuracy in percent.
    pub fn top1(&self) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.images as f64
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.2},{},{},{}",
            self.budget,
            self.criterion,
            self.aggregate,
            self.tta.name(),
            self.top1(),
            self.images,
            self.wall_ms,
            self.b_total
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn load_dataset(images: &Path, labels: &Path, limit: Option<usize>) -> phasesearch::Result<Dataset> {
    let ds = model::load_idx(images, labels)?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

/// Evaluates one budget on an already loaded model and dataset.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_budget(
    g: &ModelGraph,
    data: &Dataset,
    cfg: &BudgetConfig,
    mode: AggregateMode,
    params: Option<&AggregatorParams>,
    tta: Tta,
) -> phasesearch::Result<usize> {
    let hits: Vec<bool> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &y)| Ok(predict_image(g, x, cfg, mode, params, tta)?.argmax() == y))
        .collect::<phasesearch::Result<_>>()?;
    Ok(hits.into_iter().filter(|&h| h).count())
}

pub fn run_eval(cfg: &RunConfig) -> CliResult<Vec<SweepRow>> {
    cfg.validate()?;
    let g = model::load_model(&cfg.model)?;
    let params = cfg.agg_params.as_ref().map(model::load_aggregator).transpose()?;
    let data = load_dataset(&cfg.images, &cfg.labels, cfg.limit)?;
    if data.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(cfg.budgets.len());
    for &budget in &cfg.budgets {
        let bc = BudgetConfig {
            budget,
            layer_window: cfg.layer_window,
            criterion: cfg.criterion,
            seed: cfg.seed,
        };
        bc.validate(g.num_searchable())?;
        let start = Instant::now();
        let correct = with_pool(|| evaluate_budget(&g, &data, &bc, cfg.aggregate, params.as_ref(), cfg.tta))??;
        let wall_ms = if cfg.no_timing { 0 } else { start.elapsed().as_millis() };
        rows.push(SweepRow {
            budget,
            criterion: cfg.criterion,
            aggregate: cfg.aggregate,
            tta: cfg.tta,
            correct,
            images: data.len(),
            wall_ms,
            b_total: cfg.tta.views() * budget,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyEntry {
    pub input: String,
    pub selection: String,
    pub max_dev: f64,
    pub tol: f64,
}

impl VerifyEntry {
    pub fn passed(&self) -> bool {
        self.max_dev <= self.tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub entries: Vec<VerifyEntry>,
}

impl VerifyReport {
    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| !e.passed()).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let status = if e.passed() { "ok  " } else { "FAIL" };
            let _ = writeln!(
                out,
                "{status} fixture {i} {} {} max_dev={:.3e} tol={:.0e}",
                e.input, e.selection, e.max_dev, e.tol
            );
        }
        let _ = writeln!(
            out,
            "{} of {} fixtures passed",
            self.entries.len() - self.failures(),
            self.entries.len()
        );
        out
    }
}

fn verify_fixtures(g: &ModelGraph, fixtures: &[GoldenFixture]) -> phasesearch::Result<VerifyReport> {
    let mut images: Vec<(PathBuf, Vec<Tensor>)> = Vec::new();
    let mut entries = Vec::with_capacity(fixtures.len());
    for f in fixtures {
        let pos = match images.iter().position(|(p, _)| *p == f.image_path) {
            Some(p) => p,
            None => {
                images.push((f.image_path.clone(), model::load_idx_images(&f.image_path)?));
                images.len() - 1
            }
        };
        let x = images[pos].1.get(f.index).ok_or_else(|| {
            phasesearch::Error::Range(format!(
                "{}: image {} of {}",
                f.input,
                f.index,
                images[pos].1.len()
            ))
        })?;
        let (_, logits) = phasesearch::forward_with_selection(g, x, &f.selection)?;
        let max_dev = logits
            .data()
            .iter()
            .zip(&f.logits)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max);
        entries.push(VerifyEntry {
            input: f.input.clone(),
            selection: f.selection.to_string(),
            max_dev: if max_dev.is_nan() { f64::INFINITY } else { max_dev },
            tol: f.tol,
        });
    }
    Ok(VerifyReport { entries })
}

pub fn run_verify(model_path: &Path, golden: &Path) -> CliResult<VerifyReport> {
    let g = model::load_model(model_path)?;
    let fixtures = model::load_golden(golden, &g)?;
    Ok(verify_fixtures(&g, &fixtures)?)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub out: PathBuf,
    pub limit: Option<usize>,
    pub config: TrainConfig,
}

pub fn run_train_agg(args: &TrainArgs) -> CliResult<TrainReport> {
    let g = model::load_model(&args.model)?;
    let data = load_dataset(&args.images, &args.labels, args.limit)?;
    let (params, report) = phasesearch::train_aggregator(&g, &data, &args.config)?;
    model::save_aggregator(&params, &args.out)?;
    Ok(report)
}

pub fn render_train_report(r: &TrainReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
    let mut out = String::new();
    let _ = writeln!(out, "train images {}, validation images {}, steps {}", r.train_images, r.val_images, r.steps);
    let _ = writeln!(out, "initial nll: train {:.6} val {}", r.initial_train_loss, opt(r.initial_val_loss));
    for e in &r.epochs {
        let _ = writeln!(out, "epoch {}: train {:.6} val {}", e.epoch + 1, e.train_loss, opt(e.val_loss));
    }
    let _ = writeln!(out, "final nll: train {:.6} val {}", r.final_train_loss, opt(r.final_val_loss));
    out
}

#[derive(Clone, Debug)]
pub struct InferArgs {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    pub budget: usize,
    pub criterion: CriterionKind,
    pub aggregate: AggregateMode,
    pub agg_params: Option<PathBuf>,
    pub layer_window: Option<LayerWindow>,
    pub tta: Tta,
    pub seed: u64,
    pub limit: Option<usize>,
}

/// One CSV line per image: `index,prediction[,label]`.
pub fn run_infer(args: &InferArgs) -> CliResult<String> {
    let needs_params = args.aggregate == AggregateMode::Attention || args.criterion == CriterionKind::Learned;
    if needs_params && args.agg_params.is_none() {
        return Err(CliError::Usage(
            "--agg-params is required for attention aggregation and the learned criterion".into(),
        ));
    }
    let g = model::load_model(&args.model)?;
    let params = args.agg_params.as_ref().map(model::load_aggregator).transpose()?;
    let mut images = model::load_idx_images(&args.images)?;
    let labels = match &args.labels {
        Some(p) => {
            let ds = model::load_idx(&args.images, p)?;
            Some(ds.labels)
        }
        None => None,
    };
    if let Some(n) = args.limit {
        images.truncate(n);
    }
    let cfg = BudgetConfig {
        budget: args.budget,
        layer_window: args.layer_window,
        criterion: args.criterion,
        seed: args.seed,
    };
    cfg.validate(g.num_searchable())?;
    let preds: Vec<usize> = with_pool(|| {
        images
            .par_iter()
            .map(|x| Ok(predict_image(&g, x, &cfg, args.aggregate, params.as_ref(), args.tta)?.argmax()))
            .collect::<phasesearch::Result<_>>()
    })??;
    let mut out = String::from(if labels.is_some() { "index,prediction,label\n" } else { "index,prediction\n" });
    for (i, p) in preds.iter().enumerate() {
        match &labels {
            Some(l) => writeln!(out, "{i},{p},{}", l[i]),
            None => writeln!(out, "{i},{p}"),
        }
        .expect("write to string");
    }
    Ok(out)
}

/// Writes `text` to `path`, or stdout when `path` is `None`.
pub fn emit(text: &str, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Engine(e.into())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
