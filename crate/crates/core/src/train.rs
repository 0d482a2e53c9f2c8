//! Training the attention aggregator with the backbone and head frozen.
//!
//! Global average pooling commutes with the aggregator, so each state
//! enters training as its pooled aligned feature `u_s` and the loss is a
//! closed-form function of `(w_q, w_k, w_o)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::AggregatorParams;
use crate::error::{Error, Result};
use crate::model::{Dataset, LayerKind, ModelGraph};
use crate::phase::LayerWindow;
use crate::search::{self, BudgetConfig, CriterionKind, FeatureRecord};
use crate::tensor::{self, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub budget: usize,
    pub layer_window: Option<LayerWindow>,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Temperature of the candidate sampling softmax over `−criterion`.
    pub temperature: f64,
    pub weight_decay: f64,
    /// Trailing fraction of the training set held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 8,
            layer_window: None,
            lr: 1e-3,
            epochs: 5,
            batch: 32,
            seed: 0,
            temperature: 1.0,
            weight_decay: 0.01,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.batch == 0 {
            return Err(Error::Config("budget and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(
                "weight decay must be ≥ 0 and the validation fraction in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn search_config(&self, budget: usize) -> BudgetConfig {
        BudgetConfig {
            budget,
            layer_window: self.layer_window,
            criterion: CriterionKind::Entropy,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub train_images: usize,
    pub val_images: usize,
}

/// The frozen classifier: `z = D·a + bias` on the pooled feature `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T = f32> {
    /// `K×C`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub classes: usize,
    pub channels: usize,
}

impl LinearHead<f32> {
    /// Extracts the head of a `gap → [flatten] → dense` model.
    pub fn from_graph(g: &ModelGraph) -> Result<Self> {
        let head = &g.layers()[g.head_index()..];
        let mut kinds = head.iter().map(|l| &l.kind).peekable();
        let ok = matches!(kinds.next(), Some(LayerKind::GlobalAvgPool));
        if matches!(kinds.peek(), Some(LayerKind::Flatten)) {
            kinds.next();
        }
        match (ok, kinds.next(), kinds.next()) {
            (true, Some(LayerKind::Dense { weight, bias }), None) => Ok(Self {
                weight: weight.data().to_vec(),
                bias: bias.data().to_vec(),
                classes: weight.shape()[0],
                channels: weight.shape()[1],
            }),
            _ => Err(Error::Config(format!(
                "model {} needs a global-pool → dense head to train the aggregator",
                g.name()
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LinearHead<U> {
        LinearHead {
            weight: self.weight.iter().map(|&v| U::from_f64(v as f64)).collect(),
            bias: self.bias.iter().map(|&v| U::from_f64(v as f64)).collect(),
            classes: self.classes,
            channels: self.channels,
        }
    }
}

/// One training example: pooled aligned features of a state set.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSet<T = f64> {
    pub pooled: Vec<Vec<T>>,
    pub label: usize,
}

/// The three aggregator tensors in a working precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_o: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn from_aggregator(p: &AggregatorParams) -> Self {
        let cv = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect();
        Self {
            w_q: cv(&p.w_q),
            w_k: cv(&p.w_k),
            w_o: cv(&p.w_o),
        }
    }

    pub fn to_aggregator(&self) -> Result<AggregatorParams> {
        let cv = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect();
        AggregatorParams::new(cv(&self.w_q), cv(&self.w_k), cv(&self.w_o))
    }

    pub fn zeros_like(&self) -> Self {
        let z = vec![T::zero(); self.w_q.len()];
        Self {
            w_q: z.clone(),
            w_k: z.clone(),
            w_o: z,
        }
    }

    fn slices_mut(&mut self) -> [&mut Vec<T>; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_o]
    }

    fn slices(&self) -> [&Vec<T>; 3] {
        [&self.w_q, &self.w_k, &self.w_o]
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn softmax_rows<T: Scalar>(scores: &[T]) -> Vec<T> {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z = e.iter().copied().fold(T::zero(), |a, b| a + b);
    e.into_iter().map(|v| v / z).collect()
}

/// Cross-entropy of one example and, when `grad` is given, its gradient
/// added into `grad`.
fn example_loss<T: Scalar>(p: &Params<T>, head: &LinearHead<T>, ex: &PooledSet<T>, grad: Option<&mut Params<T>>) -> T {
    let b = ex.pooled.len();
    let c = head.channels;
    let bt = T::from_f64(b as f64);
    let u = &ex.pooled;
    let q: Vec<T> = u.iter().map(|us| dot(&p.w_q, us)).collect();
    let k: Vec<T> = u.iter().map(|us| dot(&p.w_k, us)).collect();
    let w: Vec<Vec<T>> = q
        .iter()
        .map(|&qs| softmax_rows(&k.iter().map(|&ks| qs * ks).collect::<Vec<_>>()))
        .collect();

    // ū and m̄ = (1/B) Σ_s Σ_s' W_ss' u_s'
    let mut mean_u = vec![T::zero(); c];
    let mut mix = vec![T::zero(); c];
    for s in 0..b {
        for ch in 0..c {
            mean_u[ch] = mean_u[ch] + u[s][ch] / bt;
        }
        for (s2, &wv) in w[s].iter().enumerate() {
            for ch in 0..c {
                mix[ch] = mix[ch] + wv * u[s2][ch] / bt;
            }
        }
    }
    let a: Vec<T> = (0..c).map(|ch| mean_u[ch] + p.w_o[ch] * mix[ch]).collect();
    let z: Vec<T> = (0..head.classes)
        .map(|r| dot(&head.weight[r * c..(r + 1) * c], &a) + head.bias[r])
        .collect();
    let probs = softmax_rows(&z);
    let loss = -probs[ex.label].max(T::min_positive_value()).ln();

    let Some(grad) = grad else {
        return loss;
    };
    let mut g_z = probs;
    g_z[ex.label] = g_z[ex.label] - T::one();
    let g_a: Vec<T> = (0..c)
        .map(|ch| (0..head.classes).fold(T::zero(), |acc, r| acc + head.weight[r * c + ch] * g_z[r]))
        .collect();
    for ch in 0..c {
        grad.w_o[ch] = grad.w_o[ch] + g_a[ch] * mix[ch];
    }
    let g_m: Vec<T> = (0..c).map(|ch| g_a[ch] * p.w_o[ch]).collect();
    // ∂L/∂W_ss' = (g_m · u_s') / B, the same for every row s
    let g_w_col: Vec<T> = u.iter().map(|us| dot(&g_m, us) / bt).collect();
    let mut dq = vec![T::zero(); b];
    let mut dk = vec![T::zero(); b];
    for s in 0..b {
        let row_dot = w[s].iter().zip(&g_w_col).fold(T::zero(), |acc, (&wv, &gv)| acc + wv * gv);
        for s2 in 0..b {
            let ds = w[s][s2] * (g_w_col[s2] - row_dot);
            dq[s] = dq[s] + ds * k[s2];
            dk[s2] = dk[s2] + ds * q[s];
        }
    }
    for s in 0..b {
        for ch in 0..c {
            grad.w_q[ch] = grad.w_q[ch] + dq[s] * u[s][ch];
            grad.w_k[ch] = grad.w_k[ch] + dk[s] * u[s][ch];
        }
    }
    loss
}

/// Mean cross-entropy over `batch`.
pub fn batch_loss<T: Scalar>(p: &Params<T>, head: &LinearHead<T>, batch: &[PooledSet<T>]) -> T {
    let n = T::from_f64(batch.len().max(1) as f64);
    batch
        .iter()
        .fold(T::zero(), |acc, ex| acc + example_loss(p, head, ex, None))
        / n
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_grad<T: Scalar>(p: &Params<T>, head: &LinearHead<T>, batch: &[PooledSet<T>]) -> (T, Params<T>) {
    let mut grad = p.zeros_like();
    let mut total = T::zero();
    for ex in batch {
        total = total + example_loss(p, head, ex, Some(&mut grad));
    }
    let n = T::from_f64(batch.len().max(1) as f64);
    for v in grad.slices_mut() {
        v.iter_mut().for_each(|g| *g = *g / n);
    }
    (total / n, grad)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params<f64>,
    v: Params<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(like: &Params<f64>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut Params<f64>, g: &Params<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = g.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((pv, gv), mv), vv) in p.slices_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..pv.len() {
                mv[i] = self.beta1 * mv[i] + (1.0 - self.beta1) * gv[i];
                vv[i] = self.beta2 * vv[i] + (1.0 - self.beta2) * gv[i] * gv[i];
                let update = (mv[i] / c1) / ((vv[i] / c2).sqrt() + self.eps);
                pv[i] -= lr * (update + self.weight_decay * pv[i]);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 toward 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Draws `b` distinct indices with probability ∝ `softmax(−criterion/T)`,
/// returned in ascending order.
pub fn sample_inverse_criterion(criteria: &[f64], b: usize, temperature: f64, rng: &mut impl Rng) -> Vec<usize> {
    if criteria.len() <= b {
        return (0..criteria.len()).collect();
    }
    let lo = criteria.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = criteria.iter().map(|&c| (-(c - lo) / temperature).exp()).collect();
    let mut picked = Vec::with_capacity(b);
    for _ in 0..b {
        let total: f64 = weights.iter().sum();
        let mut r = rng.gen::<f64>() * total;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            choice = Some(i);
            if r < w {
                break;
            }
            r -= w;
        }
        let i = choice.expect("fewer picks than candidates");
        weights[i] = 0.0;
        picked.push(i);
    }
    picked.sort_unstable();
    picked
}

fn pool_records(records: &[FeatureRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            Ok(tensor::global_avg_pool(&r.aligned)?
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect())
        })
        .collect()
}

struct Candidates {
    pooled: Vec<Vec<f64>>,
    criteria: Vec<f64>,
    label: usize,
}

/// Trains `(w_q, w_k, w_o)` from the seeded initialization.
pub fn train_aggregator(g: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<(AggregatorParams, TrainReport)> {
    let init = AggregatorParams::init(g.backbone_output_shape()[0], cfg.seed);
    train_aggregator_from(g, data, cfg, init)
}

pub fn train_aggregator_from(
    g: &ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    init: AggregatorParams,
) -> Result<(AggregatorParams, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("aggregator training needs at least one image".into()));
    }
    let head = LinearHead::from_graph(g)?;
    init.check_channels(head.channels)?;
    cfg.search_config(cfg.budget).validate(g.num_searchable())?;

    let n_val = ((data.len() as f64) * cfg.val_fraction).floor() as usize;
    let n_train = data.len() - n_val;
    if n_train == 0 {
        return Err(Error::Validation("validation split leaves no training images".into()));
    }

    let candidate_cfg = cfg.search_config(2 * cfg.budget);
    let eval_cfg = cfg.search_config(cfg.budget);
    let mut candidates = Vec::with_capacity(n_train);
    let mut train_eval = Vec::with_capacity(n_train);
    for (x, label) in data.iter().take(n_train) {
        let trace = search::search_detailed(g, x, &candidate_cfg, None)?;
        candidates.push(Candidates {
            pooled: pool_records(&trace.visited)?,
            criteria: trace.visited.iter().map(|r| r.criterion).collect(),
            label,
        });
        train_eval.push(PooledSet {
            pooled: pool_records(&search::search(g, x, &eval_cfg, None)?)?,
            label,
        });
    }
    let val_eval = data
        .iter()
        .skip(n_train)
        .map(|(x, label)| {
            Ok(PooledSet {
                pooled: pool_records(&search::search(g, x, &eval_cfg, None)?)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let head64 = head.cast::<f64>();
    let mut params = Params::<f64>::from_aggregator(&init);
    let val_loss = |p: &Params<f64>| (!val_eval.is_empty()).then(|| batch_loss(p, &head64, &val_eval));
    let initial_train_loss = batch_loss(&params, &head64, &train_eval);
    let initial_val_loss = val_loss(&params);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a661);
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let steps_per_epoch = n_train.div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<PooledSet<f64>> = chunk
                .iter()
                .map(|&i| {
                    let c = &candidates[i];
                    let pick = sample_inverse_criterion(&c.criteria, cfg.budget, cfg.temperature, &mut rng);
                    PooledSet {
                        pooled: pick.iter().map(|&j| c.pooled[j].clone()).collect(),
                        label: c.label,
                    }
                })
                .collect();
            let (loss, grad) = loss_and_grad(&params, &head64, &batch);
            if !loss.is_finite() || grad.slices().iter().any(|v| v.iter().any(|g| !g.is_finite())) {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, step {step}: loss {loss}, |w_q| {:.3e}, |w_k| {:.3e}, |w_o| {:.3e}",
                    norm(&params.w_q),
                    norm(&params.w_k),
                    norm(&params.w_o)
                )));
            }
            opt.step(&mut params, &grad, cosine_lr(cfg.lr, step, total_steps));
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: batch_loss(&params, &head64, &train_eval),
            val_loss: val_loss(&params),
        });
    }

    let report = TrainReport {
        initial_train_loss,
        final_train_loss: epochs.last().map_or(initial_train_loss, |e| e.train_loss),
        initial_val_loss,
        final_val_loss: epochs.last().map_or(initial_val_loss, |e| e.val_loss),
        epochs,
        steps: step,
        train_images: n_train,
        val_images: val_eval.len(),
    };
    Ok((params.to_aggregator()?, report))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 3, 0), 0.1);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let crit = [0.1, 2.0, 0.3, 5.0, 0.0, 1.0];
        for _ in 0..50 {
            let s = sample_inverse_criterion(&crit, 4, 1.0, &mut rng);
            assert_eq!(s.len(), 4);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(sample_inverse_criterion(&crit[..3], 4, 1.0, &mut rng), vec![0, 1, 2]);
    }

    #[test]
    fn sampling_prefers_low_criterion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let crit = [0.0, 3.0];
        let hits = (0..2000)
            .filter(|_| sample_inverse_criterion(&crit, 1, 1.0, &mut rng) == vec![0])
            .count();
        // P(pick 0) = 1 / (1 + e^-3) ≈ 0.953
        assert!((1850..1960).contains(&hits), "{hits}");
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Params {
            w_q: vec![1.0, -1.0],
            w_k: vec![0.0, 0.0],
            w_o: vec![0.5, 0.0],
        };
        let g = Params {
            w_q: vec![2.0, -3.0],
            w_k: vec![0.0, 1e-3],
            w_o: vec![0.0, 0.0],
        };
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.1);
        assert!((p.w_q[0] - 0.9).abs() < 1e-6);
        assert!((p.w_q[1] + 0.9).abs() < 1e-6);
        assert!((p.w_k[1] + 0.1).abs() < 1e-4);
        assert_eq!(p.w_o, vec![0.5, 0.0]);
    }
}
