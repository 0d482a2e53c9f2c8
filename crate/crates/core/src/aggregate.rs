//! Combining the features of the selected states into one prediction.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::phase;
use crate::search::{self, BudgetConfig, FeatureRecord};
use crate::tensor::{self, Tensor};

/// Pre-weights at or below this are treated as zero.
pub const WEIGHT_FLOOR: f64 = 1e-9;

/// Parameters of the attention aggregator: scalar query and key
/// projections and an elementwise output gain, all of length `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams {
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_o: Vec<f32>,
}

impl AggregatorParams {
    pub fn new(w_q: Vec<f32>, w_k: Vec<f32>, w_o: Vec<f32>) -> Result<Self> {
        let c = w_q.len();
        if c == 0 || w_k.len() != c || w_o.len() != c {
            return Err(Error::Validation(format!(
                "aggregator tensors must share one non-zero length, got {}, {}, {}",
                w_q.len(),
                w_k.len(),
                w_o.len()
            )));
        }
        if !w_q.iter().chain(&w_k).chain(&w_o).all(|v| v.is_finite()) {
            return Err(Error::Validation("aggregator parameters must be finite".into()));
        }
        Ok(Self { w_q, w_k, w_o })
    }

    /// `w_o = 0`; `w_q`, `w_k` drawn from `N(0, 0.01²)`.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.01).expect("valid sigma");
        let mut draw = || (0..channels).map(|_| normal.sample(&mut rng) as f32).collect::<Vec<_>>();
        let w_q = draw();
        let w_k = draw();
        Self {
            w_q,
            w_k,
            w_o: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.len()
    }

    pub fn check_channels(&self, c: usize) -> Result<()> {
        if self.channels() != c {
            return Err(Error::Validation(format!(
                "aggregator has {} channels, features have {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregateMode {
    Avg,
    Entropy,
    Attention,
}

impl AggregateMode {
    pub const ALL: [AggregateMode; 3] = [Self::Avg, Self::Entropy, Self::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Avg => "avg",
            Self::Entropy => "entropy",
            Self::Attention => "attention",
        }
    }
}

impl fmt::Display for AggregateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation mode `{s}`")))
    }
}

/// Per-state weights and the normalizer `Z` they were divided by.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightAssignment {
    pub weights: Vec<f64>,
    pub normalizer: f64,
}

/// Per-state, per-pixel weights (`weights[s][pixel]`, row-major pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeights {
    pub weights: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

fn check_same_shape(features: &[&Tensor]) -> Result<()> {
    let first = features
        .first()
        .ok_or_else(|| Error::Validation("cannot aggregate an empty feature set".into()))?;
    if let Some(bad) = features.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "feature shapes differ: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(())
}

/// `Σ_s w_s f_s`, accumulated in `f64`.
fn weighted_sum_f64(features: &[&Tensor], weights: &[f64]) -> Vec<f64> {
    let mut acc = vec![0f64; features[0].len()];
    for (f, &w) in features.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += w * v as f64;
        }
    }
    acc
}

fn mean_f64(features: &[&Tensor]) -> Vec<f64> {
    let mut acc = vec![0f64; features[0].len()];
    for f in features {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let n = features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn to_tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data.into_iter().map(|v| v as f32).collect()).expect("shape preserved")
}

pub fn aggregate_avg(features: &[&Tensor]) -> Result<Tensor> {
    check_same_shape(features)?;
    Ok(to_tensor(features[0].shape(), mean_f64(features)))
}

/// Weights `w_s ∝ 1 − H_s / ln K` from entropies in nats. Falls back to
/// uniform weights when every pre-weight is negligible.
pub fn weights_from_entropies(entropies: &[f64], k: usize) -> Result<WeightAssignment> {
    if entropies.is_empty() {
        return Err(Error::Validation("no states to weight".into()));
    }
    if k < 2 {
        return Err(Error::Validation(format!("entropy weights need K ≥ 2, got {k}")));
    }
    let ln_k = (k as f64).ln();
    let pre: Vec<f64> = entropies.iter().map(|h| (1.0 - h / ln_k).max(0.0)).collect();
    if pre.iter().all(|&p| p <= WEIGHT_FLOOR) {
        let n = entropies.len() as f64;
        return Ok(WeightAssignment {
            weights: vec![1.0 / n; entropies.len()],
            normalizer: n,
        });
    }
    let z: f64 = pre.iter().sum();
    Ok(WeightAssignment {
        weights: pre.iter().map(|p| p / z).collect(),
        normalizer: z,
    })
}

pub fn entropy_weights(records: &[FeatureRecord], k: usize) -> Result<WeightAssignment> {
    let h: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    weights_from_entropies(&h, k)
}

pub fn aggregate_entropy(records: &[FeatureRecord], k: usize) -> Result<Tensor> {
    let features: Vec<&Tensor> = records.iter().map(|r| &r.aligned).collect();
    check_same_shape(&features)?;
    let w = entropy_weights(records, k)?;
    Ok(to_tensor(features[0].shape(), weighted_sum_f64(&features, &w.weights)))
}

/// Row-softmax of `q_s·k_{s'}` with `q_s = w_q·u_s`, `k_s = w_k·u_s`.
pub fn attention_from_pooled(pooled: &[Vec<f64>], p: &AggregatorParams) -> Tensor<f64> {
    let dot = |w: &[f32], u: &[f64]| w.iter().zip(u).map(|(&a, &b)| a as f64 * b).sum::<f64>();
    let q: Vec<f64> = pooled.iter().map(|u| dot(&p.w_q, u)).collect();
    let k: Vec<f64> = pooled.iter().map(|u| dot(&p.w_k, u)).collect();
    let b = pooled.len();
    let mut w = Vec::with_capacity(b * b);
    for &qs in &q {
        let scores: Vec<f64> = k.iter().map(|&ks| qs * ks).collect();
        w.extend(tensor::softmax_f64(&scores));
    }
    Tensor::new(vec![b, b], w).expect("b×b")
}

fn pooled_features(features: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|f| {
            Ok(tensor::global_avg_pool(f)?
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect())
        })
        .collect()
}

/// The `B×B` attention matrix over the records' globally pooled features.
pub fn attention_matrix(records: &[FeatureRecord], p: &AggregatorParams) -> Result<Tensor<f64>> {
    let features: Vec<&Tensor> = records.iter().map(|r| &r.aligned).collect();
    check_same_shape(&features)?;
    p.check_channels(features[0].dims3()?.0)?;
    Ok(attention_from_pooled(&pooled_features(&features)?, p))
}

/// `(1/B) Σ_s (f_s + w_o ⊙ Σ_{s'} W_{ss'} f_{s'})`.
pub fn aggregate_attention(records: &[FeatureRecord], p: &AggregatorParams) -> Result<Tensor> {
    let features: Vec<&Tensor> = records.iter().map(|r| &r.aligned).collect();
    attention_over(&features, p)
}

pub(crate) fn attention_over(features: &[&Tensor], p: &AggregatorParams) -> Result<Tensor> {
    check_same_shape(features)?;
    let (c, h, w) = features[0].dims3()?;
    p.check_channels(c)?;
    let b = features.len();
    let attn = attention_from_pooled(&pooled_features(features)?, p);
    // (1/B) Σ_s Σ_s' W_ss' f_s' = Σ_s' colmean_s' f_s'
    let col_mean: Vec<f64> = (0..b)
        .map(|j| (0..b).map(|i| attn.data()[i * b + j]).sum::<f64>() / b as f64)
        .collect();
    let mean = mean_f64(features);
    let mixed = weighted_sum_f64(features, &col_mean);
    let plane = h * w;
    let out = mean
        .iter()
        .zip(&mixed)
        .enumerate()
        .map(|(i, (&m, &v))| m + p.w_o[i / plane] as f64 * v)
        .collect();
    Ok(to_tensor(features[0].shape(), out))
}

/// Per-pixel entropy weighting of aligned `K×H×W` logit maps. Returns the
/// weighted class-probability map and the weights used.
pub fn aggregate_perpixel(maps: &[&Tensor], k: usize) -> Result<(Tensor, PixelWeights)> {
    check_same_shape(maps)?;
    let (kk, h, w) = maps[0].dims3()?;
    if kk != k {
        return Err(Error::Shape(format!("logit maps have {kk} classes, expected {k}")));
    }
    let plane = h * w;
    let entropies: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| search::pixel_entropies(m))
        .collect::<Result<_>>()?;
    let mut weights = vec![vec![0f64; plane]; maps.len()];
    let mut probs = vec![0f64; k * plane];
    let mut column = vec![0f32; k];
    for px in 0..plane {
        let h_px: Vec<f64> = entropies.iter().map(|e| e[px]).collect();
        let wa = weights_from_entropies(&h_px, k)?;
        for (s, (m, &ws)) in maps.iter().zip(&wa.weights).enumerate() {
            weights[s][px] = ws;
            for (c, v) in column.iter_mut().enumerate() {
                *v = m.data()[c * plane + px];
            }
            for (c, pc) in tensor::softmax_f64(&column).into_iter().enumerate() {
                probs[c * plane + px] += ws * pc;
            }
        }
    }
    let probs = to_tensor(&[k, h, w], probs);
    Ok((
        probs,
        PixelWeights {
            weights,
            height: h,
            width: w,
        },
    ))
}

/// Argmax over classes at every pixel of a `K×H×W` map; first class wins ties.
pub fn label_map(probs: &Tensor) -> Result<Vec<usize>> {
    let (k, h, w) = probs.dims3()?;
    let plane = h * w;
    Ok((0..plane)
        .map(|px| {
            (1..k).fold(0, |best, c| {
                if probs.data()[c * plane + px] > probs.data()[best * plane + px] {
                    c
                } else {
                    best
                }
            })
        })
        .collect())
}

/// Combines records' aligned features and runs the frozen head.
pub fn predict_from_records(
    g: &ModelGraph,
    records: &[FeatureRecord],
    mode: AggregateMode,
    p: Option<&AggregatorParams>,
) -> Result<Tensor> {
    let feature = match mode {
        AggregateMode::Avg => aggregate_avg(&records.iter().map(|r| &r.aligned).collect::<Vec<_>>())?,
        AggregateMode::Entropy => aggregate_entropy(records, g.num_classes())?,
        AggregateMode::Attention => {
            let p = p.ok_or_else(|| Error::Config("attention aggregation needs parameters".into()))?;
            aggregate_attention(records, p)?
        }
    };
    g.run_head(&feature)
}

/// search → align → aggregate → head.
pub fn predict(
    g: &ModelGraph,
    x: &Tensor,
    cfg: &BudgetConfig,
    mode: AggregateMode,
    p: Option<&AggregatorParams>,
) -> Result<Tensor> {
    if g.is_dense_prediction() {
        return Err(Error::Config(format!(
            "model {} predicts per pixel; use segment",
            g.name()
        )));
    }
    if mode == AggregateMode::Attention && p.is_none() {
        return Err(Error::Config("attention aggregation needs parameters".into()));
    }
    let records = search::search(g, x, cfg, p)?;
    predict_from_records(g, &records, mode, p)
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    /// Weighted class probabilities at input resolution, `K×H×W`.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub weights: PixelWeights,
}

/// Dense-prediction counterpart of [`predict`]: every selected state's
/// logit map is aligned to the input grid and combined with per-pixel
/// entropy weights.
pub fn segment(g: &ModelGraph, x: &Tensor, cfg: &BudgetConfig) -> Result<Segmentation> {
    if !g.is_dense_prediction() {
        return Err(Error::Config(format!("model {} is not a dense predictor", g.name())));
    }
    let records = search::search(g, x, cfg, None)?;
    let maps = records
        .iter()
        .map(|r| phase::align_feature(g, &r.logits, &r.selection))
        .collect::<Result<Vec<_>>>()?;
    let (probs, weights) = aggregate_perpixel(&maps.iter().collect::<Vec<_>>(), g.num_classes())?;
    let labels = label_map(&probs)?;
    Ok(Segmentation {
        probs,
        labels,
        weights,
    })
}
