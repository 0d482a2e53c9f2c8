//! Greedy best-first search over selection vectors under a forward-pass
//! budget, plus a brute-force enumerator used as its oracle.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{attention_from_pooled, AggregatorParams};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::phase::{self, LayerWindow, Selection};
use crate::tensor::{self, Tensor};

/// Largest state space [`exhaustive_search`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CriterionKind {
    Entropy,
    Learned,
    Random,
    Offset,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 4] = [Self::Entropy, Self::Learned, Self::Random, Self::Offset];

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::Learned => "learned",
            Self::Random => "random",
            Self::Offset => "offset",
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetConfig {
    /// Number of states kept (`b_ours`).
    pub budget: usize,
    /// Searchable layers that may be perturbed; `None` means the default window.
    pub layer_window: Option<LayerWindow>,
    pub criterion: CriterionKind,
    /// Seeds the `random` criterion.
    pub seed: u64,
}

impl BudgetConfig {
    pub fn new(budget: usize, criterion: CriterionKind) -> Self {
        Self {
            budget,
            layer_window: None,
            criterion,
            seed: 0,
        }
    }

    pub fn with_window(mut self, window: LayerWindow) -> Self {
        self.layer_window = Some(window);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn window(&self, num_layers: usize) -> LayerWindow {
        self.layer_window
            .unwrap_or_else(|| LayerWindow::default_for(num_layers))
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        self.window(num_layers).check(num_layers)
    }
}

/// A visited state: its aligned backbone feature and head output.
#[derive(Clone, Debug)]
pub struct FeatureRecord {
    pub selection: Selection,
    pub aligned: Tensor,
    pub logits: Tensor,
    /// Prediction entropy in nats (mean over pixels for logit maps).
    pub entropy: f64,
    pub criterion: f64,
}

/// Shannon entropy `−Σ p ln p` of `softmax(logits)` in nats. A `K×H×W` map
/// gives the mean of its per-pixel entropies.
pub fn criterion_entropy(logits: &Tensor) -> f64 {
    if logits.shape().len() == 3 {
        let e = pixel_entropies(logits).expect("rank-3 logits");
        return e.iter().sum::<f64>() / e.len().max(1) as f64;
    }
    entropy_of(logits.data())
}

fn entropy_of(logits: &[f32]) -> f64 {
    tensor::softmax_f64(logits)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Entropy of the class distribution at every pixel of a `K×H×W` logit map,
/// row-major over `H×W`.
pub fn pixel_entropies(logits: &Tensor) -> Result<Vec<f64>> {
    let (k, h, w) = logits.dims3()?;
    let plane = h * w;
    let mut column = vec![0f32; k];
    Ok((0..plane)
        .map(|px| {
            for (c, v) in column.iter_mut().enumerate() {
                *v = logits.data()[c * plane + px];
            }
            entropy_of(&column)
        })
        .collect())
}

/// `(Σ_{s'} W[s', s])⁻¹`: the reciprocal of the attention state `index`
/// receives. Zero mass gives `+∞`.
pub fn criterion_learned(w: &Tensor<f64>, index: usize) -> f64 {
    let b = w.shape()[0];
    let mass: f64 = (0..b).map(|r| w.data()[r * b + index]).sum();
    if mass > 0.0 {
        1.0 / mass
    } else {
        f64::INFINITY
    }
}

/// Everything the search did, for inspection and testing.
#[derive(Clone, Debug)]
pub struct SearchTrace {
    /// Every evaluated state, in insertion order; the default state is first.
    pub visited: Vec<FeatureRecord>,
    /// Index (into `visited`) of the state each record was expanded from.
    pub parents: Vec<Option<usize>>,
    /// `(visited index, 1-based layer)` for each expansion, in order.
    pub expansions: Vec<(usize, usize)>,
    /// Indices into `visited` of the returned states, ascending.
    pub returned: Vec<usize>,
}

impl SearchTrace {
    pub fn into_returned(self) -> Vec<FeatureRecord> {
        let keep: BTreeSet<usize> = self.returned.into_iter().collect();
        self.visited
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, r)| r)
            .collect()
    }
}

struct QueueEntry {
    priority: f64,
    seq: u64,
    index: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .priority
            .total_cmp(&self.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn make_record(g: &ModelGraph, selection: Selection, feature: &Tensor, logits: Tensor) -> Result<FeatureRecord> {
    let aligned = phase::align_feature(g, feature, &selection)?;
    let entropy = criterion_entropy(&logits);
    Ok(FeatureRecord {
        selection,
        aligned,
        logits,
        entropy,
        criterion: 0.0,
    })
}

fn pooled(r: &FeatureRecord) -> Result<Vec<f64>> {
    Ok(tensor::global_avg_pool(&r.aligned)?
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect())
}

/// Returns the `budget` lowest-criterion visited states, always including
/// the default state, in visit order.
pub fn search(
    g: &ModelGraph,
    x: &Tensor,
    cfg: &BudgetConfig,
    agg: Option<&AggregatorParams>,
) -> Result<Vec<FeatureRecord>> {
    Ok(search_detailed(g, x, cfg, agg)?.into_returned())
}

pub fn search_detailed(
    g: &ModelGraph,
    x: &Tensor,
    cfg: &BudgetConfig,
    agg: Option<&AggregatorParams>,
) -> Result<SearchTrace> {
    let num_layers = g.num_searchable();
    cfg.validate(num_layers)?;
    let agg = match (cfg.criterion, agg) {
        (CriterionKind::Learned, None) => {
            return Err(Error::Config("the learned criterion needs aggregator parameters".into()))
        }
        (CriterionKind::Learned, Some(p)) => {
            p.check_channels(g.backbone_output_shape()[0])?;
            Some(p)
        }
        _ => None,
    };
    let window = cfg.window(num_layers);
    let layers: Vec<usize> = (window.first..=window.last).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let root_sel = Selection::default_for(g);
    let (feature, logits) = phase::forward_with_selection(g, x, &root_sel)?;
    let mut root = make_record(g, root_sel.clone(), &feature, logits)?;
    root.criterion = match cfg.criterion {
        CriterionKind::Entropy => root.entropy,
        CriterionKind::Learned => 1.0,
        CriterionKind::Random => rng.gen(),
        CriterionKind::Offset => 0.0,
    };

    let mut visited = vec![root];
    let mut parents = vec![None];
    let mut expanded: Vec<BTreeSet<usize>> = vec![BTreeSet::new()];
    let mut index: HashMap<Selection, usize> = HashMap::from([(root_sel, 0)]);
    let mut pooled_cache = match agg {
        Some(_) => vec![pooled(&visited[0])?],
        None => Vec::new(),
    };
    let mut expansions = Vec::new();
    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    queue.push(QueueEntry {
        priority: 0.0,
        seq,
        index: 0,
    });

    while visited.len() < cfg.budget {
        let Some(QueueEntry { index: i, .. }) = queue.pop() else {
            break;
        };
        let next = layers.iter().copied().find(|l| {
            !expanded[i].contains(l) && visited[i].selection.phases()[l - 1] == (0, 0)
        });
        let Some(layer) = next else {
            continue;
        };
        expanded[i].insert(layer);
        expansions.push((i, layer));
        let first_new = visited.len();
        for nb in phase::neighbor_batch(g, x, &visited[i].selection, layer)? {
            if index.contains_key(&nb.selection) {
                continue;
            }
            let rec = make_record(g, nb.selection.clone(), &nb.feature, nb.logits)?;
            index.insert(nb.selection, visited.len());
            if agg.is_some() {
                pooled_cache.push(pooled(&rec)?);
            }
            visited.push(rec);
            parents.push(Some(i));
            expanded.push(layers.iter().copied().filter(|&l| l <= layer).collect());
        }
        if let Some(p) = agg {
            let w = attention_from_pooled(&pooled_cache, p);
            for j in first_new..visited.len() {
                visited[j].criterion = criterion_learned(&w, j);
            }
        }
        for j in first_new..visited.len() {
            let r = &mut visited[j];
            match cfg.criterion {
                CriterionKind::Entropy => r.criterion = r.entropy,
                CriterionKind::Learned => {}
                CriterionKind::Random => r.criterion = rng.gen(),
                CriterionKind::Offset => {
                    let (dy, dx) = phase::offset(&r.selection);
                    r.criterion = (dy + dx) as f64;
                }
            }
            seq += 1;
            queue.push(QueueEntry {
                priority: r.criterion,
                seq,
                index: j,
            });
        }
        // a state keeps its place in line until every layer it may perturb is expanded
        if layers.iter().any(|l| !expanded[i].contains(l)) {
            seq += 1;
            queue.push(QueueEntry {
                priority: visited[i].criterion,
                seq,
                index: i,
            });
        }
    }

    let returned = lowest_with_default(&visited, cfg.budget);
    Ok(SearchTrace {
        visited,
        parents,
        expansions,
        returned,
    })
}

/// The default state (index 0) plus the `budget − 1` other states with the
/// lowest criterion, ties broken by visit order; ascending indices.
fn lowest_with_default(visited: &[FeatureRecord], budget: usize) -> Vec<usize> {
    let mut rest: Vec<usize> = (1..visited.len()).collect();
    rest.sort_by(|&a, &b| {
        visited[a]
            .criterion
            .total_cmp(&visited[b].criterion)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = std::iter::once(0)
        .chain(rest.into_iter().take(budget.saturating_sub(1)))
        .collect();
    keep.sort_unstable();
    keep
}

/// Every state in the full space, scored by entropy, ordered by criterion
/// and then selection.
pub fn exhaustive_search(g: &ModelGraph, x: &Tensor) -> Result<Vec<FeatureRecord>> {
    exhaustive_in_window(g, x, LayerWindow::full(g.num_searchable()))
}

/// Like [`exhaustive_search`], restricted to states whose non-default
/// phases fall inside `window`.
pub fn exhaustive_in_window(g: &ModelGraph, x: &Tensor, window: LayerWindow) -> Result<Vec<FeatureRecord>> {
    let size: u128 = g
        .rates()
        .iter()
        .enumerate()
        .filter(|(i, _)| window.contains(i + 1))
        .map(|(_, &(h, w))| (h * w) as u128)
        .product();
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::Config(format!(
            "state space has {size} states, more than the {EXHAUSTIVE_LIMIT} that can be enumerated"
        )));
    }
    let mut out = Vec::with_capacity(size as usize);
    phase::for_each_state(g, x, window, |s, feature, logits| {
        let mut r = make_record(g, s, &feature, logits)?;
        r.criterion = r.entropy;
        out.push(r);
        Ok(())
    })?;
    out.sort_by(|a, b| {
        a.criterion
            .total_cmp(&b.criterion)
            .then_with(|| a.selection.cmp(&b.selection))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn entropy_examples() {
        let sharp = Tensor::vector(vec![50.0, -50.0]);
        assert_abs_diff_eq!(criterion_entropy(&sharp), 0.0, epsilon = 1e-12);
        let flat = Tensor::vector(vec![0.3; 10]);
        assert_abs_diff_eq!(criterion_entropy(&flat), 10f64.ln(), epsilon = 1e-12);
        // p = (0.9, 0.1)
        let z = Tensor::vector(vec![(9f32).ln(), 0.0]);
        let expect = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert_abs_diff_eq!(criterion_entropy(&z), expect, epsilon = 1e-6);
        assert_abs_diff_eq!(expect, 0.32508, epsilon = 1e-5);
    }

    #[test]
    fn map_entropy_is_pixel_mean() {
        // 2 classes, 1×2 map: one sharp pixel, one uniform pixel
        let z = Tensor::new(vec![2, 1, 2], vec![50.0, 0.0, -50.0, 0.0]).unwrap();
        let e = pixel_entropies(&z).unwrap();
        assert_abs_diff_eq!(e[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(criterion_entropy(&z), 2f64.ln() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn learned_criterion_examples() {
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert_eq!(criterion_learned(&one, 0), 1.0);
        let half = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        assert_eq!(criterion_learned(&half, 0), 1.0);
        assert_eq!(criterion_learned(&half, 1), 1.0);
        // column 1 receives 0.8 + 0.6 + 0.6 = 2.0
        let w = Tensor::new(vec![3, 3], vec![0.1, 0.8, 0.1, 0.2, 0.6, 0.2, 0.3, 0.6, 0.1]).unwrap();
        assert_abs_diff_eq!(criterion_learned(&w, 1), 0.5, epsilon = 1e-12);
        let dead = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(criterion_learned(&dead, 1), f64::INFINITY);
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in CriterionKind::ALL {
            assert_eq!(c.to_string().parse::<CriterionKind>().unwrap(), c);
        }
        assert!("softmax".parse::<CriterionKind>().is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(BudgetConfig::new(0, CriterionKind::Entropy).validate(3).is_err());
        let c = BudgetConfig::new(4, CriterionKind::Entropy);
        assert_eq!(c.window(4), LayerWindow::new(2, 3));
        assert!(c.clone().with_window(LayerWindow::new(1, 5)).validate(4).is_err());
    }

    #[test]
    fn queue_is_fifo_on_ties() {
        let mut q = BinaryHeap::new();
        for (seq, p) in [(0, 1.0), (1, 0.5), (2, 1.0), (3, 0.5)] {
            q.push(QueueEntry {
                priority: p,
                seq,
                index: seq as usize,
            });
        }
        let order: Vec<usize> = std::iter::from_fn(|| q.pop().map(|e| e.index)).collect();
        assert_eq!(order, vec![1, 3, 0, 2]);
    }
}
