//! Forward passes parameterized by a selection vector, batched neighbour
//! expansion, and alignment of per-state features to the input grid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{self, Tensor};

/// One phase per searchable subsample layer, in network order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Selection {
    phases: Vec<(usize, usize)>,
    rates: Vec<(usize, usize)>,
}

impl Selection {
    pub fn new(phases: Vec<(usize, usize)>, rates: Vec<(usize, usize)>) -> Result<Self> {
        if phases.len() != rates.len() {
            return Err(Error::Validation(format!(
                "selection has {} phases for {} subsample layers",
                phases.len(),
                rates.len()
            )));
        }
        for (i, (&(s_h, s_w), &(r_h, r_w))) in phases.iter().zip(&rates).enumerate() {
            if r_h == 0 || r_w == 0 || s_h >= r_h || s_w >= r_w {
                return Err(Error::Range(format!(
                    "layer {}: phase ({s_h}, {s_w}) outside rate ({r_h}, {r_w})",
                    i + 1
                )));
            }
        }
        Ok(Self { phases, rates })
    }

    /// The all-zero state, i.e. the conventional forward pass.
    pub fn zeros(rates: Vec<(usize, usize)>) -> Self {
        Self {
            phases: vec![(0, 0); rates.len()],
            rates,
        }
    }

    pub fn default_for(g: &ModelGraph) -> Self {
        Self::zeros(g.rates())
    }

    pub fn phases(&self) -> &[(usize, usize)] {
        &self.phases
    }

    pub fn rates(&self) -> &[(usize, usize)] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn is_default(&self) -> bool {
        self.phases.iter().all(|&p| p == (0, 0))
    }

    /// Copy with the phase at 0-based position `pos` replaced.
    pub fn with_phase(&self, pos: usize, phase: (usize, usize)) -> Self {
        let mut s = self.clone();
        s.phases[pos] = phase;
        s
    }

    pub fn check_against(&self, g: &ModelGraph) -> Result<()> {
        if self.phases.len() != g.num_searchable() {
            return Err(Error::Validation(format!(
                "selection has {} phases, model has {} searchable layers",
                self.phases.len(),
                g.num_searchable()
            )));
        }
        if self.rates != g.rates() {
            return Err(Error::Validation(format!(
                "selection rates {:?} do not match model rates {:?}",
                self.rates,
                g.rates()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (s_h, s_w) in &self.phases {
            write!(f, "({s_h},{s_w})")?;
        }
        Ok(())
    }
}

/// Inclusive, 1-based range of searchable layer positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerWindow {
    pub first: usize,
    pub last: usize,
}

impl LayerWindow {
    pub fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    pub fn full(num_layers: usize) -> Self {
        Self {
            first: 1,
            last: num_layers,
        }
    }

    /// Every layer but the first and last; the full range when `L < 3`.
    pub fn default_for(num_layers: usize) -> Self {
        if num_layers >= 3 {
            Self {
                first: 2,
                last: num_layers - 1,
            }
        } else {
            Self::full(num_layers)
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.first..=self.last).contains(&layer)
    }

    pub fn check(&self, num_layers: usize) -> Result<()> {
        if self.first < 1 || self.first > self.last || self.last > num_layers {
            return Err(Error::Config(format!(
                "layer window {self} not within 1..{num_layers}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

impl FromStr for LayerWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer window `{s}` is not of the form a..b"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let b = b.strip_prefix('=').unwrap_or(b);
        Ok(Self {
            first: a.trim().parse().map_err(|_| bad())?,
            last: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Runs layers `from..to` of the graph, feeding searchable subsample
/// layers their phase from `s`.
fn run_layers(g: &ModelGraph, x: &Tensor, from: usize, to: usize, s: &Selection) -> Result<Tensor> {
    let searchable = g.searchable_layers();
    let mut a = x.clone();
    for i in from..to {
        let phase = searchable.binary_search(&i).ok().map(|pos| s.phases[pos]);
        a = g.apply_layer(i, &a, phase)?;
    }
    Ok(a)
}

/// Backbone output (unaligned) and head logits for state `s`.
pub fn forward_with_selection(g: &ModelGraph, x: &Tensor, s: &Selection) -> Result<(Tensor, Tensor)> {
    g.check_input(x)?;
    s.check_against(g)?;
    let feature = run_layers(g, x, 0, g.head_index(), s)?;
    let logits = g.run_head(&feature)?;
    Ok((feature, logits))
}

#[derive(Clone, Debug)]
pub struct Neighbor {
    pub selection: Selection,
    pub feature: Tensor,
    pub logits: Tensor,
}

/// The `rate_h·rate_w − 1` states that differ from `s` only by a non-zero
/// phase at searchable layer `layer` (1-based).
///
/// Layers before the subsample run once at stride 1; every phase is then
/// extracted from that single activation and only the remaining layers are
/// run per phase.
pub fn neighbor_batch(g: &ModelGraph, x: &Tensor, s: &Selection, layer: usize) -> Result<Vec<Neighbor>> {
    g.check_input(x)?;
    s.check_against(g)?;
    if layer < 1 || layer > g.num_searchable() {
        return Err(Error::Range(format!(
            "layer {layer} outside 1..{}",
            g.num_searchable()
        )));
    }
    let pos = layer - 1;
    if s.phases[pos] != (0, 0) {
        return Err(Error::Range(format!(
            "layer {layer} of {s} already has a non-default phase"
        )));
    }
    let sub = g.searchable_layers()[pos];
    let (rate_h, rate_w) = s.rates[pos];
    let prefix = run_layers(g, x, 0, sub, s)?;
    let phases = tensor::subsample_all_phases(&prefix, rate_h, rate_w)?;
    phases
        .into_iter()
        .enumerate()
        .skip(1)
        .map(|(k, phased)| {
            let selection = s.with_phase(pos, (k / rate_w, k % rate_w));
            let feature = run_layers(g, &phased, sub + 1, g.head_index(), &selection)?;
            let logits = g.run_head(&feature)?;
            Ok(Neighbor {
                selection,
                feature,
                logits,
            })
        })
        .collect()
}

/// Input-resolution displacement of state `s`:
/// `Δ = s₁ + s₂·R₁ + s₃·R₁·R₂ + …`, independently per axis.
pub fn offset(s: &Selection) -> (usize, usize) {
    let (mut dy, mut dx) = (0, 0);
    let (mut stride_h, mut stride_w) = (1, 1);
    for (&(s_h, s_w), &(r_h, r_w)) in s.phases.iter().zip(&s.rates) {
        dy += s_h * stride_h;
        dx += s_w * stride_w;
        stride_h *= r_h;
        stride_w *= r_w;
    }
    (dy, dx)
}

/// Registers a state's backbone output with the default state's: nearest
/// upsampling to the input resolution, then a shift by `Δ` toward the
/// bottom-right so each activation sits over the input pixel it sampled.
pub fn align_feature(g: &ModelGraph, raw: &Tensor, s: &Selection) -> Result<Tensor> {
    let [_, h, w] = g.input_shape();
    let up = tensor::nearest_resize(raw, h, w)?;
    let (dy, dx) = offset(s);
    if dy == 0 && dx == 0 {
        return Ok(up);
    }
    tensor::translate_clamp(&up, -(dy as isize), -(dx as isize))
}

/// Nearest upsampling only, without the phase shift.
pub fn resize_feature(g: &ModelGraph, raw: &Tensor) -> Result<Tensor> {
    let [_, h, w] = g.input_shape();
    tensor::nearest_resize(raw, h, w)
}

/// Visits every state whose non-default phases lie inside `window`,
/// sharing the computation of common prefixes. States arrive in
/// lexicographic order.
pub fn for_each_state(
    g: &ModelGraph,
    x: &Tensor,
    window: LayerWindow,
    mut visit: impl FnMut(Selection, Tensor, Tensor) -> Result<()>,
) -> Result<()> {
    g.check_input(x)?;
    window.check(g.num_searchable())?;
    let rates = g.rates();
    let mut phases = Vec::with_capacity(rates.len());
    descend(g, x.clone(), 0, &rates, window, &mut phases, &mut visit)
}

fn descend(
    g: &ModelGraph,
    act: Tensor,
    from: usize,
    rates: &[(usize, usize)],
    window: LayerWindow,
    phases: &mut Vec<(usize, usize)>,
    visit: &mut impl FnMut(Selection, Tensor, Tensor) -> Result<()>,
) -> Result<()> {
    let pos = phases.len();
    let next_sub = g.searchable_layers().get(pos).copied().unwrap_or(g.head_index());
    let mut a = act;
    for i in from..next_sub {
        a = g.apply_layer(i, &a, None)?;
    }
    if pos == rates.len() {
        let logits = g.run_head(&a)?;
        let s = Selection {
            phases: phases.clone(),
            rates: rates.to_vec(),
        };
        return visit(s, a, logits);
    }
    let (r_h, r_w) = rates[pos];
    let branches = if window.contains(pos + 1) {
        tensor::subsample_all_phases(&a, r_h, r_w)?
    } else {
        vec![g.apply_layer(next_sub, &a, None)?]
    };
    for (k, branch) in branches.into_iter().enumerate() {
        phases.push((k / r_w, k % r_w));
        descend(g, branch, next_sub + 1, rates, window, phases, visit)?;
        phases.pop();
    }
    Ok(())
}
