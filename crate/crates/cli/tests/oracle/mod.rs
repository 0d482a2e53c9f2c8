//! Independent reference implementations used by the acceptance suite.
//!
//! Nothing here calls the engine's tensor ops: strided layers are computed
//! the conventional way (only the sampled output positions), entropy and
//! softmax are re-derived, and models are built directly from layer lists.

#![allow(dead_code)]

use phasesearch::model::{Layer, LayerKind};
use phasesearch::{ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Conventional strided cross-correlation, computing only the outputs a
/// stride-`(rh, rw)` conv keeps. Accumulates in f64, rounds to f32.
fn strided_conv(x: &[f64], (c, h, w): (usize, usize, usize), weight: &Tensor, bias: &Tensor, pad: usize, (rh, rw): (usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
    let s = weight.shape();
    let (co, k) = (s[0], s[2]);
    let oh = (h + 2 * pad - k) / rh + 1;
    let ow = (w + 2 * pad - k) / rw + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.data()[o] as f64;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * rh + ky) as isize - pad as isize;
                            let ix = (xx * rw + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight.data()[((o * c + ci) * k + ky) * k + kx] as f64;
                            acc += wv * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = round32(acc);
            }
        }
    }
    (out, (co, oh, ow))
}

/// Conventional `k×k` max pool with stride `(rh, rw)`; windows running off
/// the bottom/right edge see the last row/column repeated.
fn strided_maxpool(x: &[f64], (c, h, w): (usize, usize, usize), k: usize, (rh, rw): (usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = (h / rh, w / rw);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = (y * rh + dy).min(h - 1);
                        let ix = (xx * rw + dx).min(w - 1);
                        m = m.max(x[(ch * h + iy) * w + ix]);
                    }
                }
                out[(ch * oh + y) * ow + xx] = m;
            }
        }
    }
    (out, (c, oh, ow))
}

fn plain_decimate(x: &[f64], (c, h, w): (usize, usize, usize), (rh, rw): (usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = (h / rh, w / rw);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(x[(ch * h + y * rh) * w + xx * rw]);
            }
        }
    }
    (out, (c, oh, ow))
}

/// The conventional forward pass: every conv or pool directly followed by
/// a subsample layer becomes a strided layer.
pub fn conventional_forward(g: &ModelGraph, x: &Tensor) -> Vec<f64> {
    conventional_prefix(g, x, g.layers().len())
}

/// The conventional pass over layers `0..stop`.
pub fn conventional_prefix(g: &ModelGraph, x: &Tensor, stop: usize) -> Vec<f64> {
    let layers = &g.layers()[..stop];
    let mut a: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let s = x.shape();
    let mut dims = (s[0], s[1], s[2]);
    let rate_after = |i: usize| match layers.get(i + 1).map(|l| &l.kind) {
        Some(LayerKind::Subsample { rate_h, rate_w }) => Some((*rate_h, *rate_w)),
        _ => None,
    };
    let mut i = 0;
    while i < layers.len() {
        match &layers[i].kind {
            LayerKind::Conv2d { pad, weight, bias } => {
                let r = rate_after(i);
                (a, dims) = strided_conv(&a, dims, weight, bias, *pad, r.unwrap_or((1, 1)));
                i += usize::from(r.is_some());
            }
            LayerKind::SlidingMax { k } => {
                let r = rate_after(i);
                (a, dims) = strided_maxpool(&a, dims, *k, r.unwrap_or((1, 1)));
                i += usize::from(r.is_some());
            }
            LayerKind::Subsample { rate_h, rate_w } => {
                (a, dims) = plain_decimate(&a, dims, (*rate_h, *rate_w));
            }
            LayerKind::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::GlobalAvgPool => {
                let plane = dims.1 * dims.2;
                a = a.chunks(plane).map(|p| round32(p.iter().sum::<f64>() / plane as f64)).collect();
                dims = (a.len(), 1, 1);
            }
            LayerKind::Flatten => {
                dims = (a.len(), 1, 1);
            }
            LayerKind::Dense { weight, bias } => {
                let d = weight.shape()[1];
                a = (0..weight.shape()[0])
                    .map(|r| {
                        let dotp: f64 = (0..d).map(|j| weight.data()[r * d + j] as f64 * a[j]).sum();
                        round32(dotp + bias.data()[r] as f64)
                    })
                    .collect();
                dims = (a.len(), 1, 1);
            }
        }
        i += 1;
    }
    a
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(logits: &[f32]) -> f64 {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    softmax(&z).into_iter().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

fn random_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn conv(r: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Layer {
    let scale = (3.0 / (cin * k * k) as f32).sqrt();
    Layer::new(
        name,
        LayerKind::Conv2d {
            pad: k / 2,
            weight: random_tensor(r, vec![cout, cin, k, k], scale),
            bias: random_tensor(r, vec![cout], 0.1),
        },
    )
}

/// Describes one stage of a random model: rates and whether the stage
/// subsamples after a max filter instead of a conv.
#[derive(Clone, Copy, Debug)]
pub struct Stage {
    pub rate: (usize, usize),
    pub pool: bool,
}

/// A sequential model with `same` convolutions, one subsample per stage,
/// and a `gap → dense` head. Input extents are `extent_mult` times the
/// product of the rates.
pub fn random_model(seed: u64, stages: &[Stage], classes: usize, extent_mult: usize) -> ModelGraph {
    let mut r = rng(seed);
    let h = extent_mult * stages.iter().map(|s| s.rate.0).product::<usize>();
    let w = extent_mult * stages.iter().map(|s| s.rate.1).product::<usize>();
    let mut layers = Vec::new();
    let mut c = 1 + (seed as usize % 2);
    let c_in = c;
    for (i, st) in stages.iter().enumerate() {
        let cout = r.gen_range(2..6);
        let k = [1, 3, 3, 5][r.gen_range(0..4)];
        layers.push(conv(&mut r, &format!("conv{i}"), c, cout, k));
        c = cout;
        if st.pool {
            layers.push(Layer::new(format!("relu{i}"), LayerKind::Relu));
            layers.push(Layer::new(format!("pool{i}"), LayerKind::SlidingMax { k: 2 }));
        }
        layers.push(Layer::new(
            format!("sub{i}"),
            LayerKind::Subsample {
                rate_h: st.rate.0,
                rate_w: st.rate.1,
            },
        ));
        if !st.pool {
            layers.push(Layer::new(format!("relu{i}"), LayerKind::Relu));
        }
    }
    let head = layers.len();
    layers.push(Layer::new("gap", LayerKind::GlobalAvgPool));
    layers.push(Layer::new(
        "fc",
        LayerKind::Dense {
            weight: random_tensor(&mut r, vec![classes, c], 1.5),
            bias: random_tensor(&mut r, vec![classes], 0.2),
        },
    ));
    ModelGraph::new(format!("random-{seed}"), layers, head, [c_in, h, w], classes).unwrap()
}

/// A 1-channel stack of identity 3×3 convs, each followed by a subsample.
pub fn identity_stack(rates: &[(usize, usize)], extent_mult: usize) -> ModelGraph {
    let h = extent_mult * rates.iter().map(|r| r.0).product::<usize>();
    let w = extent_mult * rates.iter().map(|r| r.1).product::<usize>();
    let mut layers = Vec::new();
    for (i, &(rate_h, rate_w)) in rates.iter().enumerate() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        layers.push(Layer::new(
            format!("id{i}"),
            LayerKind::Conv2d {
                pad: 1,
                weight: Tensor::new(vec![1, 1, 3, 3], k).unwrap(),
                bias: Tensor::vector(vec![0.0]),
            },
        ));
        layers.push(Layer::new(format!("sub{i}"), LayerKind::Subsample { rate_h, rate_w }));
    }
    let head = layers.len();
    layers.push(Layer::new("gap", LayerKind::GlobalAvgPool));
    layers.push(Layer::new(
        "fc",
        LayerKind::Dense {
            weight: Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0, 0.0]),
        },
    ));
    ModelGraph::new("identity", layers, head, [1, h, w], 2).unwrap()
}

pub fn random_input(g: &ModelGraph, seed: u64) -> Tensor {
    let [c, h, w] = g.input_shape();
    let mut r = rng(seed);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Every selection of a model, in lexicographic order.
pub fn all_selections(rates: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![vec![]];
    for &(rh, rw) in rates {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..rh).flat_map(move |a| {
                    let s = s.clone();
                    (0..rw).map(move |b| {
                        let mut t = s.clone();
                        t.push((a, b));
                        t
                    })
                })
            })
            .collect();
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
