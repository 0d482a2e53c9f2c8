#![allow(dead_code)]

use std::path::{Path, PathBuf};

use phasesearch::model::{Layer, LayerKind};
use phasesearch::{load_idx, load_model, Dataset, ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn toy() -> ModelGraph {
    load_model(fixtures().join("toy-s0.psb")).unwrap()
}

pub fn digits(n: usize) -> Dataset {
    let f = fixtures();
    load_idx(f.join("digits-test-images.idx"), f.join("digits-test-labels.idx"))
        .unwrap()
        .take(n)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn conv(r: &mut ChaCha8Rng, name: String, cin: usize, cout: usize) -> Layer {
    let scale = (3.0 / (cin * 9) as f32).sqrt();
    Layer::new(
        name,
        LayerKind::Conv2d {
            pad: 1,
            weight: random_tensor(r, vec![cout, cin, 3, 3], scale),
            bias: random_tensor(r, vec![cout], 0.1),
        },
    )
}

fn backbone(r: &mut ChaCha8Rng, rates: &[(usize, usize)], channels: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c = 1;
    for (i, &(rate_h, rate_w)) in rates.iter().enumerate() {
        layers.push(conv(r, format!("conv{i}"), c, channels));
        layers.push(Layer::new(format!("sub{i}"), LayerKind::Subsample { rate_h, rate_w }));
        layers.push(Layer::new(format!("relu{i}"), LayerKind::Relu));
        c = channels;
    }
    layers
}

fn extent(rates: &[(usize, usize)], mult: usize) -> [usize; 3] {
    [
        1,
        mult * rates.iter().map(|r| r.0).product::<usize>(),
        mult * rates.iter().map(|r| r.1).product::<usize>(),
    ]
}

/// conv → subsample → relu per rate, then `gap → dense`.
pub fn classifier(seed: u64, rates: &[(usize, usize)], classes: usize) -> ModelGraph {
    let mut r = rng(seed);
    let channels = 4;
    let mut layers = backbone(&mut r, rates, channels);
    let head = layers.len();
    layers.push(Layer::new("gap", LayerKind::GlobalAvgPool));
    layers.push(Layer::new(
        "fc",
        LayerKind::Dense {
            weight: random_tensor(&mut r, vec![classes, channels], 2.0),
            bias: random_tensor(&mut r, vec![classes], 0.2),
        },
    ));
    ModelGraph::new(format!("clf-{seed}"), layers, head, extent(rates, 2), classes).unwrap()
}

/// Same backbone with a 1×1 conv head producing a logit map.
pub fn segmenter(seed: u64, rates: &[(usize, usize)], classes: usize) -> ModelGraph {
    let mut r = rng(seed);
    let channels = 4;
    let mut layers = backbone(&mut r, rates, channels);
    let head = layers.len();
    layers.push(Layer::new(
        "classify",
        LayerKind::Conv2d {
            pad: 0,
            weight: random_tensor(&mut r, vec![classes, channels, 1, 1], 2.0),
            bias: random_tensor(&mut r, vec![classes], 0.2),
        },
    ));
    ModelGraph::new(format!("seg-{seed}"), layers, head, extent(rates, 2), classes).unwrap()
}

pub fn random_input(g: &ModelGraph, seed: u64) -> Tensor {
    let [c, h, w] = g.input_shape();
    let mut r = rng(seed);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn entropy_of(logits: &[f32]) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}
