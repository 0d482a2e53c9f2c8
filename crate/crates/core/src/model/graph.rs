use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, PhaseIndex, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Stride-1 convolution; any stride is a following `Subsample` layer.
    Conv2d {
        pad: usize,
        weight: Tensor,
        bias: Tensor,
    },
    SlidingMax {
        k: usize,
    },
    Relu,
    /// The only layer kind whose phase can be searched.
    Subsample {
        rate_h: usize,
        rate_w: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::SlidingMax { .. } => "sliding_max",
            LayerKind::Relu => "relu",
            LayerKind::Subsample { .. } => "subsample",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// A validated sequential model. Layers before `head_index` form the
/// backbone, the rest the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    name: String,
    layers: Vec<Layer>,
    head_index: usize,
    input_shape: [usize; 3],
    num_classes: usize,
    /// Layer indices of the backbone's subsample layers, in network order.
    searchable: Vec<usize>,
    /// Output shape of every layer.
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<Layer>,
        head_index: usize,
        input_shape: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("model has no layers".into()));
        }
        if head_index > layers.len() {
            return Err(Error::Validation(format!(
                "head index {head_index} past the last of {} layers",
                layers.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Validation("model needs at least one class".into()));
        }
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("empty input shape {input_shape:?}")));
        }

        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = propagate(&layer.kind, &shape).map_err(|reason| Error::Layer {
                layer: i,
                name: layer.name.clone(),
                reason,
            })?;
            shapes.push(shape.clone());
        }

        let searchable: Vec<usize> = layers[..head_index]
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Subsample { .. }))
            .map(|(i, _)| i)
            .collect();
        if searchable.is_empty() {
            return Err(Error::Validation(
                "no subsample layer precedes the head, nothing to search".into(),
            ));
        }
        let backbone_out = &shapes[head_index - 1];
        if backbone_out.len() != 3 {
            return Err(Error::Layer {
                layer: head_index - 1,
                name: layers[head_index - 1].name.clone(),
                reason: format!("backbone must end in a C×H×W map, got {backbone_out:?}"),
            });
        }
        let out = shapes.last().unwrap();
        if out.first() != Some(&num_classes) || !(out.len() == 1 || out.len() == 3) {
            return Err(Error::Layer {
                layer: layers.len() - 1,
                name: layers.last().unwrap().name.clone(),
                reason: format!("model output {out:?} does not carry {num_classes} classes"),
            });
        }

        Ok(Self {
            name: name.into(),
            layers,
            head_index,
            input_shape,
            num_classes,
            searchable,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head_index(&self) -> usize {
        self.head_index
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of searchable subsample layers (`L`).
    pub fn num_searchable(&self) -> usize {
        self.searchable.len()
    }

    /// Layer index of each searchable subsample layer.
    pub fn searchable_layers(&self) -> &[usize] {
        &self.searchable
    }

    /// `(rate_h, rate_w)` of each searchable subsample layer.
    pub fn rates(&self) -> Vec<(usize, usize)> {
        self.searchable
            .iter()
            .map(|&i| match self.layers[i].kind {
                LayerKind::Subsample { rate_h, rate_w } => (rate_h, rate_w),
                _ => unreachable!("searchable layers are subsample layers"),
            })
            .collect()
    }

    /// Output shape of each layer, as found by shape propagation.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn backbone_output_shape(&self) -> &[usize] {
        &self.shapes[self.head_index - 1]
    }

    /// True when the head produces one logit map per pixel.
    pub fn is_dense_prediction(&self) -> bool {
        self.shapes.last().map_or(false, |s| s.len() == 3)
    }

    /// Size of the full state space: product of `rate_h·rate_w` over searchable layers.
    pub fn state_space_size(&self) -> u128 {
        self.rates()
            .iter()
            .map(|&(h, w)| (h * w) as u128)
            .product()
    }

    /// Runs layer `index`; `phase` applies only to subsample layers.
    pub fn apply_layer(&self, index: usize, x: &Tensor, phase: Option<(usize, usize)>) -> Result<Tensor> {
        match &self.layers[index].kind {
            LayerKind::Conv2d { pad, weight, bias } => tensor::conv2d_s1(x, weight, bias, *pad),
            LayerKind::SlidingMax { k } => tensor::sliding_max(x, *k),
            LayerKind::Relu => Ok(tensor::relu(x)),
            LayerKind::Subsample { rate_h, rate_w } => {
                let (s_h, s_w) = phase.unwrap_or((0, 0));
                tensor::subsample_phase(x, PhaseIndex::new(s_h, s_w, *rate_h, *rate_w)?)
            }
            LayerKind::GlobalAvgPool => tensor::global_avg_pool(x),
            LayerKind::Flatten => Ok(tensor::flatten(x)),
            LayerKind::Dense { weight, bias } => tensor::dense_head(x, weight, bias),
        }
    }

    /// Classifier head applied to a backbone feature.
    pub fn run_head(&self, feature: &Tensor) -> Result<Tensor> {
        let mut x = feature.clone();
        for i in self.head_index..self.layers.len() {
            x = self.apply_layer(i, &x, None)?;
        }
        Ok(x)
    }

    /// Conventional forward pass: every subsample layer at phase 0.
    pub fn forward_default(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut a = x.clone();
        for i in 0..self.layers.len() {
            a = self.apply_layer(i, &a, None)?;
        }
        Ok(a)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "model {} expects input {:?}, got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} input {:?}, {} classes, L = {}",
            self.name,
            self.input_shape,
            self.num_classes,
            self.num_searchable()
        )?;
        for (i, (layer, shape)) in self.layers.iter().zip(&self.shapes).enumerate() {
            let marker = if i == self.head_index { "-- head --\n" } else { "" };
            writeln!(f, "{marker}{i:>3} {:<16} {:<16} -> {shape:?}", layer.name, layer.kind.tag())?;
        }
        Ok(())
    }
}

/// Symbolic output shape of one layer.
fn propagate(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>, String> {
    let spatial = |what: &str| -> Result<(usize, usize, usize), String> {
        match input {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(format!("{what} needs a C×H×W input, got {input:?}")),
        }
    };
    match kind {
        LayerKind::Conv2d { pad, weight, bias } => {
            let (c, h, w) = spatial("conv2d")?;
            let [c_out, c_in, kh, kw] = weight.shape()[..] else {
                return Err(format!("conv weight must be rank 4, got {:?}", weight.shape()));
            };
            if c_in != c {
                return Err(format!("conv weight expects {c_in} channels, input has {c}"));
            }
            if kh != kw || kh == 0 {
                return Err(format!("conv kernel must be square, got {kh}×{kw}"));
            }
            if bias.shape() != [c_out] {
                return Err(format!("conv bias shape {:?}, expected [{c_out}]", bias.shape()));
            }
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            if hp < kh || wp < kh {
                return Err(format!("kernel {kh} larger than padded input {hp}×{wp}"));
            }
            Ok(vec![c_out, hp - kh + 1, wp - kh + 1])
        }
        LayerKind::SlidingMax { k } => {
            let (c, h, w) = spatial("sliding_max")?;
            if *k == 0 || *k > h || *k > w {
                return Err(format!("max filter window {k} invalid for a {h}×{w} map"));
            }
            Ok(vec![c, h, w])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Subsample { rate_h, rate_w } => {
            let (c, h, w) = spatial("subsample")?;
            let (oh, ow) = tensor::subsampled_extent(h, w, *rate_h, *rate_w).map_err(|e| e.to_string())?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::GlobalAvgPool => {
            let (c, h, w) = spatial("global_avg_pool")?;
            if h == 0 || w == 0 {
                return Err("global average pool over an empty map".into());
            }
            Ok(vec![c])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Dense { weight, bias } => {
            let [k, d] = weight.shape()[..] else {
                return Err(format!("dense weight must be rank 2, got {:?}", weight.shape()));
            };
            let n: usize = input.iter().product();
            if n != d {
                return Err(format!(
                    "dense weight {k}×{d} does not match the {n} incoming features"
                ));
            }
            if bias.shape() != [k] {
                return Err(format!("dense bias shape {:?}, expected [{k}]", bias.shape()));
            }
            Ok(vec![k])
        }
    }
}
