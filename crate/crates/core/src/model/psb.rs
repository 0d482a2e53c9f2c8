//! The `PSB1` weight container.
//!
//! Layout: magic `PSB1`, little-endian `u32` version (1), little-endian
//! `u32` header length, a UTF-8 JSON header with sorted keys, then the raw
//! little-endian `f32` blobs the header points into (byte offsets relative
//! to the start of the blob section, row-major).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Layer, LayerKind, ModelGraph};
use crate::aggregate::AggregatorParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSB1";
pub const VERSION: u32 = 1;

pub const KIND_MODEL: &str = "model";
pub const KIND_AGGREGATOR: &str = "aggregator";

// Struct fields are declared in alphabetical order so the serialized
// header has sorted keys.

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub offset: u64,
    pub shape: Vec<usize>,
}

/// One serialized layer: kind tag, integer parameters and blob references.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<TensorRef>,
    pub kind: String,
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<TensorRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub head_index: usize,
    pub input_shape: Vec<usize>,
    pub name: String,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    layers: Vec<LayerSpec>,
    meta: ModelMeta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct AggregatorMeta {
    channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct AggregatorHeader {
    kind: String,
    meta: AggregatorMeta,
    tensors: BTreeMap<String, TensorRef>,
}

#[derive(Deserialize)]
struct KindProbe {
    kind: String,
}

struct Container<'a> {
    header: &'a [u8],
    blobs: &'a [u8],
}

fn split_container(bytes: &[u8]) -> Result<Container<'_>> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::Format("not a PSB1 file (bad magic)".into()));
        }
        return Err(truncated("container preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "not a PSB1 file (magic {:?})",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported PSB1 version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| truncated("header"))?;
    Ok(Container {
        header: &bytes[12..header_end],
        blobs: &bytes[header_end..],
    })
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("PSB1 file truncated inside the {what}"),
    ))
}

fn read_tensor(blobs: &[u8], r: &TensorRef) -> Result<Tensor> {
    let n: usize = r.shape.iter().product();
    let start = usize::try_from(r.offset).map_err(|_| truncated("blob section"))?;
    if start % 4 != 0 {
        return Err(Error::Format(format!("blob offset {start} is not 4-byte aligned")));
    }
    let end = start
        .checked_add(n * 4)
        .filter(|&e| e <= blobs.len())
        .ok_or_else(|| truncated("blob section"))?;
    let data = blobs[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(r.shape.clone(), data)
}

fn header_kind(header: &[u8]) -> Result<String> {
    let probe: KindProbe = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("PSB1 header is not valid JSON: {e}")))?;
    Ok(probe.kind)
}

fn param(spec: &LayerSpec, key: &str, index: usize) -> Result<usize> {
    spec.params.get(key).copied().ok_or_else(|| Error::Layer {
        layer: index,
        name: spec.name.clone(),
        reason: format!("{} layer is missing parameter `{key}`", spec.kind),
    })
}

fn tensors(spec: &LayerSpec, blobs: &[u8], index: usize) -> Result<(Tensor, Tensor)> {
    let missing = |what: &str| Error::Layer {
        layer: index,
        name: spec.name.clone(),
        reason: format!("{} layer has no {what} tensor", spec.kind),
    };
    let weight = read_tensor(blobs, spec.weight.as_ref().ok_or_else(|| missing("weight"))?)?;
    let bias = read_tensor(blobs, spec.bias.as_ref().ok_or_else(|| missing("bias"))?)?;
    Ok((weight, bias))
}

fn layer_from_spec(spec: &LayerSpec, blobs: &[u8], index: usize) -> Result<Layer> {
    let kind = match spec.kind.as_str() {
        "conv2d" => {
            let (weight, bias) = tensors(spec, blobs, index)?;
            LayerKind::Conv2d {
                pad: spec.params.get("pad").copied().unwrap_or(0),
                weight,
                bias,
            }
        }
        "sliding_max" => LayerKind::SlidingMax {
            k: param(spec, "k", index)?,
        },
        "relu" => LayerKind::Relu,
        "subsample" => LayerKind::Subsample {
            rate_h: param(spec, "rate_h", index)?,
            rate_w: param(spec, "rate_w", index)?,
        },
        "global_avg_pool" => LayerKind::GlobalAvgPool,
        "flatten" => LayerKind::Flatten,
        "dense" => {
            let (weight, bias) = tensors(spec, blobs, index)?;
            LayerKind::Dense { weight, bias }
        }
        other => {
            return Err(Error::Format(format!(
                "layer {index} ({}) has unknown kind `{other}`",
                spec.name
            )))
        }
    };
    if let LayerKind::Subsample { rate_h, rate_w } = kind {
        if rate_h == 0 || rate_w == 0 {
            return Err(Error::Layer {
                layer: index,
                name: spec.name.clone(),
                reason: "subsample rates must be at least 1".into(),
            });
        }
    }
    Ok(Layer::new(spec.name.clone(), kind))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let c = split_container(bytes)?;
    let kind = header_kind(c.header)?;
    if kind != KIND_MODEL {
        return Err(Error::Format(format!("expected a `{KIND_MODEL}` container, found `{kind}`")));
    }
    let header: ModelHeader = serde_json::from_slice(c.header)
        .map_err(|e| Error::Format(format!("malformed model header: {e}")))?;
    let layers = header
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| layer_from_spec(spec, c.blobs, i))
        .collect::<Result<Vec<_>>>()?;
    let input_shape: [usize; 3] = header
        .meta
        .input_shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format(format!("input shape {:?} is not C×H×W", header.meta.input_shape)))?;
    ModelGraph::new(
        header.meta.name,
        layers,
        header.meta.head_index,
        input_shape,
        header.meta.num_classes,
    )
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor) -> TensorRef {
        let r = TensorRef {
            offset: self.bytes.len() as u64,
            shape: t.shape().to_vec(),
        };
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        r
    }
}

fn assemble(header: &impl Serialize, blobs: &[u8]) -> Result<Vec<u8>> {
    let text = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + text.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(blobs);
    Ok(out)
}

pub fn model_to_bytes(g: &ModelGraph) -> Result<Vec<u8>> {
    let mut blobs = BlobWriter { bytes: Vec::new() };
    let layers = g
        .layers()
        .iter()
        .map(|layer| {
            let mut spec = LayerSpec {
                bias: None,
                kind: layer.kind.tag().to_string(),
                name: layer.name.clone(),
                params: BTreeMap::new(),
                weight: None,
            };
            match &layer.kind {
                LayerKind::Conv2d { pad, weight, bias } => {
                    spec.params.insert("pad".into(), *pad);
                    spec.weight = Some(blobs.push(weight));
                    spec.bias = Some(blobs.push(bias));
                }
                LayerKind::SlidingMax { k } => {
                    spec.params.insert("k".into(), *k);
                }
                LayerKind::Subsample { rate_h, rate_w } => {
                    spec.params.insert("rate_h".into(), *rate_h);
                    spec.params.insert("rate_w".into(), *rate_w);
                }
                LayerKind::Dense { weight, bias } => {
                    spec.weight = Some(blobs.push(weight));
                    spec.bias = Some(blobs.push(bias));
                }
                LayerKind::Relu | LayerKind::GlobalAvgPool | LayerKind::Flatten => {}
            }
            spec
        })
        .collect();
    let header = ModelHeader {
        kind: KIND_MODEL.into(),
        layers,
        meta: ModelMeta {
            head_index: g.head_index(),
            input_shape: g.input_shape().to_vec(),
            name: g.name().to_string(),
            num_classes: g.num_classes(),
        },
    };
    assemble(&header, &blobs.bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_model(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(g)?)?;
    Ok(())
}

pub fn aggregator_to_bytes(p: &AggregatorParams) -> Result<Vec<u8>> {
    let mut blobs = BlobWriter { bytes: Vec::new() };
    let mut tensors = BTreeMap::new();
    // blob order: w_k, w_o, w_q (sorted like the header)
    tensors.insert("w_k".to_string(), blobs.push(&Tensor::vector(p.w_k.clone())));
    tensors.insert("w_o".to_string(), blobs.push(&Tensor::vector(p.w_o.clone())));
    tensors.insert("w_q".to_string(), blobs.push(&Tensor::vector(p.w_q.clone())));
    let header = AggregatorHeader {
        kind: KIND_AGGREGATOR.into(),
        meta: AggregatorMeta {
            channels: p.channels(),
        },
        tensors,
    };
    assemble(&header, &blobs.bytes)
}

pub fn aggregator_from_bytes(bytes: &[u8]) -> Result<AggregatorParams> {
    let c = split_container(bytes)?;
    let kind = header_kind(c.header)?;
    if kind != KIND_AGGREGATOR {
        return Err(Error::Format(format!(
            "expected an `{KIND_AGGREGATOR}` container, found `{kind}`"
        )));
    }
    let header: AggregatorHeader = serde_json::from_slice(c.header)
        .map_err(|e| Error::Format(format!("malformed aggregator header: {e}")))?;
    let get = |name: &str| -> Result<Vec<f32>> {
        let r = header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("aggregator is missing tensor `{name}`")))?;
        if r.shape != [header.meta.channels] {
            return Err(Error::Format(format!(
                "aggregator tensor `{name}` has shape {:?}, expected [{}]",
                r.shape, header.meta.channels
            )));
        }
        Ok(read_tensor(c.blobs, r)?.into_data())
    };
    AggregatorParams::new(get("w_q")?, get("w_k")?, get("w_o")?)
}

pub fn load_aggregator(path: impl AsRef<Path>) -> Result<AggregatorParams> {
    aggregator_from_bytes(&fs::read(path)?)
}

pub fn save_aggregator(p: &AggregatorParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, aggregator_to_bytes(p)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ModelGraph {
        ModelGraph::new(
            "minimal",
            vec![
                Layer::new(
                    "conv",
                    LayerKind::Conv2d {
                        pad: 0,
                        weight: Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap(),
                        bias: Tensor::vector(vec![0.25]),
                    },
                ),
                Layer::new("sub", LayerKind::Subsample { rate_h: 2, rate_w: 2 }),
                Layer::new("relu", LayerKind::Relu),
                Layer::new("gap", LayerKind::GlobalAvgPool),
                Layer::new(
                    "fc",
                    LayerKind::Dense {
                        weight: Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
                        bias: Tensor::vector(vec![0.0, 0.5]),
                    },
                ),
            ],
            3,
            [1, 4, 4],
            2,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let g = minimal();
        let bytes = model_to_bytes(&g).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.num_searchable(), 1);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        assert_eq!(model_to_bytes(&g).unwrap(), bytes);
    }

    #[test]
    fn header_keys_sorted() {
        let bytes = model_to_bytes(&minimal()).unwrap();
        let c = split_container(&bytes).unwrap();
        let text = std::str::from_utf8(c.header).unwrap();
        assert!(text.starts_with(r#"{"kind":"model","layers":[{"bias":"#), "{text}");
        assert!(text.contains(r#""meta":{"head_index":3,"input_shape":[1,4,4],"name":"minimal","num_classes":2}"#));
        assert!(text.contains(r#"{"kind":"relu","name":"relu","params":{}}"#));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = model_to_bytes(&minimal()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = model_to_bytes(&minimal()).unwrap();
        bytes[4] = 2;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_is_io_error() {
        let bytes = model_to_bytes(&minimal()).unwrap();
        let err = model_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Io(e) => assert_eq!(e.kind(), io::ErrorKind::UnexpectedEof),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(model_from_bytes(&bytes[..20]), Err(Error::Io(_))));
    }

    #[test]
    fn aggregator_round_trip() {
        let p = AggregatorParams::new(vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.0, 1.0]).unwrap();
        let bytes = aggregator_to_bytes(&p).unwrap();
        assert_eq!(aggregator_from_bytes(&bytes).unwrap(), p);
        assert!(model_from_bytes(&bytes).is_err());
        assert!(aggregator_from_bytes(&model_to_bytes(&minimal()).unwrap()).is_err());
    }
}
