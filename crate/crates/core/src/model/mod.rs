//! Model graphs and the on-disk formats shared with the fixture exporter.

mod golden;
mod graph;
mod idx;
mod psb;

pub use golden::{load_golden, parse_golden, GoldenFixture, RawFixture, DEFAULT_TOLERANCE};
pub use graph::{Layer, LayerKind, ModelGraph};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, load_idx_images, parse_idx_images, parse_idx_labels,
    Dataset,
};
pub use psb::{
    aggregator_from_bytes, aggregator_to_bytes, load_aggregator, load_model, model_from_bytes, model_to_bytes,
    save_aggregator, save_model, LayerSpec, ModelMeta, TensorRef,
};
