//! Test-time search over the phases that subsampling layers throw away.
//!
//! A strided layer is run as its stride-1 counterpart followed by an
//! explicit subsample that keeps one of `R_h·R_w` phases. The default
//! forward pass keeps phase `(0, 0)` everywhere; this crate searches the
//! other phases for confident predictions, aligns the resulting feature
//! maps, and aggregates them before the classifier head.
//!
//! ```no_run
//! use phasesearch::{load_model, predict, AggregateMode, BudgetConfig, CriterionKind, Tensor};
//!
//! let g = load_model("toy.psb")?;
//! let x = Tensor::zeros(g.input_shape().to_vec());
//! let cfg = BudgetConfig::new(4, CriterionKind::Entropy);
//! let logits = predict(&g, &x, &cfg, AggregateMode::Entropy, None)?;
//! println!("class {}", logits.argmax());
//! # Ok::<(), phasesearch::Error>(())
//! ```

pub mod aggregate;
pub mod error;
pub mod model;
pub mod phase;
pub mod search;
pub mod tensor;
pub mod train;

pub use aggregate::{
    aggregate_attention, aggregate_avg, aggregate_entropy, aggregate_perpixel, attention_matrix, entropy_weights,
    predict, predict_from_records, segment, AggregateMode, AggregatorParams, WeightAssignment,
};
pub use error::{Error, Result};
pub use model::{load_aggregator, load_idx, load_model, save_aggregator, save_model, Dataset, ModelGraph};
pub use phase::{align_feature, forward_with_selection, neighbor_batch, offset, LayerWindow, Selection};
pub use search::{
    criterion_entropy, criterion_learned, exhaustive_search, search, search_detailed, BudgetConfig, CriterionKind,
    FeatureRecord,
};
pub use tensor::{PhaseIndex, Scalar, Tensor};
pub use train::{train_aggregator, TrainConfig, TrainReport};
