//! Golden logit fixtures: `(input, selection, expected logits, tolerance)`.
//!
//! ```json
//! [{"input": "images.idx#3", "selection": [[0,0],[1,0]], "logits": [..], "tol": 1e-4}]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use crate::error::{Error, Result};
use crate::phase::Selection;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

fn default_tol() -> f64 {
    DEFAULT_TOLERANCE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFixture {
    pub input: String,
    pub logits: Vec<f32>,
    pub selection: Vec<[usize; 2]>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenFixture {
    /// The `<idx-file>#<index>` reference as written.
    pub input: String,
    /// IDX image file, resolved against the fixture file's directory.
    pub image_path: PathBuf,
    pub index: usize,
    pub selection: Selection,
    pub logits: Vec<f32>,
    pub tol: f64,
}

pub fn parse_golden(text: &str, base_dir: &Path, g: &ModelGraph) -> Result<Vec<GoldenFixture>> {
    let raw: Vec<RawFixture> = serde_json::from_str(text)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let (file, index) = r.input.rsplit_once('#').ok_or_else(|| {
                Error::Format(format!("fixture {i}: input `{}` lacks `#<index>`", r.input))
            })?;
            let index = index.parse().map_err(|_| {
                Error::Format(format!("fixture {i}: bad image index in `{}`", r.input))
            })?;
            if r.selection.len() != g.num_searchable() {
                return Err(Error::Validation(format!(
                    "fixture {i}: selection has {} entries, model has {} searchable layers",
                    r.selection.len(),
                    g.num_searchable()
                )));
            }
            let phases = r.selection.iter().map(|p| (p[0], p[1])).collect();
            let selection = Selection::new(phases, g.rates())
                .map_err(|e| Error::Range(format!("fixture {i}: {e}")))?;
            if r.logits.len() != g.num_classes() {
                return Err(Error::Validation(format!(
                    "fixture {i}: {} expected logits, model has {} classes",
                    r.logits.len(),
                    g.num_classes()
                )));
            }
            if !(r.tol.is_finite() && r.tol >= 0.0) {
                return Err(Error::Validation(format!("fixture {i}: bad tolerance {}", r.tol)));
            }
            Ok(GoldenFixture {
                image_path: base_dir.join(file),
                index,
                input: r.input,
                selection,
                logits: r.logits,
                tol: r.tol,
            })
        })
        .collect()
}

pub fn load_golden(path: impl AsRef<Path>, g: &ModelGraph) -> Result<Vec<GoldenFixture>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_golden(&text, base, g)
}
