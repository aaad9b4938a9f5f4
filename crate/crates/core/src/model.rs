//! JSON model files.
//!
//! ```text
//! { "format_version": 1, "n": 2, "N": 3,
//!   "layers": [ { "W": [row-major n*n], "a": [..], "b": [..] }, ... ],
//!   "seed": 7,
//!   "training": { "objective_final": 0.12, "sweeps": 40, "config_hash": "…" } }
//! ```
//!
//! Floats are written in shortest round-trip form, so `load(save(s)) == s`
//! bit for bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{RbmLayer, RbmStack, StackMeta, TrainingMeta};

pub const MODEL_FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u64,
    n: usize,
    #[serde(rename = "N")]
    depth: usize,
    layers: Vec<LayerFile>,
    seed: u64,
    training: TrainingMeta,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u64,
}

pub fn save_model(stack: &RbmStack) -> String {
    let n = stack.n();
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        n,
        depth: stack.depth(),
        layers: stack
            .layers()
            .iter()
            .map(|l| LayerFile {
                // nalgebra is column-major; the file is row-major.
                w: (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|ij| l.weights[ij])
                    .collect(),
                a: l.hidden_bias.iter().copied().collect(),
                b: l.visible_bias.iter().copied().collect(),
            })
            .collect(),
        seed: stack.meta.seed,
        training: stack.meta.training.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

pub fn load_model(text: &str) -> Result<RbmStack> {
    let probe: VersionProbe = parse(text)?;
    if probe.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let file: ModelFile = parse(text)?;
    let n = file.n;
    if file.layers.len() != file.depth {
        return Err(Error::schema(
            "layers",
            format!("N = {} but {} layers present", file.depth, file.layers.len()),
        ));
    }
    let mut layers = Vec::with_capacity(file.depth);
    for (k, l) in file.layers.into_iter().enumerate() {
        let at = |field: &str| format!("layers[{k}].{field}");
        if l.w.len() != n * n {
            return Err(Error::schema(at("W"), format!("expected {} entries, got {}", n * n, l.w.len())));
        }
        if l.a.len() != n {
            return Err(Error::schema(at("a"), format!("expected {n} entries, got {}", l.a.len())));
        }
        if l.b.len() != n {
            return Err(Error::schema(at("b"), format!("expected {n} entries, got {}", l.b.len())));
        }
        let layer = RbmLayer::new(
            DMatrix::from_row_slice(n, n, &l.w),
            DVector::from_vec(l.a),
            DVector::from_vec(l.b),
        )
        .map_err(|e| Error::schema(format!("layers[{k}]"), e.to_string()))?;
        layers.push(layer);
    }
    let mut stack = RbmStack::new(layers).map_err(|e| Error::schema("layers", e.to_string()))?;
    stack.meta = StackMeta {
        seed: file.seed,
        training: file.training,
    };
    Ok(stack)
}

/// Deserializes with the failing field path attached to the error.
pub(crate) fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(path, e.into_inner().to_string())
    })
}
