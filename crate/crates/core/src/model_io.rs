//! Versioned JSON model files.
//!
//! ```text
//! {"format_version": 1, "config": {...},
//!  "layers": [{"rows": r, "cols": c, "weights": [...], "bias": [...]}, ...]}
//! ```
//!
//! Parameters are written with 17 significant digits so a reload is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{EmbeddingNet, Layer, NetConfig};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
struct ModelFile {
    config: NetConfig,
    layers: Vec<LayerFile>,
}

#[derive(Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// `{:.16e}` gives exactly 17 significant digits.
pub(crate) fn push_real17(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn push_reals(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_real17(out, v);
    }
    out.push(']');
}

pub fn model_to_json(net: &EmbeddingNet) -> String {
    let config = serde_json::to_string(net.config()).expect("NetConfig serializes");
    let mut out = String::new();
    write!(
        out,
        "{{\"format_version\":{MODEL_FORMAT_VERSION},\"config\":{config},\"layers\":["
    )
    .unwrap();
    for (i, layer) in net.layers().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(
            out,
            "{{\"rows\":{},\"cols\":{},\"weights\":",
            layer.weight.rows(),
            layer.weight.cols()
        )
        .unwrap();
        push_reals(&mut out, layer.weight.as_slice());
        out.push_str(",\"bias\":");
        push_reals(&mut out, &layer.bias);
        out.push('}');
    }
    out.push_str("]}\n");
    out
}

pub fn model_from_json(text: &str) -> Result<EmbeddingNet> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    match value.get("format_version") {
        Some(v) if v.as_u64() == Some(MODEL_FORMAT_VERSION as u64) => {}
        Some(v) => {
            return Err(Error::Version {
                found: v.to_string(),
                expected: MODEL_FORMAT_VERSION,
            })
        }
        None => return Err(Error::Format("model file has no format_version".into())),
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let layers = file
        .layers
        .into_iter()
        .map(|l| {
            Ok(Layer {
                weight: Matrix::from_vec(l.rows, l.cols, l.weights)?,
                bias: l.bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingNet::from_layers(file.config, layers)
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        message: e.to_string(),
    }
}

pub fn save_model(net: &EmbeddingNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbeddingNet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Embedder;

    fn probe() -> Matrix {
        Matrix::from_vec(3, 32, (0..96).map(|i| ((i * 37 % 17) as f64 - 8.0) / 3.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let net = EmbeddingNet::new(NetConfig {
            seed: 17,
            ..Default::default()
        })
        .unwrap();
        let back = model_from_json(&model_to_json(&net)).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.embed(&probe()).unwrap(), net.embed(&probe()).unwrap());
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn unknown_version_rejected() {
        let net = EmbeddingNet::new(NetConfig::default()).unwrap();
        let text = model_to_json(&net).replacen("\"format_version\":1", "\"format_version\":99", 1);
        assert!(matches!(model_from_json(&text), Err(Error::Version { .. })));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let net = EmbeddingNet::new(NetConfig::default()).unwrap();
        let text = model_to_json(&net);
        let cut = &text[..text.len() / 2];
        assert!(matches!(model_from_json(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn reals_have_17_significant_digits() {
        let mut s = String::new();
        push_real17(&mut s, 0.1);
        assert_eq!(s, "1.0000000000000001e-1");
    }
}
