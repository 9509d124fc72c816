//! The single prediction path shared by the `predict` subcommand and the
//! HTTP service, so both report identical numbers for identical inputs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use irdrop_core::analysis::{risk_report, RiskReport};
use irdrop_core::dataset::InputMaps;
use irdrop_core::unet::{load_checkpoint, read_manifest, UNetParams};
use irdrop_core::{Error, Grid2D, Result};

/// Map size used when a checkpoint does not record one.
pub const DEFAULT_INPUT_SIZE: (usize, usize) = (64, 64);

/// A loaded, immutable model snapshot.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: UNetParams,
    pub version: String,
    /// `(height, width)` the service accepts.
    pub input_shape: (usize, usize),
}

impl Model {
    pub fn new(params: UNetParams, input_shape: (usize, usize)) -> Self {
        Self {
            version: format!("{:016x}", params.fingerprint()),
            params,
            input_shape,
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let params = load_checkpoint(dir)?;
        let meta = read_manifest(dir)?.metadata;
        let dim = |key: &str, default: usize| {
            meta.get(key)
                .and_then(|v| v.as_u64())
                .map_or(default, |v| v as usize)
        };
        let shape = (
            dim("height", DEFAULT_INPUT_SIZE.0),
            dim("width", DEFAULT_INPUT_SIZE.1),
        );
        Ok(Self::new(params, shape))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ir_drop: Grid2D,
    pub report: RiskReport,
    pub inference_ms: f64,
}

/// Preprocesses the raw maps, runs one forward pass and analyses the result.
pub fn predict(params: &UNetParams, maps: &InputMaps, threshold: f64) -> Result<Prediction> {
    let started = Instant::now();
    let x = maps.to_tensor()?;
    let ir_drop = params.predict(&x)?;
    let inference_ms = started.elapsed().as_secs_f64() * 1000.0;
    if !ir_drop.values().iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidState("model produced non-finite values".into()));
    }
    let report = risk_report(&ir_drop, threshold)?;
    Ok(Prediction {
        ir_drop,
        report,
        inference_ms,
    })
}

/// Wire form of a [`Prediction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub ir_drop: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub report: RiskReport,
    pub inference_ms: f64,
    pub model_version: String,
}

impl PredictResponse {
    pub fn new(p: Prediction, model_version: &str) -> Self {
        Self {
            ir_drop: p.ir_drop.to_rows(),
            report: p.report,
            inference_ms: p.inference_ms,
            model_version: model_version.to_string(),
        }
    }
}
