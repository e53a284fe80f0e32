//! Supervised fine-tuning with an MLP regression head.

mod finetune;
mod split;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::exec;
use crate::mlp::Mlp;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Tensor};

pub use finetune::{finetune, EpochMetrics, FinetuneOutcome, TrainPlan};
pub use split::{split_dataset, split_indices, RemainderPolicy, Split, DEFAULT_FRACTIONS};

/// Hidden widths of the regression head; a scalar output layer follows.
pub const HEAD_WIDTHS: [usize; 4] = [512, 256, 128, 64];
pub const HEAD_PREFIX: &str = "head.";

/// `d_in -> 512 -> 256 -> 128 -> 64 -> 1`, ReLU between layers.
pub fn regression_head(d_in: usize) -> Result<Mlp> {
    let mut dims = vec![d_in];
    dims.extend(HEAD_WIDTHS);
    dims.push(1);
    Mlp::new(HEAD_PREFIX, dims)
}

/// z-score transform of the targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub const IDENTITY: TargetScaler = TargetScaler { mean: 0.0, std: 1.0 };

    /// Population statistics; a zero spread falls back to 1.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        TargetScaler { mean, std }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub input: EncoderInput,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub records: Vec<LabeledRecord>,
    pub target_name: String,
    pub unit: String,
}

/// Encoder, head and target scaling; the parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct Regressor {
    pub encoder: Encoder,
    pub head: Mlp,
    pub scaler: TargetScaler,
}

impl Regressor {
    pub fn new(encoder: Encoder) -> Result<Self> {
        let head = regression_head(encoder.output_dim())?;
        Ok(Regressor { encoder, head, scaler: TargetScaler::IDENTITY })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let kind = self.encoder.kind();
        self.encoder.init_params(&mut store, &mut rng::stream(seed, &format!("init.{kind}")))?;
        self.head.init_params(&mut store, &mut rng::stream(seed, "init.head"))?;
        Ok(store)
    }

    /// Standardized prediction for one input, as a `1 x 1` node.
    pub fn forward(&self, g: &mut Graph<'_>, input: &EncoderInput) -> Result<crate::tensor::Var> {
        let h = self.encoder.embed(g, input)?;
        self.head.forward(g, h)
    }

    /// Predictions in original target units.
    pub fn predict(&self, params: &ParamStore, inputs: &[&EncoderInput]) -> Result<Vec<f64>> {
        exec::map(inputs, |input| {
            let mut g = Graph::new(params);
            let out = self.forward(&mut g, input)?;
            Ok(self.scaler.invert(g.value(out).data()[0]))
        })
        .into_iter()
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub y: f64,
    pub y_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mae: f64,
    pub predictions: Vec<Prediction>,
}

/// Mean absolute error; `NaN` for empty input.
pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().min(target.len());
    if n == 0 {
        return f64::NAN;
    }
    pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64
}

/// MAE and per-record predictions over `records`.
pub fn evaluate(model: &Regressor, params: &ParamStore, records: &[&LabeledRecord]) -> Result<Evaluation> {
    let inputs: Vec<&EncoderInput> = records.iter().map(|r| &r.input).collect();
    let pred = model.predict(params, &inputs)?;
    let target: Vec<f64> = records.iter().map(|r| r.target).collect();
    let predictions = records
        .iter()
        .zip(&pred)
        .map(|(r, &y_hat)| Prediction { id: r.id.clone(), y: r.target, y_hat })
        .collect();
    Ok(Evaluation { mae: mae(&pred, &target), predictions })
}

pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_csv(path, predictions)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(ctx(), e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(ctx(), e.into()))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Targets as a `B x 1` column after scaling.
pub(crate) fn target_column(scaler: &TargetScaler, targets: &[f64]) -> Result<Tensor> {
    Tensor::matrix(targets.len(), 1, targets.iter().map(|&y| scaler.standardize(y)).collect())
}
