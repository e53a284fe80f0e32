use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, split_dataset, target_column, LabeledDataset, LabeledRecord, Regressor, RemainderPolicy, Split,
    TargetScaler, DEFAULT_FRACTIONS,
};
use crate::batch::BranchPass;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub encoder: EncoderKind,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub fractions: [f64; 3],
    pub remainder: RemainderPolicy,
    pub train_subset: Option<usize>,
    pub standardize: bool,
    pub seed: u64,
}

impl TrainPlan {
    /// Defaults for `encoder`; `pretrained` selects the lower CGCNN rate.
    pub fn defaults(encoder: EncoderKind, pretrained: bool) -> Self {
        let (batch_size, lr_encoder, lr_head) = match (encoder, pretrained) {
            (EncoderKind::Moformer, _) => (64, 5e-5, 0.01),
            (EncoderKind::Cgcnn, false) => (128, 0.01, 0.01),
            (EncoderKind::Cgcnn, true) => (128, 0.002, 0.002),
        };
        TrainPlan {
            encoder,
            lr_encoder,
            lr_head,
            batch_size,
            epochs: 200,
            weight_decay: 1e-6,
            fractions: DEFAULT_FRACTIONS,
            remainder: RemainderPolicy::ToTrain,
            train_subset: None,
            standardize: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_head", self.lr_head), ("weight_decay", self.weight_decay)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub test_mae_at_best: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Regressor,
    /// Parameters of the epoch with the lowest validation MAE.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub test_mae: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
    /// Indices into the dataset; `train` is after subsetting.
    pub split: Split,
}

fn subset(train: Vec<usize>, size: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let Some(n) = size else { return Ok(train) };
    if n == 0 || n > train.len() {
        return Err(Error::InvalidConfig(format!(
            "train subset {n} is not within 1..={} (train split size)",
            train.len()
        )));
    }
    let mut picked = train;
    picked.shuffle(&mut rng::stream(seed, "subset"));
    picked.truncate(n);
    Ok(picked)
}

fn records<'a>(data: &'a LabeledDataset, idx: &[usize]) -> Vec<&'a LabeledRecord> {
    idx.iter().map(|&i| &data.records[i]).collect()
}

fn nan_context(epoch: usize, batch: &[&LabeledRecord], loss: f64) -> String {
    let rows: Vec<String> = batch.iter().map(|r| format!("{}={}", r.id, r.target)).collect();
    format!("epoch {epoch}: loss {loss} on batch [{}]", rows.join(", "))
}

// overflowing activations surface as non-finite tensors before any loss exists
fn diverged(e: Error, context: impl FnOnce() -> String) -> Error {
    match e {
        Error::NonFinite(what) => Error::NanLoss { context: format!("{what} in {}", context()) },
        e => e,
    }
}

/// Trains `model` on the plan's split of `data` and keeps the epoch with the
/// lowest validation MAE (training MAE when the validation split is empty).
///
/// `params` holds the starting weights (fresh or with a pretrained encoder).
pub fn finetune(
    mut model: Regressor,
    mut params: ParamStore,
    plan: &TrainPlan,
    data: &LabeledDataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FinetuneOutcome> {
    plan.validate()?;
    if model.encoder.kind() != plan.encoder {
        return Err(Error::ModalityMismatch(format!(
            "plan is for {} but the model encoder is {}",
            plan.encoder,
            model.encoder.kind()
        )));
    }
    if data.records.is_empty() {
        return Err(Error::TooFewRecords { needed: 3, got: 0 });
    }
    let mut split = split_dataset(data.records.len(), plan.fractions, plan.seed, plan.remainder)?;
    split.train = subset(split.train, plan.train_subset, plan.seed)?;
    if split.train.is_empty() {
        return Err(Error::TooFewRecords { needed: 1, got: 0 });
    }
    let (train, val, test) = (records(data, &split.train), records(data, &split.val), records(data, &split.test));

    model.scaler = if plan.standardize {
        TargetScaler::fit(&train.iter().map(|r| r.target).collect::<Vec<_>>())
    } else {
        TargetScaler::IDENTITY
    };
    let enc_prefix = model.encoder.prefix().to_string();
    let mut adam = Adam::new(&params, AdamConfig { weight_decay: plan.weight_decay, ..AdamConfig::default() });
    let lr = |name: &str| if name.starts_with(&enc_prefix) { plan.lr_encoder } else { plan.lr_head };

    let mut shuffle = rng::stream(plan.seed, "finetune.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, Option<f64>, ParamStore)> = None;
    let mut metrics = Vec::with_capacity(plan.epochs);

    for epoch in 1..=plan.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&LabeledRecord> = chunk.iter().map(|&i| train[i]).collect();
            let step = |params: &mut ParamStore, adam: &mut Adam| -> Result<f64> {
                let pass = BranchPass::forward(params, &batch, |g, r| model.encoder.embed(g, &r.input))?;
                let mut head = Graph::new(params);
                let z = head.input(pass.stacked()?);
                let pred = model.head.forward(&mut head, z)?;
                let targets: Vec<f64> = batch.iter().map(|r| r.target).collect();
                let loss = head.mse(pred, &target_column(&model.scaler, &targets)?)?;
                let loss_value = head.value(loss).data()[0];
                if !loss_value.is_finite() {
                    return Err(Error::NanLoss { context: nan_context(epoch, &batch, loss_value) });
                }
                let upstream = head.backward(loss)?;
                let mut grads = upstream.param_grads();
                grads.accumulate(&pass.backward(upstream.wrt(z).expect("input leaf"), params.len())?);
                adam.step(params, &grads, lr)?;
                if !params.all_finite() {
                    return Err(Error::NanLoss {
                        context: format!("non-finite parameters after {}", nan_context(epoch, &batch, loss_value)),
                    });
                }
                Ok(loss_value)
            };
            let loss_value = step(&mut params, &mut adam)
                .map_err(|e| diverged(e, || format!("training step, {}", nan_context(epoch, &batch, f64::NAN))))?;
            loss_sum += loss_value * batch.len() as f64;
        }

        let selection = if val.is_empty() { &train } else { &val };
        let eval = |set: &[&LabeledRecord]| {
            evaluate(&model, &params, set).map_err(|e| diverged(e, || format!("epoch {epoch} evaluation")))
        };
        let val_mae = eval(selection)?.mae;
        if best.as_ref().is_none_or(|b| val_mae < b.1) {
            let test_mae = if test.is_empty() { None } else { Some(eval(&test)?.mae) };
            best = Some((epoch, val_mae, test_mae, params.clone()));
        }
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mae,
            test_mae_at_best: best.as_ref().and_then(|b| b.2),
        };
        on_epoch(&row);
        metrics.push(row);
    }

    let (best_epoch, best_val_mae, test_mae, best_params) = best.ok_or_else(|| {
        Error::NanLoss { context: "validation MAE was never finite".into() }
    })?;
    Ok(FinetuneOutcome { model, params: best_params, best_epoch, best_val_mae, test_mae, metrics, split })
}
