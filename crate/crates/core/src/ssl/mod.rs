//! Cross-modal Barlow Twins pretraining of the text and structure encoders.
//!
//! Branch A is the CGCNN on the crystal graph, branch B the MOFormer on the
//! MOFid tokens. Each branch ends in its own projector; the loss drives the
//! cross-correlation of the two projected batches toward the identity.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::BranchPass;
use crate::crystal::{Cgcnn, CgcnnConfig, CrystalGraph};
use crate::encoder::{CGCNN_PREFIX, MOFORMER_PREFIX};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::regression::{split_indices, RemainderPolicy};
use crate::rng;
use crate::tensor::{barlow_twins_terms, Adam, AdamConfig, BarlowTerms, Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::text::TokenSequence;
use crate::transformer::{Moformer, TransformerConfig};

pub const DEFAULT_LAMBDA: f64 = 0.0051;
pub const PROJ_GRAPH_PREFIX: &str = "proj_graph.";
pub const PROJ_TEXT_PREFIX: &str = "proj_text.";

/// How the two projected batches are turned into `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Column-wise cosine over the batch, no centering.
    #[default]
    Cosine,
    /// Columns are mean-centered first (the original Barlow Twins recipe).
    Centered,
}

/// Records `C` for two `B x D` batches on `g`.
pub fn correlation_on_graph(g: &mut Graph<'_>, za: Var, zb: Var, mode: CorrelationMode) -> Result<Var> {
    let (a, b) = (g.value(za).shape().to_vec(), g.value(zb).shape().to_vec());
    if a.len() != 2 || a != b {
        return Err(Error::ShapeMismatch { op: "cross_correlation", left: a, right: b });
    }
    if a[0] < 2 {
        return Err(Error::TooFewRecords { needed: 2, got: a[0] });
    }
    let (za, zb) = match mode {
        CorrelationMode::Cosine => (za, zb),
        CorrelationMode::Centered => (g.center_columns(za), g.center_columns(zb)),
    };
    let na = g.normalize_columns(za)?;
    let nb = g.normalize_columns(zb)?;
    let nat = g.transpose(na);
    g.matmul(nat, nb)
}

/// `C_ij = sum_b A_bi B_bj / (|A_:i| |B_:j|)`.
pub fn cross_correlation(za: &Tensor, zb: &Tensor, mode: CorrelationMode) -> Result<Tensor> {
    let mut g = Graph::standalone();
    let (a, b) = (g.constant(za.clone()), g.constant(zb.clone()));
    let c = correlation_on_graph(&mut g, a, b, mode)?;
    Ok(g.value(c).clone())
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_twins_loss(c: &Tensor, lambda: f64) -> Result<f64> {
    if c.shape().len() != 2 || c.rows() != c.cols() {
        return Err(Error::ShapeMismatch { op: "barlow_twins_loss", left: c.shape().to_vec(), right: vec![] });
    }
    Ok(barlow_twins_terms(c, lambda).total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub correlation: CorrelationMode,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    /// Train/val fractions.
    pub split: [f64; 2],
    pub weight_decay: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 32,
            lr: 1e-5,
            epochs: 15,
            lambda: DEFAULT_LAMBDA,
            correlation: CorrelationMode::Cosine,
            projector_hidden: 512,
            projector_dim: 512,
            split: [0.95, 0.05],
            weight_decay: 0.0,
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("pretrain batch_size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("pretrain lr and lambda must be finite and non-negative".into()));
        }
        if self.projector_hidden == 0 || self.projector_dim == 0 {
            return Err(Error::InvalidConfig("projector widths must be positive".into()));
        }
        Ok(())
    }
}

/// One MOF seen through both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub id: String,
    pub tokens: TokenSequence,
    pub graph: CrystalGraph,
}

/// Both encoders plus one projector per branch.
#[derive(Debug, Clone)]
pub struct SslModel {
    pub moformer: Moformer,
    pub cgcnn: Cgcnn,
    pub proj_text: Mlp,
    pub proj_graph: Mlp,
}

impl SslModel {
    pub fn new(text: TransformerConfig, graph: CgcnnConfig, hidden: usize, dim: usize) -> Result<Self> {
        let moformer = Moformer::new(text, MOFORMER_PREFIX)?;
        let cgcnn = Cgcnn::new(graph, CGCNN_PREFIX)?;
        let proj_text = Mlp::new(PROJ_TEXT_PREFIX, vec![moformer.output_dim(), hidden, dim])?;
        let proj_graph = Mlp::new(PROJ_GRAPH_PREFIX, vec![cgcnn.output_dim(), hidden, dim])?;
        Ok(SslModel { moformer, cgcnn, proj_text, proj_graph })
    }

    /// Initializes every parameter from the `init.*` streams of `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.moformer.init_params(&mut store, &mut rng::stream(seed, "init.moformer"))?;
        self.cgcnn.init_params(&mut store, &mut rng::stream(seed, "init.cgcnn"))?;
        self.proj_text.init_params(&mut store, &mut rng::stream(seed, "init.proj_text"))?;
        self.proj_graph.init_params(&mut store, &mut rng::stream(seed, "init.proj_graph"))?;
        Ok(store)
    }

    pub fn project_text(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        let h = self.moformer.embed(g, seq)?;
        self.proj_text.forward(g, h)
    }

    pub fn project_graph(&self, g: &mut Graph<'_>, graph: &CrystalGraph) -> Result<Var> {
        let h = self.cgcnn.embed(g, graph)?;
        self.proj_graph.forward(g, h)
    }
}

/// Loss of one batch together with the parameter gradients.
pub struct BatchLoss {
    pub terms: BarlowTerms,
    pub grads: ParamGrads,
}

/// Loss terms and gradients for a batch under `params`.
pub fn batch_loss(
    model: &SslModel,
    params: &ParamStore,
    batch: &[PairSample],
    lambda: f64,
    mode: CorrelationMode,
) -> Result<BatchLoss> {
    if batch.len() < 2 {
        return Err(Error::TooFewRecords { needed: 2, got: batch.len() });
    }
    let graph_pass = BranchPass::forward(params, batch, |g, s| model.project_graph(g, &s.graph))?;
    let text_pass = BranchPass::forward(params, batch, |g, s| model.project_text(g, &s.tokens))?;

    let mut head = Graph::standalone();
    let za = head.input(graph_pass.stacked()?);
    let zb = head.input(text_pass.stacked()?);
    let c = correlation_on_graph(&mut head, za, zb, mode)?;
    let loss = head.barlow_twins(c, lambda)?;
    let terms = barlow_twins_terms(head.value(c), lambda);
    if !terms.total().is_finite() {
        return Err(Error::NanLoss { context: format!("pretraining batch {:?}", ids(batch)) });
    }
    let upstream = head.backward(loss)?;

    let mut grads = graph_pass.backward(upstream.wrt(za).expect("input leaf"), params.len())?;
    grads.accumulate(&text_pass.backward(upstream.wrt(zb).expect("input leaf"), params.len())?);
    Ok(BatchLoss { terms, grads })
}

fn ids(batch: &[PairSample]) -> Vec<&str> {
    batch.iter().map(|s| s.id.as_str()).collect()
}

/// One row of the loss curve. `offdiag_term` already includes lambda, so
/// `loss = diag_term + offdiag_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub diag_term: f64,
    pub offdiag_term: f64,
}

impl StepRecord {
    fn new(step: usize, terms: &BarlowTerms) -> Self {
        StepRecord {
            step,
            loss: terms.total(),
            diag_term: terms.diagonal,
            offdiag_term: terms.lambda * terms.off_diagonal,
        }
    }
}

pub struct Pretrainer {
    pub model: SslModel,
    pub params: ParamStore,
    pub adam: Adam,
    pub config: PretrainConfig,
    steps: usize,
}

impl Pretrainer {
    pub fn new(model: SslModel, params: ParamStore, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&params, AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::default() });
        Ok(Pretrainer { model, params, adam, config, steps: 0 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, backward and one Adam update over every parameter.
    pub fn step(&mut self, batch: &[PairSample]) -> Result<StepRecord> {
        let out = batch_loss(&self.model, &self.params, batch, self.config.lambda, self.config.correlation)?;
        let lr = self.config.lr;
        self.adam.step(&mut self.params, &out.grads, |_| lr)?;
        if !self.params.all_finite() {
            return Err(Error::NanLoss { context: format!("parameters after pretraining batch {:?}", ids(batch)) });
        }
        self.steps += 1;
        Ok(StepRecord::new(self.steps, &out.terms))
    }

    /// Mean loss over consecutive batches of `samples` without updating.
    pub fn evaluate(&self, samples: &[PairSample]) -> Result<Option<f64>> {
        let batches: Vec<&[PairSample]> =
            samples.chunks(self.config.batch_size).filter(|b| b.len() >= 2).collect();
        if batches.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for b in &batches {
            let mut g = Graph::new(&self.params);
            let rows_a = b.iter().map(|s| self.model.project_graph(&mut g, &s.graph)).collect::<Result<Vec<_>>>()?;
            let rows_b = b.iter().map(|s| self.model.project_text(&mut g, &s.tokens)).collect::<Result<Vec<_>>>()?;
            let za = g.concat_rows(&rows_a)?;
            let zb = g.concat_rows(&rows_b)?;
            let c = correlation_on_graph(&mut g, za, zb, self.config.correlation)?;
            total += barlow_twins_terms(g.value(c), self.config.lambda).total();
        }
        Ok(Some(total / batches.len() as f64))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub steps: Vec<StepRecord>,
    /// Validation loss after each epoch (`None` when the val split is too small).
    pub val_loss: Vec<Option<f64>>,
    pub n_train: usize,
    pub n_val: usize,
}

/// Epoch loop: seeded train/val split, per-epoch shuffle, batches of
/// `batch_size` (a trailing batch of one is skipped).
pub fn run_pretraining(
    trainer: &mut Pretrainer,
    samples: &[PairSample],
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainReport> {
    let parts = split_indices(samples.len(), &trainer.config.split, seed, RemainderPolicy::ToTrain)?;
    let train: Vec<PairSample> = parts[0].iter().map(|&i| samples[i].clone()).collect();
    let val: Vec<PairSample> = parts[1].iter().map(|&i| samples[i].clone()).collect();
    if train.len() < 2 {
        return Err(Error::TooFewRecords { needed: 2, got: train.len() });
    }
    let mut report = PretrainReport { n_train: train.len(), n_val: val.len(), ..Default::default() };
    let mut shuffle = rng::stream(seed, "pretrain.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for _ in 0..trainer.config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(trainer.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            if trainer.config.max_steps.is_some_and(|m| trainer.steps() >= m) {
                break 'epochs;
            }
            let batch: Vec<PairSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let rec = trainer.step(&batch)?;
            on_step(&rec);
            report.steps.push(rec);
        }
        report.val_loss.push(trainer.evaluate(&val)?);
    }
    Ok(report)
}

pub fn write_loss_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(ctx(), e.into()))?;
    for s in steps {
        w.serialize(s).map_err(|e| Error::io(ctx(), e.into()))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

/// Reads a loss curve written by [`write_loss_csv`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::data(path, e.to_string()))).collect()
}

/// `k`-step trailing moving average.
pub fn moving_average(xs: &[f64], k: usize) -> Vec<f64> {
    if k == 0 || xs.len() < k {
        return Vec::new();
    }
    xs.windows(k).map(|w| w.iter().sum::<f64>() / k as f64).collect()
}
