//! The CLI subcommands as library functions. Progress lines go to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::manifest::{Column, Manifest, ManifestRow};
use crate::crystal::{build_graph, parse_cif, CgcnnConfig, Cgcnn, CrystalGraph, GraphCache};
use crate::encoder::{Encoder, EncoderInput, EncoderKind, CGCNN_PREFIX, MOFORMER_PREFIX};
use crate::error::{Error, Result};
use crate::exec;
use crate::regression::{
    evaluate as evaluate_records, finetune as run_finetune, write_csv, write_predictions_csv, LabeledDataset,
    LabeledRecord, Regressor, TargetScaler,
};
use crate::ssl::{run_pretraining, write_loss_csv, PairSample, Pretrainer, SslModel};
use crate::tensor::{Graph, ParamStore};
use crate::text::{build_vocabulary, parse_mofid, tokenize_mofid, MofId, Vocabulary};
use crate::transformer::{AttentionExport, Moformer, TransformerConfig};

pub type Out<'a> = &'a mut (dyn Write + Send);

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn say(out: Out<'_>, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("writing output", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn row_error(manifest: &Manifest, row: usize, e: Error) -> Error {
    Error::data(&manifest.path, format!("row {row}: {e}"))
}

fn parse_rows(manifest: &Manifest) -> Result<Vec<MofId>> {
    manifest
        .rows
        .iter()
        .map(|r| {
            let text = r.mofid.as_deref().ok_or_else(|| Error::data(&manifest.path, format!("row {}: missing mofid", r.row)))?;
            parse_mofid(text).map_err(|e| row_error(manifest, r.row, e))
        })
        .collect()
}

/// Builds the vocabulary of a manifest's `mofid` column and writes it.
pub fn build_vocab(manifest: &Path, out_path: &Path, out: Out<'_>) -> Result<Vocabulary> {
    let m = Manifest::load(manifest)?;
    if m.rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    m.require(&[Column::Mofid])?;
    let vocab = build_vocabulary(&parse_rows(&m)?)?;
    vocab.save(out_path)?;
    say(out, format!("{} tokens written to {}", vocab.len(), out_path.display()))?;
    Ok(vocab)
}

/// Pretty-prints the tokens of one MOFid, with ids when a vocabulary is given.
pub fn tokenize(mofid: &str, vocab: Option<&Path>, out: Out<'_>) -> Result<()> {
    let m = parse_mofid(mofid)?;
    let tokens = tokenize_mofid(&m)?;
    say(out, format!("smiles parts: {}", m.smiles_parts.join(" | ")))?;
    say(out, format!("topology: {}  catenation: {}", m.topology, m.catenation))?;
    match vocab {
        None => {
            for (i, t) in tokens.iter().enumerate() {
                say(out, format!("{i:>4}  {t}"))?;
            }
        }
        Some(path) => {
            let vocab = Vocabulary::load(path)?;
            let seq = vocab.encode(&m)?;
            for (i, &id) in seq.ids.iter().enumerate().filter(|(i, _)| !seq.pad_mask[*i]) {
                say(out, format!("{i:>4}  {:>6}  {}", id, vocab.token(id).unwrap_or("?")))?;
            }
            let n = seq.active_positions().len();
            say(out, format!("{n} tokens, {} padding", seq.ids.len() - n))?;
        }
    }
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("no manifest given ([data] manifest or --manifest)".into()))?;
    Manifest::load(path)
}

/// The run's vocabulary: the configured file, else built from the manifest.
fn vocabulary(cfg: &RunConfig, manifest: &Manifest) -> Result<Vocabulary> {
    match &cfg.data.vocab {
        Some(path) => Vocabulary::load(path),
        None => build_vocabulary(&parse_rows(manifest)?),
    }
}

fn sized_transformer(cfg: &TransformerConfig, vocab: &Vocabulary) -> Result<TransformerConfig> {
    if cfg.vocab_size != 0 && cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "transformer.vocab_size is {} but the vocabulary has {} entries",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    let sized = TransformerConfig { vocab_size: vocab.len(), ..cfg.clone() };
    sized.validate()?;
    Ok(sized)
}

fn token_inputs(manifest: &Manifest, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncoderInput>> {
    parse_rows(manifest)?
        .iter()
        .zip(&manifest.rows)
        .map(|(m, r)| {
            vocab
                .encode_to_len(m, max_len)
                .map(EncoderInput::Tokens)
                .map_err(|e| row_error(manifest, r.row, e))
        })
        .collect()
}

fn graph_inputs(manifest: &Manifest, cfg: &CgcnnConfig, cache: Option<&Path>) -> Result<Vec<EncoderInput>> {
    let cache = cache.map(GraphCache::new).transpose()?;
    exec::map(&manifest.rows, |r: &ManifestRow| {
        let path = r.cif_path.as_deref().expect("checked by require");
        let text = fs::read_to_string(path).map_err(|e| row_error(manifest, r.row, Error::io(path.display().to_string(), e)))?;
        let graph: Result<CrystalGraph> = match &cache {
            Some(c) => c.load_or_build(&text, cfg),
            None => parse_cif(&text).map(|s| build_graph(&s, cfg)),
        };
        graph.map(EncoderInput::Graph).map_err(|e| row_error(manifest, r.row, e))
    })
    .into_iter()
    .collect()
}

fn column_for(kind: EncoderKind) -> Column {
    match kind {
        EncoderKind::Moformer => Column::Mofid,
        EncoderKind::Cgcnn => Column::CifPath,
    }
}

/// Rejects a manifest that lacks the column the encoder reads.
fn check_modality(manifest: &Manifest, kind: EncoderKind) -> Result<()> {
    let has = manifest.rows.iter().any(|r| match kind {
        EncoderKind::Moformer => r.mofid.is_some(),
        EncoderKind::Cgcnn => r.cif_path.is_some(),
    });
    if !has {
        return Err(Error::ModalityMismatch(format!(
            "{} checkpoint needs a {} column in {}",
            kind,
            match kind {
                EncoderKind::Moformer => "mofid",
                EncoderKind::Cgcnn => "cif_path",
            },
            manifest.path.display()
        )));
    }
    Ok(())
}

fn encoder_inputs(
    kind: EncoderKind,
    manifest: &Manifest,
    cfg: &RunConfig,
    vocab: Option<&Vocabulary>,
) -> Result<Vec<EncoderInput>> {
    match kind {
        EncoderKind::Moformer => {
            let vocab = vocab.ok_or_else(|| Error::Checkpoint("no vocabulary for the text encoder".into()))?;
            token_inputs(manifest, vocab, cfg.transformer.max_len)
        }
        EncoderKind::Cgcnn => graph_inputs(manifest, &cfg.cgcnn, cfg.data.graph_cache.as_deref()),
    }
}

fn build_encoder(kind: EncoderKind, cfg: &RunConfig) -> Result<Encoder> {
    Ok(match kind {
        EncoderKind::Moformer => Encoder::Moformer(Moformer::new(cfg.transformer.clone(), MOFORMER_PREFIX)?),
        EncoderKind::Cgcnn => Encoder::Cgcnn(Cgcnn::new(cfg.cgcnn.clone(), CGCNN_PREFIX)?),
    })
}

#[derive(Serialize)]
struct ValLoss {
    epoch: usize,
    val_loss: Option<f64>,
}

/// Joint pretraining; returns the run directory.
pub fn pretrain(cfg: &RunConfig, out: Out<'_>) -> Result<PathBuf> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    manifest.require(&[Column::Mofid, Column::CifPath])?;
    let vocab = vocabulary(cfg, &manifest)?;
    let mut cfg = cfg.resolved();
    cfg.transformer = sized_transformer(&cfg.transformer, &vocab)?;

    let tokens = token_inputs(&manifest, &vocab, cfg.transformer.max_len)?;
    let graphs = graph_inputs(&manifest, &cfg.cgcnn, cfg.data.graph_cache.as_deref())?;
    let samples: Vec<PairSample> = manifest
        .rows
        .iter()
        .zip(tokens.into_iter().zip(graphs))
        .map(|(r, pair)| match pair {
            (EncoderInput::Tokens(tokens), EncoderInput::Graph(graph)) => PairSample { id: r.id.clone(), tokens, graph },
            _ => unreachable!("inputs are built per modality"),
        })
        .collect();

    let dir = cfg.output_dir.join(format!("pretrain_seed{}", cfg.seed));
    create_dir(&dir)?;
    let config_toml = cfg.to_toml()?;
    write_text(&dir.join(RESOLVED_CONFIG), &config_toml)?;

    let model = SslModel::new(
        cfg.transformer.clone(),
        cfg.cgcnn.clone(),
        cfg.pretrain.projector_hidden,
        cfg.pretrain.projector_dim,
    )?;
    let params = model.init_params(cfg.seed)?;
    let mut trainer = Pretrainer::new(model, params, cfg.pretrain.clone())?;
    say(out, format!("pretraining on {} pairs, writing to {}", samples.len(), dir.display()))?;
    let mut log_err = None;
    let report = run_pretraining(&mut trainer, &samples, cfg.seed, |s| {
        if s.step % 10 == 0 {
            if let Err(e) = say(&mut *out, format!("step {:>6}  loss {:.6}", s.step, s.loss)) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    write_loss_csv(&dir.join("loss.csv"), &report.steps)?;
    let val: Vec<ValLoss> =
        report.val_loss.iter().enumerate().map(|(k, &v)| ValLoss { epoch: k + 1, val_loss: v }).collect();
    write_csv(&dir.join("val_loss.csv"), &val)?;

    let vocab_tsv = vocab.to_tsv();
    let encoder_ckpt = |prefix: &str, kind: EncoderKind| {
        Checkpoint::new(config_toml.clone(), trainer.params.subset(prefix))
            .with_meta("kind", "pretrain_encoder")
            .with_meta("encoder", kind.as_str())
            .with_meta("vocab", vocab_tsv.clone())
    };
    encoder_ckpt(MOFORMER_PREFIX, EncoderKind::Moformer).save(&dir.join("pretrain_moformer.ckpt"))?;
    encoder_ckpt(CGCNN_PREFIX, EncoderKind::Cgcnn).save(&dir.join("pretrain_cgcnn.ckpt"))?;
    let mut full = Checkpoint::new(config_toml.clone(), trainer.params.clone())
        .with_meta("kind", "pretrain_full")
        .with_meta("encoder", "moformer,cgcnn")
        .with_meta("vocab", vocab_tsv.clone());
    full.adam = Some(trainer.adam.clone());
    full.save(&dir.join("pretrain_full.ckpt"))?;
    let last = report.steps.last().map_or(f64::NAN, |s| s.loss);
    say(out, format!("{} steps, final loss {last:.6}", report.steps.len()))?;
    Ok(dir)
}

/// Output directory name of one fine-tuning run.
pub fn finetune_dir_name(kind: EncoderKind, pretrained: bool, seed: u64, subset: Option<usize>) -> String {
    let init = if pretrained { "pretrained" } else { "scratch" };
    let mut name = format!("finetune_{kind}_{init}_seed{seed}");
    if let Some(n) = subset {
        name.push_str(&format!("_subset{n}"));
    }
    name
}

#[derive(Serialize)]
struct SplitRow<'a> {
    id: &'a str,
    part: &'static str,
}

/// Encoder weights taken from a pretraining checkpoint, plus its vocabulary.
fn init_weights(path: &Path, kind: EncoderKind) -> Result<(ParamStore, Option<Vocabulary>)> {
    let ck = Checkpoint::load(path)?;
    let weights = ck.params.subset(kind.prefix());
    if weights.is_empty() {
        return Err(Error::ModalityMismatch(format!(
            "{} holds no {kind} encoder weights",
            path.display()
        )));
    }
    let vocab = ck.meta("vocab").map(Vocabulary::from_tsv).transpose()?;
    Ok((weights, vocab))
}

/// Supervised fine-tuning, once per repeat; returns the run directories.
pub fn finetune(cfg: &RunConfig, out: Out<'_>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let kind = cfg.finetune.encoder;
    let manifest = load_manifest(cfg)?;
    manifest.require(&[column_for(kind), Column::Target])?;
    let mut cfg = cfg.resolved();

    let (init, init_vocab) = match &cfg.finetune.init {
        Some(p) => {
            let (w, v) = init_weights(p, kind)?;
            (Some(w), v)
        }
        None => (None, None),
    };
    let vocab = match kind {
        EncoderKind::Cgcnn => None,
        EncoderKind::Moformer => {
            let v = match init_vocab {
                Some(v) => {
                    if let Some(p) = &cfg.data.vocab {
                        if Vocabulary::load(p)? != v {
                            return Err(Error::Config(format!(
                                "{} differs from the vocabulary stored in the init checkpoint",
                                p.display()
                            )));
                        }
                    }
                    v
                }
                None => vocabulary(&cfg, &manifest)?,
            };
            cfg.transformer = sized_transformer(&cfg.transformer, &v)?;
            Some(v)
        }
    };
    let inputs = encoder_inputs(kind, &manifest, &cfg, vocab.as_ref())?;
    let data = LabeledDataset {
        records: manifest
            .rows
            .iter()
            .zip(inputs)
            .map(|(r, input)| LabeledRecord { id: r.id.clone(), input, target: r.target.expect("checked by require") })
            .collect(),
        target_name: cfg.data.target_name.clone(),
        unit: cfg.data.target_unit.clone(),
    };

    let mut dirs = Vec::new();
    let mut test_maes = Vec::new();
    for repeat in 0..cfg.finetune.repeats {
        let seed = cfg.seed + repeat as u64;
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        run_cfg.finetune.repeats = 1;
        let dir = cfg.output_dir.join(finetune_dir_name(kind, init.is_some(), seed, cfg.finetune.train_subset));
        create_dir(&dir)?;
        let config_toml = run_cfg.to_toml()?;
        write_text(&dir.join(RESOLVED_CONFIG), &config_toml)?;

        let model = Regressor::new(build_encoder(kind, &run_cfg)?)?;
        let mut params = model.init_params(seed)?;
        if let Some(w) = &init {
            params.load_from(w)?;
        }
        let plan = run_cfg.finetune.plan(seed);
        let mut progress = Vec::new();
        let result = run_finetune(model, params, &plan, &data, |m| progress.push(m.clone()));
        let outcome = match result {
            Ok(o) => o,
            Err(e @ Error::NanLoss { .. }) => {
                write_text(&dir.join("nan_dump.txt"), &format!("{e}\n"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
        let split_rows: Vec<SplitRow> = [("train", &outcome.split.train), ("val", &outcome.split.val), ("test", &outcome.split.test)]
            .into_iter()
            .flat_map(|(part, idx)| idx.iter().map(move |&i| (part, i)))
            .map(|(part, i)| SplitRow { id: &data.records[i].id, part })
            .collect();
        write_csv(&dir.join("split.csv"), &split_rows)?;
        let test: Vec<&LabeledRecord> = outcome.split.test.iter().map(|&i| &data.records[i]).collect();
        let test_eval = evaluate_records(&outcome.model, &outcome.params, &test)?;
        write_predictions_csv(&dir.join("predictions.csv"), &test_eval.predictions)?;

        let scaler = outcome.model.scaler;
        let mut ck = Checkpoint::new(config_toml, outcome.params.clone())
            .with_meta("kind", "finetune")
            .with_meta("encoder", kind.as_str())
            .with_meta("target_mean", scaler.mean.to_string())
            .with_meta("target_std", scaler.std.to_string())
            .with_meta("target_name", data.target_name.clone())
            .with_meta("target_unit", data.unit.clone())
            .with_meta("best_epoch", outcome.best_epoch.to_string());
        if let Some(v) = &vocab {
            ck = ck.with_meta("vocab", v.to_tsv());
        }
        ck.save(&dir.join("best.ckpt"))?;

        let unit = if data.unit.is_empty() { String::new() } else { format!(" {}", data.unit) };
        say(out, format!("{}: train records used: {}", dir.display(), outcome.split.train.len()))?;
        say(
            out,
            format!(
                "  best epoch {} of {}, val MAE {:.6}{unit}, test MAE {}",
                outcome.best_epoch,
                plan.epochs,
                outcome.best_val_mae,
                outcome.test_mae.map_or("n/a".to_string(), |t| format!("{t:.6}{unit}"))
            ),
        )?;
        if let Some(t) = outcome.test_mae {
            test_maes.push(t);
        }
        dirs.push(dir);
    }
    if test_maes.len() > 1 {
        let n = test_maes.len() as f64;
        let mean = test_maes.iter().sum::<f64>() / n;
        let std = (test_maes.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n).sqrt();
        say(out, format!("test MAE over {} runs: {mean:.6} +/- {std:.6}", test_maes.len()))?;
    }
    Ok(dirs)
}

/// A model restored from a checkpoint.
pub struct Restored {
    pub config: RunConfig,
    pub checkpoint: Checkpoint,
    pub vocab: Option<Vocabulary>,
}

pub fn restore(path: &Path) -> Result<Restored> {
    let checkpoint = Checkpoint::load(path)?;
    let config = RunConfig::from_toml(&checkpoint.config_toml)?;
    let vocab = checkpoint.meta("vocab").map(Vocabulary::from_tsv).transpose()?;
    Ok(Restored { config, checkpoint, vocab })
}

impl Restored {
    /// The encoder stored in the checkpoint; `choice` picks one when both are.
    pub fn encoder_kind(&self, choice: Option<EncoderKind>) -> Result<EncoderKind> {
        let present: Vec<EncoderKind> = [EncoderKind::Moformer, EncoderKind::Cgcnn]
            .into_iter()
            .filter(|k| !self.checkpoint.params.subset(k.prefix()).is_empty())
            .collect();
        match (choice, present.as_slice()) {
            (Some(k), _) if present.contains(&k) => Ok(k),
            (Some(k), _) => Err(Error::ModalityMismatch(format!("checkpoint holds no {k} encoder"))),
            (None, [k]) => Ok(*k),
            (None, []) => Err(Error::Checkpoint("checkpoint holds no encoder weights".into())),
            (None, _) => Err(Error::Config("checkpoint holds both encoders; choose one with --encoder".into())),
        }
    }

    fn inputs(&self, kind: EncoderKind, manifest: &Manifest) -> Result<Vec<EncoderInput>> {
        check_modality(manifest, kind)?;
        manifest.require(&[column_for(kind)])?;
        encoder_inputs(kind, manifest, &self.config, self.vocab.as_ref())
    }

    fn regressor(&self) -> Result<Regressor> {
        if self.checkpoint.meta("kind") != Some("finetune") {
            return Err(Error::Checkpoint("not a fine-tuned checkpoint".into()));
        }
        let kind: EncoderKind = self.checkpoint.require_meta("encoder")?.parse()?;
        let number = |key: &str| -> Result<f64> {
            self.checkpoint
                .require_meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {key} entry")))
        };
        let mut model = Regressor::new(build_encoder(kind, &self.config)?)?;
        model.scaler = TargetScaler { mean: number("target_mean")?, std: number("target_std")? };
        Ok(model)
    }
}

/// MAE of a fine-tuned checkpoint on every record of a labeled manifest.
pub fn evaluate(checkpoint: &Path, manifest: &Path, predictions: Option<&Path>, out: Out<'_>) -> Result<f64> {
    let restored = restore(checkpoint)?;
    let model = restored.regressor()?;
    let m = Manifest::load(manifest)?;
    let inputs = restored.inputs(model.encoder.kind(), &m)?;
    m.require(&[Column::Target])?;
    let records: Vec<LabeledRecord> = m
        .rows
        .iter()
        .zip(inputs)
        .map(|(r, input)| LabeledRecord { id: r.id.clone(), input, target: r.target.expect("checked") })
        .collect();
    let refs: Vec<&LabeledRecord> = records.iter().collect();
    let result = evaluate_records(&model, &restored.checkpoint.params, &refs)?;
    if let Some(p) = predictions {
        write_predictions_csv(p, &result.predictions)?;
    }
    let unit = restored.checkpoint.meta("target_unit").unwrap_or("");
    say(out, format!("MAE {:.6} {unit} over {} records", result.mae, records.len()).trim_end())?;
    Ok(result.mae)
}

/// Writes one row per manifest record: the id and the encoder embedding.
pub fn embed(
    checkpoint: &Path,
    manifest: &Path,
    out_csv: &Path,
    choice: Option<EncoderKind>,
    out: Out<'_>,
) -> Result<usize> {
    let restored = restore(checkpoint)?;
    let kind = restored.encoder_kind(choice)?;
    let encoder = build_encoder(kind, &restored.config)?;
    let m = Manifest::load(manifest)?;
    let inputs = restored.inputs(kind, &m)?;
    let params = &restored.checkpoint.params;
    let rows = exec::map(&inputs, |input| {
        let mut g = Graph::new(params);
        let v = encoder.embed(&mut g, input)?;
        Ok(g.value(v).data().to_vec())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let ctx = || format!("writing {}", out_csv.display());
    let mut w = csv::Writer::from_path(out_csv).map_err(|e| Error::io(ctx(), e.into()))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..encoder.output_dim()).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(|e| Error::io(ctx(), e.into()))?;
    for (r, emb) in m.rows.iter().zip(&rows) {
        let mut rec = vec![r.id.clone()];
        rec.extend(emb.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::io(ctx(), e.into()))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    say(out, format!("{} embeddings of width {} written to {}", rows.len(), encoder.output_dim(), out_csv.display()))?;
    Ok(rows.len())
}

/// Attention maps of every layer and head for one MOFid, as JSON.
pub fn attn_export(checkpoint: &Path, mofid: &str, out_path: &Path, out: Out<'_>) -> Result<AttentionExport> {
    let m = parse_mofid(mofid)?;
    let restored = restore(checkpoint)?;
    restored.encoder_kind(Some(EncoderKind::Moformer))?;
    let vocab = restored.vocab.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
    let model = Moformer::new(restored.config.transformer.clone(), MOFORMER_PREFIX)?;
    let seq = vocab.encode_to_len(&m, restored.config.transformer.max_len)?;
    let export = AttentionExport::compute(&model, &restored.checkpoint.params, vocab, &seq, mofid.trim())?;
    export.save(out_path)?;
    say(
        out,
        format!("{} attention maps over {} tokens written to {}", export.maps.len(), export.tokens.len(), out_path.display()),
    )?;
    Ok(export)
}
