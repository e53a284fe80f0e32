//! Run configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crystal::CgcnnConfig;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::regression::{RemainderPolicy, TrainPlan, DEFAULT_FRACTIONS};
use crate::ssl::PretrainConfig;
use crate::transformer::TransformerConfig;

/// Overrides the configured output directory when set.
pub const OUTPUT_ROOT_ENV: &str = "MOFORMER_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Pins the worker pool to `threads` (1 when unset).
    pub deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub transformer: TransformerConfig,
    pub cgcnn: CgcnnConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            threads: None,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            transformer: TransformerConfig::default(),
            cgcnn: CgcnnConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Delimited manifest with a header row (`.tsv` for tabs, otherwise commas).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Vocabulary file; built from the manifest when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_cache: Option<PathBuf>,
    pub target_name: String,
    pub target_unit: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            vocab: None,
            graph_cache: None,
            target_name: "target".into(),
            target_unit: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub encoder: EncoderKind,
    /// Pretraining checkpoint to start the encoder from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_encoder: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_head: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub weight_decay: f64,
    pub fractions: [f64; 3],
    pub remainder: RemainderPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    pub standardize: bool,
    /// Number of runs, with seeds `seed, seed + 1, ...`.
    pub repeats: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            encoder: EncoderKind::Moformer,
            init: None,
            lr_encoder: None,
            lr_head: None,
            batch_size: None,
            epochs: 200,
            weight_decay: 1e-6,
            fractions: DEFAULT_FRACTIONS,
            remainder: RemainderPolicy::ToTrain,
            train_subset: None,
            standardize: true,
            repeats: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn plan(&self, seed: u64) -> TrainPlan {
        let d = TrainPlan::defaults(self.encoder, self.init.is_some());
        TrainPlan {
            encoder: self.encoder,
            lr_encoder: self.lr_encoder.unwrap_or(d.lr_encoder),
            lr_head: self.lr_head.unwrap_or(d.lr_head),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            fractions: self.fractions,
            remainder: self.remainder,
            train_subset: self.train_subset,
            standardize: self.standardize,
            seed,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(format!("resolving {}", base.display()), e))?;
        cfg.rebase(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.data.manifest, &mut self.data.vocab, &mut self.data.graph_cache, &mut self.finetune.init]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// The directory runs are written under, honouring [`OUTPUT_ROOT_ENV`].
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn worker_threads(&self) -> Option<usize> {
        if self.deterministic {
            Some(self.threads.unwrap_or(1))
        } else {
            self.threads
        }
    }

    /// Checks value ranges and that every referenced input path exists.
    pub fn validate(&self) -> Result<()> {
        self.cgcnn.validate()?;
        self.pretrain.validate()?;
        self.finetune.plan(self.seed).validate()?;
        if self.finetune.repeats == 0 {
            return Err(Error::InvalidConfig("finetune.repeats must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        for p in [&self.data.manifest, &self.data.vocab, &self.finetune.init].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Fills every defaulted choice so the echo fully describes the run.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let plan = self.finetune.plan(self.seed);
        out.finetune.lr_encoder = Some(plan.lr_encoder);
        out.finetune.lr_head = Some(plan.lr_head);
        out.finetune.batch_size = Some(plan.batch_size);
        out.output_dir = self.output_root();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.transformer.d_emb, 512);
        assert_eq!(cfg.transformer.n_layers, 6);
        assert_eq!(cfg.cgcnn.n_conv, 3);
        assert_eq!(cfg.pretrain.batch_size, 32);
        assert_eq!(cfg.pretrain.lr, 1e-5);
        assert_eq!(cfg.pretrain.epochs, 15);
        assert_eq!(cfg.pretrain.split, [0.95, 0.05]);
        let plan = cfg.finetune.plan(0);
        assert_eq!((plan.batch_size, plan.lr_encoder, plan.lr_head, plan.epochs), (64, 5e-5, 0.01, 200));
        assert_eq!(plan.weight_decay, 1e-6);
        assert_eq!(plan.fractions, [0.7, 0.15, 0.15]);
    }

    #[test]
    fn cgcnn_rates_depend_on_init() {
        let mut f = FinetuneConfig { encoder: EncoderKind::Cgcnn, ..Default::default() };
        assert_eq!((f.plan(0).batch_size, f.plan(0).lr_encoder), (128, 0.01));
        f.init = Some("x.ckpt".into());
        assert_eq!(f.plan(0).lr_encoder, 0.002);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 1").is_err());
        assert!(RunConfig::from_toml("[transformer]\nd_model = 8").is_err());
        assert!(RunConfig::from_toml("[finetune]\nencoder = \"lstm\"").is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = RunConfig::from_toml("seed = 4\n[finetune]\nencoder = \"cgcnn\"\n[transformer]\nd_emb = 16").unwrap();
        let echo = cfg.resolved().to_toml().unwrap();
        let back = RunConfig::from_toml(&echo).unwrap();
        assert_eq!(back, cfg.resolved());
        assert_eq!(back.finetune.lr_encoder, Some(0.01));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::from_toml("[data]\nmanifest = \"m.csv\"").unwrap();
        cfg.rebase(Path::new("/tmp/x"));
        assert_eq!(cfg.data.manifest.unwrap(), Path::new("/tmp/x/m.csv"));
        assert_eq!(cfg.output_dir, Path::new("/tmp/x/runs"));
    }
}
