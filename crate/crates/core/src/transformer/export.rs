use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Moformer;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore};
use crate::text::{TokenSequence, Vocabulary};

/// Attention weights of one (layer, head), restricted to the non-PAD tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMap {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<Vec<f64>>,
}

/// JSON document consumed by external heatmap plotters: the token labels
/// for both axes and one matrix per (layer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub mofid: String,
    pub tokens: Vec<String>,
    pub maps: Vec<HeadMap>,
}

impl AttentionExport {
    pub fn compute(
        model: &Moformer,
        params: &ParamStore,
        vocab: &Vocabulary,
        seq: &TokenSequence,
        mofid: &str,
    ) -> Result<Self> {
        let mut g = Graph::new(params);
        let out = model.forward(&mut g, seq)?;
        let active = seq.active_positions();
        let mut maps = Vec::new();
        for (layer, heads) in out.attn.iter().enumerate() {
            for (head, &w) in heads.iter().enumerate() {
                let w = g.value(w);
                let weights = active
                    .iter()
                    .map(|&i| active.iter().map(|&j| w.get(i, j)).collect())
                    .collect();
                maps.push(HeadMap { layer, head, weights });
            }
        }
        Ok(AttentionExport { mofid: mofid.to_string(), tokens: vocab.decode(seq), maps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(path, format!("serializing attention maps: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}
