//! The two encoder families behind one interface.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{Cgcnn, CrystalGraph};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};
use crate::text::TokenSequence;
use crate::transformer::Moformer;

/// Parameter-name prefix of the text encoder.
pub const MOFORMER_PREFIX: &str = "moformer.";
/// Parameter-name prefix of the structure encoder.
pub const CGCNN_PREFIX: &str = "cgcnn.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Moformer,
    Cgcnn,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Moformer => "moformer",
            EncoderKind::Cgcnn => "cgcnn",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Moformer => MOFORMER_PREFIX,
            EncoderKind::Cgcnn => CGCNN_PREFIX,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moformer" => Ok(EncoderKind::Moformer),
            "cgcnn" => Ok(EncoderKind::Cgcnn),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

/// One model input: a token sequence for the MOFormer or a crystal graph
/// for the CGCNN.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    Tokens(TokenSequence),
    Graph(CrystalGraph),
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Moformer(Moformer),
    Cgcnn(Cgcnn),
}

impl Encoder {
    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Moformer(_) => EncoderKind::Moformer,
            Encoder::Cgcnn(_) => EncoderKind::Cgcnn,
        }
    }

    pub fn prefix(&self) -> &str {
        match self {
            Encoder::Moformer(m) => m.prefix(),
            Encoder::Cgcnn(c) => c.prefix(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Moformer(m) => m.output_dim(),
            Encoder::Cgcnn(c) => c.output_dim(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            Encoder::Moformer(m) => m.init_params(store, rng),
            Encoder::Cgcnn(c) => c.init_params(store, rng),
        }
    }

    /// Sequence/structure representation as a `1 x output_dim` row.
    pub fn embed(&self, g: &mut Graph<'_>, input: &EncoderInput) -> Result<Var> {
        match (self, input) {
            (Encoder::Moformer(m), EncoderInput::Tokens(seq)) => m.embed(g, seq),
            (Encoder::Cgcnn(c), EncoderInput::Graph(graph)) => c.embed(g, graph),
            (enc, _) => Err(Error::ModalityMismatch(format!(
                "{} encoder given the other modality",
                enc.kind()
            ))),
        }
    }
}
