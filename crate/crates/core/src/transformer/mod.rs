//! The MOFormer encoder: token embedding plus sinusoidal positions, then a
//! stack of post-norm self-attention layers. The first (CLS) token's final
//! embedding represents the whole MOFid.

mod attention;
mod export;

pub use attention::attention;
pub use export::{AttentionExport, HeadMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamStore, Tensor, Var};
use crate::text::{TokenSequence, SEQ_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_emb: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Filled from the vocabulary when building a model.
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_emb: 512,
            n_heads: 8,
            n_layers: 6,
            d_ff: 512,
            max_len: SEQ_LEN,
            vocab_size: 0,
        }
    }
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_emb / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_emb == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad(format!("transformer dimensions must be positive: {self:?}"));
        }
        if self.d_emb % self.n_heads != 0 {
            return bad(format!(
                "d_emb {} is not divisible by n_heads {}",
                self.d_emb, self.n_heads
            ));
        }
        if self.d_emb % 2 != 0 {
            return Err(Error::OddDimension(self.d_emb));
        }
        if self.max_len == 0 || self.vocab_size == 0 {
            return bad("max_len and vocab_size must be positive".into());
        }
        Ok(())
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(max_len: usize, d_emb: usize) -> Result<Tensor> {
    if d_emb == 0 || d_emb % 2 != 0 {
        return Err(Error::OddDimension(d_emb));
    }
    let mut data = vec![0.0; max_len * d_emb];
    for pos in 0..max_len {
        for i in 0..d_emb / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_emb as f64);
            data[pos * d_emb + 2 * i] = angle.sin();
            data[pos * d_emb + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(max_len, d_emb, data)
}

/// Final per-token embeddings and the attention weights of every layer/head.
pub struct EncoderOutput {
    pub hidden: Var,
    /// `attn[layer][head]`, each `L x L`.
    pub attn: Vec<Vec<Var>>,
}

/// Encoder definition. Parameters live in a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone)]
pub struct Moformer {
    config: TransformerConfig,
    prefix: String,
    pe: Tensor,
}

impl Moformer {
    pub fn new(config: TransformerConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let pe = positional_encoding(config.max_len, config.d_emb)?;
        Ok(Moformer { config, prefix: prefix.to_string(), pe })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn output_dim(&self) -> usize {
        self.config.d_emb
    }

    fn name(&self, rest: &str) -> String {
        format!("{}{rest}", self.prefix)
    }

    fn layer_name(&self, layer: usize, rest: &str) -> String {
        format!("{}layer{layer}.{rest}", self.prefix)
    }

    /// Register freshly initialized parameters: fan-in uniform weights,
    /// zero biases, unit layer-norm gains, N(0, 1/sqrt(d_emb)) embeddings.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let (d, dk, dff) = (c.d_emb, c.d_head(), c.d_ff);
        store.insert(
            self.name("tok_emb"),
            init::normal(&[c.vocab_size, d], 1.0 / (d as f64).sqrt(), rng),
        )?;
        for l in 0..c.n_layers {
            for h in 0..c.n_heads {
                for w in ["wq", "wk", "wv"] {
                    store.insert(
                        self.layer_name(l, &format!("attn.{w}{h}")),
                        init::fan_in_uniform(d, dk, rng),
                    )?;
                }
            }
            store.insert(self.layer_name(l, "attn.wo"), init::fan_in_uniform(d, d, rng))?;
            store.insert(self.layer_name(l, "ff1.w"), init::fan_in_uniform(d, dff, rng))?;
            store.insert(self.layer_name(l, "ff1.b"), Tensor::zeros(&[dff]))?;
            store.insert(self.layer_name(l, "ff2.w"), init::fan_in_uniform(dff, d, rng))?;
            store.insert(self.layer_name(l, "ff2.b"), Tensor::zeros(&[d]))?;
            for ln in ["ln1", "ln2"] {
                store.insert(self.layer_name(l, &format!("{ln}.gain")), Tensor::full(&[d], 1.0))?;
                store.insert(self.layer_name(l, &format!("{ln}.bias")), Tensor::zeros(&[d]))?;
            }
        }
        Ok(())
    }

    /// Token embeddings plus positional encoding for the given positions.
    fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let table = g.param(&self.name("tok_emb"))?;
        let tok = g.gather_rows(table, ids)?;
        let d = self.config.d_emb;
        let mut pe = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            if p >= self.config.max_len {
                return Err(Error::ShapeMismatch {
                    op: "positional encoding",
                    left: vec![p],
                    right: vec![self.config.max_len],
                });
            }
            pe.extend_from_slice(self.pe.row(p));
        }
        let pe = g.constant(Tensor::matrix(positions.len(), d, pe)?);
        g.add(tok, pe)
    }

    /// `Concat(head_1..head_h) W_o` with per-head projections of `x`.
    pub fn multihead(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        layer: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let wq = g.param(&self.layer_name(layer, &format!("attn.wq{h}")))?;
            let wk = g.param(&self.layer_name(layer, &format!("attn.wk{h}")))?;
            let wv = g.param(&self.layer_name(layer, &format!("attn.wv{h}")))?;
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let (out, w) = attention(g, q, k, v, key_mask)?;
            heads.push(out);
            weights.push(w);
        }
        let concat = g.concat_cols(&heads)?;
        let wo = g.param(&self.layer_name(layer, "attn.wo"))?;
        Ok((g.matmul(concat, wo)?, weights))
    }

    /// Post-norm layer: `x1 = LN(x + MHA(x))`, `x2 = LN(x1 + FF(x1))`.
    pub fn encoder_layer(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        layer: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let p = |rest: &str| self.layer_name(layer, rest);
        let (attn, weights) = self.multihead(g, x, layer, key_mask)?;
        let res1 = g.add(x, attn)?;
        let (gain1, bias1) = (g.param(&p("ln1.gain"))?, g.param(&p("ln1.bias"))?);
        let x1 = g.layer_norm(res1, gain1, bias1)?;

        let (w1, b1) = (g.param(&p("ff1.w"))?, g.param(&p("ff1.b"))?);
        let (w2, b2) = (g.param(&p("ff2.w"))?, g.param(&p("ff2.b"))?);
        let hidden = g.linear(x1, w1, b1)?;
        let hidden = g.relu(hidden);
        let ff = g.linear(hidden, w2, b2)?;
        let res2 = g.add(x1, ff)?;
        let (gain2, bias2) = (g.param(&p("ln2.gain"))?, g.param(&p("ln2.bias"))?);
        Ok((g.layer_norm(res2, gain2, bias2)?, weights))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenIdOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        if ids.len() > self.config.max_len || ids.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "sequence length",
                left: vec![ids.len()],
                right: vec![self.config.max_len],
            });
        }
        Ok(())
    }

    /// Full forward over every position; PAD keys are masked in every layer.
    pub fn forward(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<EncoderOutput> {
        self.check_ids(&seq.ids)?;
        if seq.pad_mask.len() != seq.ids.len() {
            return Err(Error::ShapeMismatch {
                op: "pad mask",
                left: vec![seq.ids.len()],
                right: vec![seq.pad_mask.len()],
            });
        }
        let positions: Vec<usize> = (0..seq.ids.len()).collect();
        let mut x = self.embed_tokens(g, &seq.ids, &positions)?;
        let mut attn = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, w) = self.encoder_layer(g, x, l, Some(&seq.pad_mask))?;
            x = next;
            attn.push(w);
        }
        Ok(EncoderOutput { hidden: x, attn })
    }

    /// Row 0 of the final embeddings, as a `1 x d_emb` row.
    pub fn cls_embedding(&self, g: &mut Graph<'_>, out: &EncoderOutput) -> Result<Var> {
        g.slice_rows(out.hidden, 0, 1)
    }

    /// CLS embedding computed over the non-PAD positions only.
    ///
    /// Non-PAD rows never see PAD keys, so this equals
    /// `cls_embedding(forward(seq))` bit for bit while skipping the padding.
    pub fn embed(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        self.check_ids(&seq.ids)?;
        let positions = seq.active_positions();
        if positions.first() != Some(&0) {
            return Err(Error::AllMasked(0));
        }
        let ids: Vec<usize> = positions.iter().map(|&p| seq.ids[p]).collect();
        let mut x = self.embed_tokens(g, &ids, &positions)?;
        for l in 0..self.config.n_layers {
            x = self.encoder_layer(g, x, l, None)?.0;
        }
        g.slice_rows(x, 0, 1)
    }
}
