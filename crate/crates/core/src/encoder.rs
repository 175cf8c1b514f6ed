//! Transformer encoder producing one contextual vector per input position.
//!
//! Post-norm layout as in BERT: learned token, position and segment
//! embeddings summed and normalized, then `n_layers` blocks of masked
//! multi-head self-attention and a ReLU feed-forward network, each wrapped in
//! a residual connection followed by layer normalization. Padding keys are
//! masked out of every attention row, so hidden states at real positions do
//! not depend on how much padding follows them.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedInput;
use crate::error::{Error, Result};
use crate::layers::{uniform, LayerNorm, Linear, Mode};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad(format!("encoder dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 140,
            vocab_size: 0,
            dropout: 0.1,
        }
    }
}

/// Hidden states plus the attention weights of every layer and head.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[seq_len × d_model]`.
    pub hidden: Var,
    /// `attentions[layer][head]` is `[seq_len × seq_len]`, rows are queries.
    pub attentions: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    token_emb: ParamId,
    position_emb: ParamId,
    segment_emb: ParamId,
    emb_norm: LayerNorm,
    blocks: Vec<Block>,
}

const EMB_INIT: f64 = 0.05;

impl Encoder {
    pub fn new<T: Scalar>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(Error::Contract("encoder vocab_size must be positive".into()));
        }
        let d = cfg.d_model;
        let token_emb = store.add("encoder.token_emb", uniform(rng, vec![cfg.vocab_size, d], EMB_INIT))?;
        let position_emb = store.add("encoder.position_emb", uniform(rng, vec![cfg.max_len, d], EMB_INIT))?;
        let segment_emb = store.add("encoder.segment_emb", uniform(rng, vec![2, d], EMB_INIT))?;
        let emb_norm = LayerNorm::new(store, "encoder.emb_norm", d)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("encoder.layer{l}");
            blocks.push(Block {
                query: Linear::new(store, &format!("{p}.query"), d, d, rng)?,
                key: Linear::new(store, &format!("{p}.key"), d, d, rng)?,
                value: Linear::new(store, &format!("{p}.value"), d, d, rng)?,
                output: Linear::new(store, &format!("{p}.attn_out"), d, d, rng)?,
                attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d)?,
                ff_in: Linear::new(store, &format!("{p}.ff_in"), d, cfg.d_ff, rng)?,
                ff_out: Linear::new(store, &format!("{p}.ff_out"), cfg.d_ff, d, rng)?,
                ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
            });
        }
        Ok(Self {
            cfg,
            token_emb,
            position_emb,
            segment_emb,
            emb_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Token + learned position + segment embeddings, layer-normalized.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        token_ids: &[u32],
        segment_ids: &[u8],
    ) -> Result<Var> {
        let len = token_ids.len();
        if len > self.cfg.max_len {
            return Err(Error::Length {
                len,
                max: self.cfg.max_len,
            });
        }
        if segment_ids.len() != len {
            return Err(crate::error::shape_err("embed", &[len], &[segment_ids.len()]));
        }
        let tok_ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let seg_ids: Vec<usize> = segment_ids.iter().map(|&s| s as usize).collect();
        let pos_ids: Vec<usize> = (0..len).collect();

        let tok_table = tape.param(store, self.token_emb);
        let pos_table = tape.param(store, self.position_emb);
        let seg_table = tape.param(store, self.segment_emb);
        let tok = tape.embedding(tok_table, &tok_ids)?;
        let pos = tape.embedding(pos_table, &pos_ids)?;
        let seg = tape.embedding(seg_table, &seg_ids)?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add(sum, seg)?;
        self.emb_norm.forward(tape, store, sum)
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &TokenizedInput,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderOutput> {
        let len = input.len();
        if input.attention_mask.len() != len {
            return Err(crate::error::shape_err("encode", &[len], &[input.attention_mask.len()]));
        }
        let mut x = self.embed(tape, store, &input.token_ids, &input.segment_ids)?;
        x = mode.dropout(tape, x, self.cfg.dropout)?;

        let key_mask: Vec<bool> = (0..len)
            .flat_map(|_| input.attention_mask.iter().copied())
            .collect();
        let dh = self.cfg.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());

        let mut attentions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let q = block.query.forward(tape, store, x)?;
            let k = block.key.forward(tape, store, x)?;
            let v = block.value.forward(tape, store, x)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            let mut weights = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.masked_softmax(scores, &key_mask)?;
                weights.push(attn);
                heads.push(tape.matmul(attn, vh)?);
            }
            attentions.push(weights);
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads, 1)?
            };
            let attn_out = block.output.forward(tape, store, ctx)?;
            let attn_out = mode.dropout(tape, attn_out, self.cfg.dropout)?;
            let res = tape.add(x, attn_out)?;
            x = block.attn_norm.forward(tape, store, res)?;

            let ff = block.ff_in.forward(tape, store, x)?;
            let ff = tape.relu(ff);
            let ff = block.ff_out.forward(tape, store, ff)?;
            let ff = mode.dropout(tape, ff, self.cfg.dropout)?;
            let res = tape.add(x, ff)?;
            x = block.ff_norm.forward(tape, store, res)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            attentions,
        })
    }
}
