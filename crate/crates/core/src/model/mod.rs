//! The three model variants and their shared forward pass.
//!
//! | variant       | network                                   | decoding        |
//! |---------------|-------------------------------------------|-----------------|
//! | `bert`        | encoder → span head                       | top-1           |
//! | `sebertnets`  | encoder → bidirectional recurrent → head  | top-1           |
//! | `hsebertnets` | same network and weights as `sebertnets`  | multi-channel   |

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedInput;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::sequence::{bidirectional_encode, RecurrentParams, SequenceConfig};
use crate::span::{
    decode_multichannel, decode_top1, span_logits_from, span_loss, RecallConfig, SpanCandidate, SpanHead,
    SpanLogits,
};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

pub use checkpoint::{ModelCheckpoint, OptimizerSnapshot, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "bert")]
    BertBaseline,
    #[serde(rename = "sebertnets")]
    Sebertnets,
    #[serde(rename = "hsebertnets")]
    Hsebertnets,
}

impl ModelVariant {
    pub fn uses_sequence_layer(self) -> bool {
        !matches!(self, ModelVariant::BertBaseline)
    }

    pub fn multichannel(self) -> bool {
        matches!(self, ModelVariant::Hsebertnets)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::BertBaseline => "bert",
            ModelVariant::Sebertnets => "sebertnets",
            ModelVariant::Hsebertnets => "hsebertnets",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bert" | "bert_baseline" => Ok(Self::BertBaseline),
            "sebertnets" => Ok(Self::Sebertnets),
            "hsebertnets" => Ok(Self::Hsebertnets),
            other => Err(Error::Contract(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: EncoderConfig,
    pub sequence: SequenceConfig,
    pub recall: RecallConfig,
    /// Seed of the weight initialization.
    pub seed: u64,
}

/// Result of a forward pass on one input.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[2 × seq_len]` start/end logits.
    pub logits: Var,
    /// Text-region positions.
    pub valid: Vec<bool>,
    /// Encoder attention weights, `[layer][head]`.
    pub attentions: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    sequence: Option<(RecurrentParams, RecurrentParams)>,
    head: SpanHead,
}

impl Model {
    /// Registers freshly initialized weights for `cfg` in `store`.
    pub fn new<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.recall.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Encoder::new(cfg.encoder.clone(), store, &mut rng)?;
        let d = cfg.encoder.d_model;
        let (sequence, width) = if cfg.variant.uses_sequence_layer() {
            let s = &cfg.sequence;
            let fwd = RecurrentParams::new(store, "sequence.fwd", s.cell, d, s.hidden, &mut rng)?;
            let bwd = RecurrentParams::new(store, "sequence.bwd", s.cell, d, s.hidden, &mut rng)?;
            (Some((fwd, bwd)), 2 * s.hidden)
        } else {
            (None, d)
        };
        let head = SpanHead::new(store, width, &mut rng)?;
        Ok(Self {
            cfg,
            encoder,
            sequence,
            head,
        })
    }

    pub fn init<T: Scalar>(cfg: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store)?;
        Ok((model, store))
    }

    /// Rebuilds the model structure around existing weights, checking that
    /// names and shapes match what `cfg` would create.
    pub fn from_store<T: Scalar>(cfg: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let mut scratch = ParamStore::<T>::new();
        let model = Self::new(cfg, &mut scratch)?;
        let expected: Vec<(&str, &[usize])> = scratch.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Compat(format!(
                "parameter layout does not match the {} configuration",
                model.cfg.variant
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> ModelVariant {
        self.cfg.variant
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Width of the span head's input features.
    pub fn head_width(&self) -> usize {
        self.head.width
    }

    /// Same weights, different decoding. Only `sebertnets` and `hsebertnets`
    /// are interchangeable.
    pub fn with_variant(&self, variant: ModelVariant) -> Result<Self> {
        if variant.uses_sequence_layer() != self.cfg.variant.uses_sequence_layer() {
            return Err(Error::Compat(format!(
                "cannot reinterpret a {} model as {variant}",
                self.cfg.variant
            )));
        }
        let mut out = self.clone();
        out.cfg.variant = variant;
        Ok(out)
    }

    pub fn set_recall(&mut self, recall: RecallConfig) -> Result<()> {
        recall.validate()?;
        self.cfg.recall = recall;
        Ok(())
    }

    fn check_input(&self, input: &TokenizedInput) -> Result<()> {
        let vocab = self.cfg.encoder.vocab_size as u32;
        if let Some(&bad) = input.token_ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Compat(format!(
                "token id {bad} is outside the model vocabulary of {vocab}"
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &TokenizedInput,
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        self.check_input(input)?;
        let enc = self.encoder.encode(tape, store, input, mode)?;
        let features = match &self.sequence {
            None => enc.hidden,
            Some((fwd, bwd)) => {
                let f = fwd.bind(tape, store)?;
                let b = bwd.bind(tape, store)?;
                bidirectional_encode(tape, enc.hidden, &input.attention_mask, &f, &b)?
            }
        };
        let logits = self.head.score(tape, store, features)?;
        Ok(Forward {
            logits,
            valid: input.text_mask(),
            attentions: enc.attentions,
        })
    }

    /// Span loss of one input; the input must carry a gold span.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &TokenizedInput,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let gold = input
            .gold
            .ok_or_else(|| Error::Contract(format!("input `{}` has no gold span", input.id)))?;
        let fwd = self.forward(tape, store, input, mode)?;
        span_loss(tape, fwd.logits, &fwd.valid, gold)
    }

    /// Evaluation-mode logits.
    pub fn span_logits<T: Scalar>(&self, store: &ParamStore<T>, input: &TokenizedInput) -> Result<SpanLogits> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, input, &mut Mode::Eval)?;
        span_logits_from(&tape, fwd.logits, fwd.valid)
    }

    /// Ranked entity candidates: a single top-1 span for `bert` and
    /// `sebertnets`, up to `recall.k` multi-channel candidates for
    /// `hsebertnets`.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, input: &TokenizedInput) -> Result<Vec<SpanCandidate>> {
        let logits = self.span_logits(store, input)?;
        self.decode(&logits, input)
    }

    pub fn decode(&self, logits: &SpanLogits, input: &TokenizedInput) -> Result<Vec<SpanCandidate>> {
        if self.cfg.variant.multichannel() {
            decode_multichannel(logits, &input.text, input.text_span, &self.cfg.recall)
        } else {
            Ok(vec![decode_top1(
                logits,
                &input.text,
                input.text_span,
                self.cfg.recall.max_span_len,
            )?])
        }
    }
}
