//! Start/end pointer head: scoring, training loss and decoding.
//!
//! Candidates are scored jointly as `log p_start(s) + log p_end(e)` where both
//! distributions are softmaxes restricted to the text region. A pair is valid
//! when both ends are text positions, `s <= e` and `e - s < max_span_len`.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::Linear;
use crate::tensor::{ParamStore, Scalar, Tape, Var};

/// Per-position start/end logits and the positions allowed to hold an entity.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanLogits {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub valid: Vec<bool>,
}

/// A decoded entity. `start`/`end` are inclusive layout positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanCandidate {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub entity_text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Channel {
    /// Best pairs by joint log-probability, one per distinct entity text.
    JointTopk,
    /// i-th best start paired with the i-th best end.
    IndependentNbest,
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "JOINT_TOPK" => Ok(Channel::JointTopk),
            "INDEPENDENT_NBEST" => Ok(Channel::IndependentNbest),
            other => Err(Error::Contract(format!("unknown recall channel `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub k: usize,
    pub max_span_len: usize,
    pub channels: Vec<Channel>,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_span_len: 30,
            channels: vec![Channel::JointTopk, Channel::IndependentNbest],
        }
    }
}

impl RecallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_span_len == 0 {
            return Err(Error::Contract(format!(
                "recall needs k >= 1 and max_span_len >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Two independent affine maps from each position's features to a start and
/// an end logit, stored as one `[width × 2]` layer.
#[derive(Clone, Debug)]
pub struct SpanHead {
    pub width: usize,
    proj: Linear,
}

impl SpanHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            width,
            proj: Linear::new(store, "span_head", width, 2, rng)?,
        })
    }

    /// Returns `[2 × seq_len]` logits: row 0 start, row 1 end.
    pub fn score<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.width {
            return Err(shape_err("span_head", shape, &[0, self.width]));
        }
        let logits = self.proj.forward(tape, store, features)?;
        tape.transpose(logits)
    }
}

/// Extracts decoding inputs from `[2 × seq_len]` logits.
pub fn span_logits_from<T: Scalar>(tape: &Tape<T>, logits: Var, valid: Vec<bool>) -> Result<SpanLogits> {
    let n = valid.len();
    if tape.shape(logits) != [2, n] {
        return Err(shape_err("span logits", tape.shape(logits), &[2, n]));
    }
    let v = tape.value(logits);
    let conv = |x: &[T]| x.iter().map(|t| t.to_f64().unwrap_or(f64::NAN)).collect();
    Ok(SpanLogits {
        start_logits: conv(&v[..n]),
        end_logits: conv(&v[n..]),
        valid,
    })
}

/// Start and end cross-entropy over the valid positions, summed.
pub fn span_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, valid: &[bool], gold: (usize, usize)) -> Result<Var> {
    let n = valid.len();
    if tape.shape(logits) != [2, n] {
        return Err(shape_err("span_loss", tape.shape(logits), &[2, n]));
    }
    let (s, e) = gold;
    if s > e || e >= n || !valid[s] || !valid[e] {
        return Err(Error::Contract(format!("gold span {gold:?} outside the valid region")));
    }
    let mask: Vec<bool> = valid.iter().chain(valid).copied().collect();
    let lp = tape.masked_log_softmax(logits, &mask)?;
    let start = tape.row(lp, 0)?;
    let end = tape.row(lp, 1)?;
    let ls = tape.cross_entropy(start, s)?;
    let le = tape.cross_entropy(end, e)?;
    tape.add(ls, le)
}

fn log_softmax_valid(x: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = x
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + x.iter()
            .zip(valid)
            .filter(|(_, &v)| v)
            .map(|(&x, _)| (x - max).exp())
            .sum::<f64>()
            .ln();
    x.iter()
        .zip(valid)
        .map(|(&x, &v)| if v { x - lse } else { f64::NEG_INFINITY })
        .collect()
}

struct Scorer<'a> {
    lps: Vec<f64>,
    lpe: Vec<f64>,
    valid: &'a [bool],
    text: &'a [char],
    first: usize,
    max_span_len: usize,
}

impl<'a> Scorer<'a> {
    fn new(logits: &'a SpanLogits, text: &'a [char], text_span: (usize, usize), max_span_len: usize) -> Result<Self> {
        let n = logits.valid.len();
        if logits.start_logits.len() != n || logits.end_logits.len() != n {
            return Err(shape_err("decode", &[logits.start_logits.len(), logits.end_logits.len()], &[n]));
        }
        if max_span_len == 0 {
            return Err(Error::Contract("max_span_len must be at least 1".into()));
        }
        let (first, last) = text_span;
        if last + 1 < first || last - first + 1 != text.len() {
            return Err(Error::Decode(format!(
                "text span {text_span:?} does not match a text of {} chars",
                text.len()
            )));
        }
        if let Some(p) = logits.valid.iter().enumerate().position(|(p, &v)| v && (p < first || p > last)) {
            return Err(Error::Decode(format!("valid position {p} lies outside the text region")));
        }
        if !logits.valid.iter().any(|&v| v) {
            return Err(Error::Decode("no valid position to decode".into()));
        }
        Ok(Self {
            lps: log_softmax_valid(&logits.start_logits, &logits.valid),
            lpe: log_softmax_valid(&logits.end_logits, &logits.valid),
            valid: &logits.valid,
            text,
            first,
            max_span_len,
        })
    }

    fn is_valid(&self, s: usize, e: usize) -> bool {
        s <= e && e - s < self.max_span_len && self.valid[s] && self.valid[e]
    }

    fn candidate(&self, s: usize, e: usize) -> SpanCandidate {
        SpanCandidate {
            start: s,
            end: e,
            score: self.lps[s] + self.lpe[e],
            entity_text: self.text[s - self.first..=e - self.first].iter().collect(),
        }
    }

    fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(p, _)| p)
    }

    /// All valid pairs ordered by score, then start, then end.
    fn ranked_pairs(&self) -> Vec<SpanCandidate> {
        let mut all: Vec<SpanCandidate> = Vec::new();
        for s in self.positions() {
            for e in s..self.valid.len().min(s + self.max_span_len) {
                if self.valid[e] {
                    all.push(self.candidate(s, e));
                }
            }
        }
        all.sort_by(rank_order);
        all
    }

    fn best(&self) -> Result<SpanCandidate> {
        let mut best: Option<SpanCandidate> = None;
        for s in self.positions() {
            for e in s..self.valid.len().min(s + self.max_span_len) {
                if !self.valid[e] {
                    continue;
                }
                let score = self.lps[s] + self.lpe[e];
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(self.candidate(s, e));
                }
            }
        }
        best.ok_or_else(|| Error::Decode("no valid (start, end) pair".into()))
    }
}

fn rank_order(a: &SpanCandidate, b: &SpanCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Best valid pair; ties go to the smaller start, then the smaller end.
pub fn decode_top1(
    logits: &SpanLogits,
    text: &[char],
    text_span: (usize, usize),
    max_span_len: usize,
) -> Result<SpanCandidate> {
    Scorer::new(logits, text, text_span, max_span_len)?.best()
}

/// Ranked candidates from every enabled channel, merged by entity text.
///
/// The top-1 pair is always part of the pool, so the first candidate equals
/// [`decode_top1`]. Per entity text the highest-scoring pair is kept; the list
/// is sorted by score (descending) and truncated to `cfg.k`.
pub fn decode_multichannel(
    logits: &SpanLogits,
    text: &[char],
    text_span: (usize, usize),
    cfg: &RecallConfig,
) -> Result<Vec<SpanCandidate>> {
    cfg.validate()?;
    let scorer = Scorer::new(logits, text, text_span, cfg.max_span_len)?;
    let mut pool = vec![scorer.best()?];
    for channel in &cfg.channels {
        match channel {
            Channel::JointTopk => {
                let mut seen: Vec<&str> = Vec::new();
                let ranked = scorer.ranked_pairs();
                for c in &ranked {
                    if seen.len() == cfg.k {
                        break;
                    }
                    if !seen.contains(&c.entity_text.as_str()) {
                        seen.push(&c.entity_text);
                        pool.push(c.clone());
                    }
                }
            }
            Channel::IndependentNbest => {
                let rank = |lp: &[f64]| {
                    let mut p: Vec<usize> = scorer.positions().collect();
                    p.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                    p
                };
                let starts = rank(&scorer.lps);
                let ends = rank(&scorer.lpe);
                for (&s, &e) in starts.iter().zip(&ends).take(cfg.k) {
                    let (s, e) = if s <= e { (s, e) } else { (e, s) };
                    if scorer.is_valid(s, e) {
                        pool.push(scorer.candidate(s, e));
                    }
                }
            }
        }
    }

    let mut best_by_text: HashMap<String, SpanCandidate> = HashMap::new();
    for c in pool {
        match best_by_text.get(&c.entity_text) {
            Some(prev) if rank_order(prev, &c).is_le() => {}
            _ => {
                best_by_text.insert(c.entity_text.clone(), c);
            }
        }
    }
    let mut out: Vec<SpanCandidate> = best_by_text.into_values().collect();
    out.sort_by(rank_order);
    out.truncate(cfg.k);
    Ok(out)
}
