//! F1@k over ranked entity predictions.
//!
//! An example counts as correct at `k` when a gold entity string equals one
//! of its top-`k` predicted strings (after the same cleaning used at
//! ingestion). Precision divides by the examples that received at least one
//! prediction, recall by the examples that carry at least one gold entity.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::clean_text;
use crate::error::{Error, Result};

/// `2PR / (P + R)`, and 0 when `P + R = 0`.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// How multi-entity gold sets are matched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Any gold entity among the top-k suffices.
    #[default]
    Any,
    /// Every gold entity must appear among the top-k.
    All,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "any" => Ok(Self::Any),
            "all" => Ok(Self::All),
            other => Err(Error::Contract(format!("unknown match mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKScore {
    pub k: usize,
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub identified: usize,
    pub annotated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top_k: Vec<TopKScore>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&TopKScore> {
        self.top_k.iter().find(|s| s.k == k)
    }

    pub fn f1_at(&self, k: usize) -> f64 {
        self.at(k).map_or(0.0, |s| s.f1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("k  correct  identified  annotated  P       R       F1\n");
        for s in &self.top_k {
            let _ = writeln!(
                out,
                "{:<2} {:>7}  {:>10}  {:>9}  {:.4}  {:.4}  {:.4}",
                s.k, s.correct, s.identified, s.annotated, s.precision, s.recall, s.f1
            );
        }
        out
    }
}

fn norm(s: &str) -> String {
    clean_text(s).unwrap_or_default()
}

/// Any-match evaluation at k = 1..=`k_max`.
pub fn evaluate(
    predictions: &HashMap<String, Vec<String>>,
    gold: &HashMap<String, Vec<String>>,
    k_max: usize,
) -> Result<EvalReport> {
    evaluate_with(predictions, gold, k_max, MatchMode::Any)
}

pub fn evaluate_with(
    predictions: &HashMap<String, Vec<String>>,
    gold: &HashMap<String, Vec<String>>,
    k_max: usize,
    mode: MatchMode,
) -> Result<EvalReport> {
    if k_max == 0 {
        return Err(Error::Contract("k_max must be at least 1".into()));
    }
    if let Some(id) = predictions.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::NotFound(id.clone()));
    }
    let identified = predictions.values().filter(|p| !p.is_empty()).count();
    let annotated = gold.values().filter(|g| !g.is_empty()).count();

    // Rank (1-based) at which each example first becomes correct.
    let mut first_correct: Vec<usize> = Vec::new();
    for (id, preds) in predictions {
        let golds: Vec<String> = gold[id].iter().map(|g| norm(g)).collect();
        if golds.is_empty() {
            continue;
        }
        let preds: Vec<String> = preds.iter().map(|p| norm(p)).collect();
        let rank_of = |g: &String| preds.iter().position(|p| p == g).map(|i| i + 1);
        let rank = match mode {
            MatchMode::Any => golds.iter().filter_map(rank_of).min(),
            MatchMode::All => golds
                .iter()
                .map(rank_of)
                .collect::<Option<Vec<_>>>()
                .and_then(|r| r.into_iter().max()),
        };
        if let Some(r) = rank {
            first_correct.push(r);
        }
    }

    let top_k = (1..=k_max)
        .map(|k| {
            let correct = first_correct.iter().filter(|&&r| r <= k).count();
            let precision = ratio(correct, identified);
            let recall = ratio(correct, annotated);
            TopKScore {
                k,
                precision,
                recall,
                f1: f1(precision, recall),
                correct,
                identified,
                annotated,
            }
        })
        .collect();
    Ok(EvalReport { top_k })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
