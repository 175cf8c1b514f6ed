//! Deterministic synthetic corpus of finance-style news snippets.
//!
//! Each text mentions several company names, each followed by an action
//! phrase. Gold entities are the names immediately followed by a trigger of
//! the queried event type; distractors are followed by neutral phrases or by
//! triggers of other event types.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RawExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_examples: usize,
    /// Fraction of examples with 2–3 gold entities.
    pub multi_entity_fraction: f64,
    /// Distractor names per example, inclusive range.
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 1000,
            multi_entity_fraction: 0.0,
            min_distractors: 1,
            max_distractors: 3,
        }
    }
}

struct EventKind {
    name: &'static str,
    triggers: &'static [&'static str],
}

const EVENTS: &[EventKind] = &[
    EventKind { name: "破产清算", triggers: &["宣布破产", "进入破产清算程序"] },
    EventKind { name: "股权质押", triggers: &["质押股权", "大股东股权遭质押"] },
    EventKind { name: "高管减持", triggers: &["遭高管减持", "高管减持股份"] },
    EventKind { name: "业绩下滑", triggers: &["业绩大幅下滑", "净利润同比下滑"] },
    EventKind { name: "资产冻结", triggers: &["资产被冻结", "银行账户遭冻结"] },
    EventKind { name: "信批违规", triggers: &["信息披露违规", "因信批违规收到警示函"] },
    EventKind { name: "重组失败", triggers: &["重组宣告失败", "终止重大资产重组"] },
    EventKind { name: "评级调低", triggers: &["信用评级被下调", "遭评级机构降级"] },
];

const NEUTRAL: &[&str] = &[
    "发布公告",
    "召开股东大会",
    "表示密切关注",
    "股价保持平稳",
    "回应称经营正常",
    "签署战略合作协议",
    "新任董事长到岗",
];

const OPENERS: &[&str] = &["", "据报道，", "消息称，", "记者获悉，", "今日盘后，"];

const JOINERS: &[&str] = &["，", "；", "，同时"];

const NAME_HEAD: &str = "华东南北中金银泰盛鑫海天恒宏伟达安康远航新兴信通瑞丰润利佳隆昌明";

const NAME_TAIL: &[&str] = &[
    "科技", "集团", "股份", "控股", "实业", "药业", "银行", "证券", "地产", "能源", "",
];

fn make_name(rng: &mut ChaCha8Rng) -> String {
    let head: Vec<char> = NAME_HEAD.chars().collect();
    let n = rng.gen_range(2..=3);
    let mut name: String = (0..n).map(|_| *head.choose(rng).unwrap()).collect();
    name.push_str(NAME_TAIL.choose(rng).unwrap());
    name
}

/// Draws `count` names where no name occurs inside another.
fn distinct_names(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(count);
    while names.len() < count {
        let cand = make_name(rng);
        if names.iter().all(|n| !n.contains(&cand) && !cand.contains(n.as_str())) {
            names.push(cand);
        }
    }
    names
}

/// Generates `cfg.n_examples` records. Identical `(cfg, seed)` pairs give
/// identical corpora, and every gold entity is a substring of its text.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = cfg.min_distractors.min(cfg.max_distractors);
    let hi = cfg.max_distractors.max(lo);
    (0..cfg.n_examples)
        .map(|i| {
            let ev_idx = rng.gen_range(0..EVENTS.len());
            let event = &EVENTS[ev_idx];
            let n_gold = if rng.gen_bool(cfg.multi_entity_fraction.clamp(0.0, 1.0)) {
                rng.gen_range(2..=3)
            } else {
                1
            };
            let n_distract = rng.gen_range(lo..=hi);
            let names = distinct_names(&mut rng, n_gold + n_distract);
            let (gold, distract) = names.split_at(n_gold);

            let mut clauses: Vec<String> = Vec::new();
            // Multi-entity golds sometimes share one clause: "甲、乙<trigger>".
            if n_gold > 1 && rng.gen_bool(0.5) {
                let trig = event.triggers.choose(&mut rng).unwrap();
                clauses.push(format!("{}{}", gold.join("、"), trig));
            } else {
                for g in gold {
                    let trig = event.triggers.choose(&mut rng).unwrap();
                    clauses.push(format!("{g}{trig}"));
                }
            }
            for d in distract {
                let phrase = if rng.gen_bool(0.5) {
                    let mut other = rng.gen_range(0..EVENTS.len() - 1);
                    if other >= ev_idx {
                        other += 1;
                    }
                    *EVENTS[other].triggers.choose(&mut rng).unwrap()
                } else {
                    *NEUTRAL.choose(&mut rng).unwrap()
                };
                clauses.push(format!("{d}{phrase}"));
            }
            clauses.shuffle(&mut rng);

            let mut text = String::from(*OPENERS.choose(&mut rng).unwrap());
            for (j, c) in clauses.iter().enumerate() {
                if j > 0 {
                    text.push_str(JOINERS.choose(&mut rng).unwrap());
                }
                text.push_str(c);
            }
            text.push('。');

            RawExample {
                id: format!("syn-{seed}-{i:05}"),
                text,
                event_type: event.name.to_string(),
                entities: gold.to_vec(),
            }
        })
        .collect()
}
