//! Mini-batch training, batch prediction and evaluation.
//!
//! Each example in a batch gets its own tape and runs through [`par::map_indexed`];
//! per-example gradients are then summed in example order, so a step yields
//! identical parameters with or without the `parallel` feature.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_with_entity, RawExample, TokenizedInput, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, EvalReport, MatchMode};
use crate::layers::Mode;
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig, Phase};
use crate::par;
use crate::span::SpanCandidate;
use crate::tensor::{GradBuffer, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Seed for shuffling and dropout.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Largest k reported during evaluation.
    pub top_k: usize,
    pub match_mode: MatchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            clip_norm: 5.0,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            top_k: 5,
            match_mode: MatchMode::Any,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::Contract("batch_size and top_k must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Contract(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

/// Examples encoded for inference, with gold strings for scoring. Gold spans
/// are not located, so entities lost to truncation still count as misses.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub inputs: Vec<TokenizedInput>,
    pub gold: HashMap<String, Vec<String>>,
}

impl EvalSet {
    pub fn new(corpus: &[RawExample], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(corpus.len());
        let mut gold = HashMap::with_capacity(corpus.len());
        for ex in corpus {
            if gold.insert(ex.id.clone(), ex.entities.clone()).is_some() {
                return Err(Error::Contract(format!("duplicate example id `{}`", ex.id)));
            }
            inputs.push(encode_with_entity(ex, None, vocab, max_len)?);
        }
        Ok(Self { inputs, gold })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Per-epoch progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// F1@1..=top_k on the dev set, if one was given.
    pub dev_f1: Option<Vec<f64>>,
    pub phase: Phase,
}

/// What [`fit`] hands back once training stops.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub logs: Vec<EpochLog>,
    pub optimizer: Optimizer<f32>,
    pub steps: u64,
}

fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Mean loss and summed-then-averaged gradients of `batch`, without touching
/// the parameters.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    batch: &[TokenizedInput],
    seed: u64,
    step: u64,
) -> Result<(f64, GradBuffer<f32>)> {
    batch_gradients_with(model, store, batch, seed, step, par::is_parallel())
}

/// [`batch_gradients`] with an explicit choice of dispatch.
pub fn batch_gradients_with(
    model: &Model,
    store: &ParamStore<f32>,
    batch: &[TokenizedInput],
    seed: u64,
    step: u64,
    parallel: bool,
) -> Result<(f64, GradBuffer<f32>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let one = |i: usize, item: &TokenizedInput| -> Result<(f32, GradBuffer<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, step, i));
        let mut tape = Tape::<f32>::new();
        let loss = model.loss(&mut tape, store, item, &mut Mode::Train(&mut rng))?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        let mut buf = store.zero_grad_buffer();
        buf.add_from(&tape, &grads);
        Ok((value, buf))
    };
    let results = if parallel {
        par::map_indexed(batch, one)
    } else {
        par::map_indexed_seq(batch, one)
    };
    let mut total = store.zero_grad_buffer();
    let mut loss = 0.0f64;
    for r in results {
        let (l, g) = r?;
        loss += l as f64;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n as f32);
    Ok((loss / n, total))
}

/// One optimizer update on `batch`. Returns the mean loss.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    optimizer: &mut Optimizer<f32>,
    batch: &[TokenizedInput],
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(model, store, batch, cfg.seed, step)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence {
            step,
            msg: format!("non-finite loss or gradient (loss {loss})"),
        });
    }
    grads.clip_global_norm(cfg.clip_norm as f32);
    store.zero_grad();
    for (t, g) in store.tensors_mut().zip(&grads.0) {
        t.accumulate_grad(g)?;
    }
    optimizer.step(store).map_err(|e| match e {
        Error::Divergence { msg, .. } => Error::Divergence { step, msg },
        other => other,
    })?;
    if store.iter().any(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            step,
            msg: "parameters became non-finite".into(),
        });
    }
    Ok(loss)
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each one; returning
/// `false` from the callback stops training early.
pub fn fit(
    model: &Model,
    store: &mut ParamStore<f32>,
    train: &[TokenizedInput],
    dev: Option<&EvalSet>,
    cfg: &TrainConfig,
    optimizer: Option<Optimizer<f32>>,
    mut on_epoch: impl FnMut(&EpochLog, &Model, &ParamStore<f32>) -> bool,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("no training inputs".into()));
    }
    let mut optimizer = optimizer.unwrap_or_else(|| Optimizer::new(&cfg.optimizer, store));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0u64;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenizedInput> = chunk.iter().map(|&i| train[i].clone()).collect();
            step += 1;
            loss_sum += train_step(model, store, &mut optimizer, &batch, cfg, step)?;
            batches += 1;
        }
        let dev_f1 = match dev {
            Some(set) => {
                let report = evaluate_model(model, store, set, cfg.top_k, cfg.match_mode)?;
                Some(report.top_k.iter().map(|s| s.f1).collect())
            }
            None => None,
        };
        let log = EpochLog {
            epoch,
            step,
            loss: loss_sum / batches as f64,
            dev_f1,
            phase: optimizer.phase(),
        };
        let go_on = on_epoch(&log, model, store);
        logs.push(log);
        if !go_on {
            break;
        }
    }
    Ok(FitOutcome {
        logs,
        optimizer,
        steps: step,
    })
}

/// Ranked candidates for every input, keyed by example id.
pub fn predict_all(
    model: &Model,
    store: &ParamStore<f32>,
    inputs: &[TokenizedInput],
) -> Result<HashMap<String, Vec<SpanCandidate>>> {
    par::map_indexed(inputs, |_, x| model.predict(store, x).map(|c| (x.id.clone(), c)))
        .into_iter()
        .collect()
}

/// F1@1..=`k_max` of `model` on `set`.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore<f32>,
    set: &EvalSet,
    k_max: usize,
    mode: MatchMode,
) -> Result<EvalReport> {
    let preds = predict_all(model, store, &set.inputs)?;
    let strings = preds
        .into_iter()
        .map(|(id, c)| (id, c.into_iter().map(|c| c.entity_text).collect()))
        .collect();
    evaluate_with(&strings, &set.gold, k_max, mode)
}
