use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use sebertnets::data::{
    build_vocab, encode_training, encode_with_entity, generate_synthetic, load_jsonl, save_jsonl, RawExample,
};
use sebertnets::eval::{evaluate_with, EvalReport, MatchMode};
use sebertnets::layers::Mode;
use sebertnets::model::{Model, ModelCheckpoint, ModelVariant, TrainingMeta};
use sebertnets::span::SpanCandidate;
use sebertnets::tensor::Tape;
use sebertnets::train::{evaluate_model, fit, predict_all, EvalSet};

use crate::config::{synth_config, RunConfig, Settings};
use crate::{CliError, EvalArgs, InspectArgs, PredictArgs, SynthArgs, TrainArgs};

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_data(path: &Path) -> Result<Vec<RawExample>, CliError> {
    load_jsonl(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and applies the variant and top-k chosen at the
/// command line.
fn load_model(path: &Path, variant: Option<&str>, top_k: usize) -> Result<(ModelCheckpoint, Model), CliError> {
    if top_k == 0 {
        return Err(usage("top_k must be at least 1"));
    }
    let ckpt = ModelCheckpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut model = ckpt.model()?;
    if let Some(v) = variant {
        let v: ModelVariant = v.parse().map_err(usage)?;
        model = model.with_variant(v)?;
    }
    let mut recall = model.config().recall.clone();
    recall.k = top_k;
    model.set_recall(recall).map_err(usage)?;
    Ok((ckpt, model))
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref())?;
    let path = |p: &Option<std::path::PathBuf>| p.as_ref().map(|p| p.display().to_string());
    s.set_opt("data.train", path(&a.train))?;
    s.set_opt("data.dev", path(&a.dev))?;
    s.set_opt("output.checkpoint", path(&a.checkpoint))?;
    s.set_opt("output.log", path(&a.log))?;
    s.set_opt("model.variant", a.variant)?;
    s.set_opt("train.epochs", a.epochs)?;
    s.set_opt("train.batch_size", a.batch_size)?;
    s.set_opt("optimizer.lr", a.lr)?;
    s.set_opt("optimizer.kind", a.optimizer)?;
    s.set_opt("train.seed", a.seed)?;
    s.set_opt("eval.top_k", a.top_k)?;
    for pair in &a.set {
        s.set_pair(pair)?;
    }
    let mut run = RunConfig::from_settings(&s)?;

    let corpus = load_data(&run.train_path)?;
    let vocab = build_vocab(&corpus);
    run.model.encoder.vocab_size = vocab.len();
    let max_len = run.model.encoder.max_len;
    let (items, skipped) = encode_training(&corpus, &vocab, max_len)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} gold entities not found in the truncated text");
    }
    if items.is_empty() {
        return Err(CliError::Data("no usable training examples".into()));
    }
    let dev = match &run.dev_path {
        Some(p) => Some(EvalSet::new(&load_data(p)?, &vocab, max_len)?),
        None => None,
    };
    eprintln!(
        "training {} on {} inputs ({} dev), vocab {}",
        run.model.variant,
        items.len(),
        dev.as_ref().map_or(0, EvalSet::len),
        vocab.len()
    );

    let (model, mut store) = Model::init::<f32>(run.model.clone())?;
    let mut log = BufWriter::new(File::create(&run.log)?);
    let mut log_err = None;
    let t0 = Instant::now();
    let epochs = run.train.epochs;
    let outcome = fit(&model, &mut store, &items, dev.as_ref(), &run.train, None, |entry, _, _| {
        let dev_f1 = entry
            .dev_f1
            .as_ref()
            .and_then(|f| f.first())
            .map_or(String::new(), |f| format!(" dev F1@1 {f:.4}"));
        eprintln!(
            "epoch {}/{epochs} loss {:.4}{dev_f1} phase {:?} [{:.1}s]",
            entry.epoch,
            entry.loss,
            entry.phase,
            t0.elapsed().as_secs_f64()
        );
        let res = serde_json::to_writer(&mut log, entry)
            .map_err(io::Error::from)
            .and_then(|_| log.write_all(b"\n"))
            .and_then(|_| log.flush());
        match res {
            Ok(()) => true,
            Err(e) => {
                log_err = Some(e);
                false
            }
        }
    });
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let outcome = outcome?;

    let ckpt = ModelCheckpoint {
        config: run.model,
        vocab,
        params: store,
        training: TrainingMeta {
            step: outcome.steps,
            epoch: outcome.logs.len(),
            seed: run.train.seed,
        },
        optimizer: Some(outcome.optimizer),
    };
    ckpt.save(&run.checkpoint)?;
    eprintln!("wrote {} and {}", run.checkpoint.display(), run.log.display());
    Ok(())
}

fn gold_map(corpus: &[RawExample]) -> HashMap<String, Vec<String>> {
    corpus.iter().map(|ex| (ex.id.clone(), ex.entities.clone())).collect()
}

/// Reads `predict` output back into ranked entity strings.
fn read_predictions(path: &Path) -> Result<HashMap<String, Vec<String>>, CliError> {
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| CliError::Data(format!("{}:{}: {msg}", path.display(), i + 1));
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        let id = v["id"].as_str().ok_or_else(|| bad("missing id"))?.to_string();
        let texts = v["entities"]
            .as_array()
            .ok_or_else(|| bad("missing entities"))?
            .iter()
            .map(|e| e["text"].as_str().map(str::to_string).ok_or_else(|| bad("entity without text")))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(id, texts);
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    if a.top_k == 0 {
        return Err(usage("top_k must be at least 1"));
    }
    let mode: MatchMode = a.match_mode.parse().map_err(usage)?;
    let corpus = load_data(&a.data)?;
    let report: EvalReport = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => evaluate_with(&read_predictions(p)?, &gold_map(&corpus), a.top_k, mode)?,
        (None, Some(c)) => {
            let (ckpt, model) = load_model(c, a.variant.as_deref(), a.top_k)?;
            let set = EvalSet::new(&corpus, &ckpt.vocab, model.config().encoder.max_len)?;
            evaluate_model(&model, &ckpt.params, &set, a.top_k, mode)?
        }
        (None, None) => return Err(usage("eval needs --checkpoint or --predictions")),
    };
    let mut out = io::stdout().lock();
    if a.json {
        writeln!(out, "{}", report.to_json())?;
    } else {
        write!(out, "{}", report.to_table())?;
    }
    Ok(())
}

fn entity_json(c: &SpanCandidate) -> serde_json::Value {
    // Token positions are 1-based over the text; emit 0-based half-open
    // char offsets into the cleaned text.
    json!({
        "text": c.entity_text,
        "score": c.score,
        "start": c.start - 1,
        "end": c.end,
    })
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let (ckpt, model) = load_model(&a.checkpoint, a.variant.as_deref(), a.top_k)?;
    let corpus = load_data(&a.data)?;
    let max_len = model.config().encoder.max_len;
    let inputs = corpus
        .iter()
        .map(|ex| encode_with_entity(ex, None, &ckpt.vocab, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let mut preds = predict_all(&model, &ckpt.params, &inputs)?;
    let mut out = output(a.out.as_deref())?;
    for ex in &corpus {
        let cands = preds.remove(&ex.id).unwrap_or_default();
        let line = json!({
            "id": ex.id,
            "entities": cands.iter().map(entity_json).collect::<Vec<_>>(),
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.starts_with(' ') || s.ends_with(' ') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.checkpoint.display())))?;
    let model = ckpt.model()?;
    let corpus = load_data(&a.data)?;
    let ex = corpus
        .iter()
        .find(|ex| ex.id == a.example_id)
        .ok_or_else(|| CliError::from(sebertnets::Error::NotFound(a.example_id.clone())))?;
    let input = encode_with_entity(ex, None, &ckpt.vocab, model.config().encoder.max_len)?;
    let mut tape = Tape::<f32>::new();
    let fwd = model.forward(&mut tape, &ckpt.params, &input, &mut Mode::Eval)?;

    let labels: Vec<String> = input.token_ids.iter().map(|&t| csv_field(&ckpt.vocab.label(t))).collect();
    let n = labels.len();
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "layer,head,query,token,{}", labels.join(","))?;
    for (l, heads) in fwd.attentions.iter().enumerate() {
        for (h, &attn) in heads.iter().enumerate() {
            for (q, row) in tape.value(attn).chunks(n).enumerate() {
                let cells: Vec<String> = row.iter().map(f32::to_string).collect();
                writeln!(out, "{l},{h},{q},{},{}", labels[q], cells.join(","))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref())?;
    s.set_opt("synth.n_examples", a.n_examples)?;
    s.set_opt("synth.multi_entity_fraction", a.multi_entity_fraction)?;
    s.set_opt("synth.seed", a.seed)?;
    for pair in &a.set {
        s.set_pair(pair)?;
    }
    let (cfg, seed) = synth_config(&s)?;
    let corpus = generate_synthetic(&cfg, seed);
    save_jsonl(&a.out, &corpus)?;
    eprintln!("wrote {} examples to {}", corpus.len(), a.out.display());
    Ok(())
}
