//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria run one at a time (a shared lock) so that wall-clock budgets are
//! measured without interference from the other criteria.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sebertnets::data::{
    build_vocab, clean_text, encode_training, generate_synthetic, RawExample, SynthConfig, TokenizedInput, CLS, SEP,
};
use sebertnets::encoder::{Encoder, EncoderConfig};
use sebertnets::eval::{evaluate, f1};
use sebertnets::layers::Mode;
use sebertnets::model::{Model, ModelCheckpoint, ModelConfig, ModelVariant, TrainingMeta};
use sebertnets::optim::{
    adam_step, sgd_step, swats_step, AdamConfig, AdamState, OptimizerConfig, Phase, SwatsState, DEFAULT_EPS_SWITCH,
};
use sebertnets::sequence::{
    bidirectional_encode, gru_step, lstm_step, CellKind, CellState, RecurrentParams, SequenceConfig,
};
use sebertnets::span::{decode_multichannel, decode_top1, RecallConfig, SpanLogits};
use sebertnets::tensor::{ParamStore, Tape, Tensor, Var};
use sebertnets::train::{evaluate_model, fit, predict_all, EvalSet, TrainConfig};

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

fn criterion(n: u32, name: &str, budget: Duration, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let res = body();
    let took = t0.elapsed();
    let res = match res {
        Ok(d) if took > budget => Err(format!("{d}; took {took:.1?}, budget {budget:?}")),
        r => r,
    };
    let line = match &res {
        Ok(d) => format!("criterion {n:>2} PASS  {name} [{took:.2?}] {d}\n"),
        Err(e) => format!("criterion {n:>2} FAIL  {name} [{took:.2?}] {e}\n"),
    };
    // Written to the raw handle so the verdict shows up even when output is captured.
    let _ = std::io::stdout().write_all(line.as_bytes());
    if let Err(e) = res {
        panic!("criterion {n} failed: {e}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn bits64(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn bits32(x: &[f32]) -> Vec<u32> {
    x.iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
const GRAD_TRIALS: usize = 100;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, absolute when both are (near) zero.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-10)
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> sebertnets::Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    graph: Graph,
}

/// Scalar objective `Σ w ⊙ graph(inputs)`; returns its value and, if asked,
/// the gradient with respect to every input.
fn objective(inputs: &[Tensor<f64>], graph: &Graph, weights: &[f64], with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().requiring_grad())).collect();
    let out = graph(&mut tape, &vars).expect("graph builds");
    let weighted = tape.mul_const(out, weights.to_vec()).expect("weights fit");
    let loss = tape.sum(weighted);
    let value = tape.value(loss)[0];
    if !with_grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).expect("backward");
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (value, g)
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let n_out = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = (case.graph)(&mut tape, &vars).expect("graph builds");
        tape.value(out).len()
    };
    let weights = uniform_vec(rng, n_out, 1.0);
    let (_, analytic) = objective(&case.inputs, &case.graph, &weights, true);
    let mut worst: f64 = 0.0;
    let mut inputs = case.inputs.clone();
    for (which, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[which].data()[j];
            inputs[which].data_mut()[j] = orig + FD_STEP;
            let (up, _) = objective(&inputs, &case.graph, &weights, false);
            inputs[which].data_mut()[j] = orig - FD_STEP;
            let (down, _) = objective(&inputs, &case.graph, &weights, false);
            inputs[which].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform_vec(rng, n, 1.0)).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

fn mat(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (m, n) = (dim(rng), dim(rng));
    tensor(rng, vec![m, n])
}

fn with_cols(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let m = dim(rng);
    tensor(rng, vec![m, n])
}

fn with_rows(rng: &mut ChaCha8Rng, m: usize) -> Tensor<f64> {
    let n = dim(rng);
    tensor(rng, vec![m, n])
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<bool> = (0..cols).map(|_| rng.gen_bool(0.7)).collect();
        let keep = rng.gen_range(0..cols);
        row[keep] = true;
        mask.extend(row);
    }
    mask
}

type CaseGen = fn(&mut ChaCha8Rng) -> Case;

fn primitive_cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            Case {
                inputs: vec![tensor(r, vec![m, k]), tensor(r, vec![k, n])],
                graph: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }),
        ("add", |r| {
            let s = vec![dim(r), dim(r)];
            Case {
                inputs: vec![tensor(r, s.clone()), tensor(r, s)],
                graph: Box::new(|t, v| t.add(v[0], v[1])),
            }
        }),
        ("sub", |r| {
            let s = vec![dim(r), dim(r)];
            Case {
                inputs: vec![tensor(r, s.clone()), tensor(r, s)],
                graph: Box::new(|t, v| t.sub(v[0], v[1])),
            }
        }),
        ("mul", |r| {
            let s = vec![dim(r), dim(r)];
            Case {
                inputs: vec![tensor(r, s.clone()), tensor(r, s)],
                graph: Box::new(|t, v| t.mul(v[0], v[1])),
            }
        }),
        ("scale", |r| {
            let c: f64 = r.gen_range(-2.0..2.0);
            Case {
                inputs: vec![mat(r)],
                graph: Box::new(move |t, v| Ok(t.scale(v[0], c))),
            }
        }),
        ("sigmoid", |r| Case {
            inputs: vec![mat(r)],
            graph: Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        }),
        ("tanh", |r| Case {
            inputs: vec![mat(r)],
            graph: Box::new(|t, v| Ok(t.tanh(v[0]))),
        }),
        ("relu", |r| {
            let mut x = mat(r);
            // Keep away from the kink, where the derivative is undefined.
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1f64.copysign(*v);
                }
            }
            Case {
                inputs: vec![x],
                graph: Box::new(|t, v| Ok(t.relu(v[0]))),
            }
        }),
        ("masked_softmax", |r| {
            let (rows, cols) = (dim(r), dim(r) + 1);
            let mask = random_mask(r, rows, cols);
            Case {
                inputs: vec![tensor(r, vec![rows, cols])],
                graph: Box::new(move |t, v| t.masked_softmax(v[0], &mask)),
            }
        }),
        ("masked_log_softmax", |r| {
            let (rows, cols) = (dim(r), dim(r) + 1);
            let mask = random_mask(r, rows, cols);
            let targets: Vec<usize> = mask
                .chunks(cols)
                .map(|row| {
                    let live: Vec<usize> = (0..cols).filter(|&c| row[c]).collect();
                    live[r.gen_range(0..live.len())]
                })
                .collect();
            Case {
                inputs: vec![tensor(r, vec![rows, cols])],
                // Masked entries are -inf, so the objective reads live entries only.
                graph: Box::new(move |t, v| {
                    let lp = t.masked_log_softmax(v[0], &mask)?;
                    let mut parts = Vec::new();
                    for (i, &target) in targets.iter().enumerate() {
                        let row = t.row(lp, i)?;
                        parts.push(t.cross_entropy(row, target)?);
                    }
                    let parts: Vec<Var> = parts.iter().map(|&p| t.reshape(p, vec![1, 1])).collect::<sebertnets::Result<_>>()?;
                    t.concat(&parts, 0)
                }),
            }
        }),
        ("cross_entropy", |r| {
            let c = dim(r) + 1;
            let target = r.gen_range(0..c);
            Case {
                inputs: vec![tensor(r, vec![1, c])],
                graph: Box::new(move |t, v| t.cross_entropy(v[0], target)),
            }
        }),
        ("sum", |r| Case {
            inputs: vec![mat(r)],
            graph: Box::new(|t, v| Ok(t.sum(v[0]))),
        }),
        ("concat_rows", |r| {
            let c = dim(r);
            Case {
                inputs: vec![with_cols(r, c), with_cols(r, c), with_cols(r, c)],
                graph: Box::new(|t, v| t.concat(v, 0)),
            }
        }),
        ("concat_cols", |r| {
            let m = dim(r);
            Case {
                inputs: vec![with_rows(r, m), with_rows(r, m)],
                graph: Box::new(|t, v| t.concat(v, 1)),
            }
        }),
        ("embedding", |r| {
            let (vocab, d) = (dim(r) + 1, dim(r));
            let ids: Vec<usize> = (0..dim(r) + 2).map(|_| r.gen_range(0..vocab)).collect();
            Case {
                inputs: vec![tensor(r, vec![vocab, d])],
                graph: Box::new(move |t, v| t.embedding(v[0], &ids)),
            }
        }),
        ("layer_norm", |r| {
            let (rows, n) = (dim(r), dim(r) + 1);
            Case {
                inputs: vec![tensor(r, vec![rows, n]), tensor(r, vec![n]), tensor(r, vec![n])],
                graph: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
            }
        }),
        ("transpose", |r| Case {
            inputs: vec![mat(r)],
            graph: Box::new(|t, v| t.transpose(v[0])),
        }),
        ("slice_cols", |r| {
            let n = dim(r) + 1;
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n - start);
            Case {
                inputs: vec![with_cols(r, n)],
                graph: Box::new(move |t, v| t.slice_cols(v[0], start, len)),
            }
        }),
        ("row", |r| {
            let m = dim(r);
            let i = r.gen_range(0..m);
            Case {
                inputs: vec![with_rows(r, m)],
                graph: Box::new(move |t, v| t.row(v[0], i)),
            }
        }),
        ("broadcast_rows", |r| {
            let rows = dim(r);
            Case {
                inputs: vec![{ let n = dim(r); tensor(r, vec![n]) }],
                graph: Box::new(move |t, v| t.broadcast_rows(v[0], rows)),
            }
        }),
        ("mul_const", |r| {
            let s = vec![dim(r), dim(r)];
            let c = uniform_vec(r, s[0] * s[1], 2.0);
            Case {
                inputs: vec![tensor(r, s)],
                graph: Box::new(move |t, v| t.mul_const(v[0], c.clone())),
            }
        }),
        ("dropout", |r| {
            let seed: u64 = r.gen();
            Case {
                inputs: vec![mat(r)],
                graph: Box::new(move |t, v| t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(seed))),
            }
        }),
        ("reshape", |r| {
            let (m, n) = (dim(r), dim(r));
            Case {
                inputs: vec![tensor(r, vec![m, n])],
                graph: Box::new(move |t, v| t.reshape(v[0], vec![n, m])),
            }
        }),
    ]
}

fn grad_model_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        variant: ModelVariant::Sebertnets,
        encoder: EncoderConfig {
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 6,
            max_len: 4,
            vocab_size,
            dropout: 0.0,
        },
        sequence: SequenceConfig {
            cell: CellKind::Lstm,
            hidden: 3,
        },
        recall: RecallConfig::default(),
        seed,
    }
}

/// Full graph: 2-layer encoder, 4-step BiLSTM, span head, span loss.
fn composed_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = 8;
    let (model, mut store) = Model::init::<f64>(grad_model_config(vocab_size, seed)).unwrap();
    // Spread the weights out so every path carries a visible gradient.
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let s = rng.gen_range(1..=2);
    let e = rng.gen_range(s..=2);
    let input = TokenizedInput {
        id: "g".into(),
        token_ids: vec![CLS, rng.gen_range(4..8), rng.gen_range(4..8), SEP],
        segment_ids: vec![0, 0, 0, 1],
        attention_mask: vec![true; 4],
        text_span: (1, 2),
        gold: Some((s, e)),
        text: vec!['x', 'y'],
    };
    let loss_of = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, store, &input, &mut Mode::Eval).unwrap();
        tape.value(l)[0]
    };
    let mut tape = Tape::new();
    let l = model.loss(&mut tape, &store, &input, &mut Mode::Eval).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut buf = store.zero_grad_buffer();
    buf.add_from(&tape, &grads);
    let analytic: Vec<f64> = buf.0.concat();

    let ids: Vec<_> = store.ids().collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for id in ids {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&store);
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&store);
            store.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

#[test]
fn criterion_01_gradient_suite() {
    criterion(1, "fp64 finite-difference gradient checks", Duration::from_secs(120), || {
        let mut worst_overall: f64 = 0.0;
        let cases = primitive_cases();
        for (ci, (name, gen)) in cases.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for trial in 0..GRAD_TRIALS {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * ci as u64 + trial as u64);
                let case = gen(&mut rng);
                worst = worst.max(check_case(&case, &mut rng));
            }
            ensure(worst < GRAD_TOL, || format!("{name}: rel err {worst:.3e}"))?;
            worst_overall = worst_overall.max(worst);
        }
        let mut worst_graph: f64 = 0.0;
        for trial in 0..GRAD_TRIALS as u64 {
            let err = composed_trial(trial);
            ensure(err < GRAD_TOL, || format!("composed graph trial {trial}: rel err {err:.3e}"))?;
            worst_graph = worst_graph.max(err);
        }
        Ok(format!(
            "{} primitives x {GRAD_TRIALS} trials, worst rel err {worst_overall:.2e}; composed graph worst {worst_graph:.2e}",
            cases.len()
        ))
    });
}

// ---------------------------------------------------------------------------
// 2. LSTM / GRU straight-line oracle
// ---------------------------------------------------------------------------

struct Cell {
    h: usize,
    w: Vec<f64>,
    u: Vec<f64>,
    b: Vec<f64>,
}

impl Cell {
    /// `x·W[:, col] + b[col]`, accumulated from zero in index order.
    fn input(&self, col: usize, x: &[f64]) -> f64 {
        let g = self.b.len();
        let mut xw = 0.0;
        for (k, xk) in x.iter().enumerate() {
            xw += xk * self.w[k * g + col];
        }
        xw + self.b[col]
    }

    /// `v·U[:, col]`, accumulated from zero in index order.
    fn recurrent(&self, col: usize, v: &[f64]) -> f64 {
        let g = self.b.len();
        let mut rec = 0.0;
        for (k, vk) in v.iter().enumerate() {
            rec += vk * self.u[k * g + col];
        }
        rec
    }

    fn pre(&self, gate: usize, j: usize, x: &[f64], hv: &[f64]) -> f64 {
        let col = gate * self.h + j;
        self.input(col, x) + self.recurrent(col, hv)
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lstm_oracle(cell: &Cell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h_new = vec![0.0; cell.h];
    let mut c_new = vec![0.0; cell.h];
    for j in 0..cell.h {
        let f = sig(cell.pre(0, j, x, h));
        let i = sig(cell.pre(1, j, x, h));
        let o = sig(cell.pre(2, j, x, h));
        let cand = cell.pre(3, j, x, h).tanh();
        c_new[j] = f * c[j] + i * cand;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

fn gru_oracle(cell: &Cell, x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = cell.h;
    let z: Vec<f64> = (0..n).map(|j| sig(cell.pre(0, j, x, h))).collect();
    let r: Vec<f64> = (0..n).map(|j| sig(cell.pre(1, j, x, h))).collect();
    let rh: Vec<f64> = (0..n).map(|j| r[j] * h[j]).collect();
    (0..n)
        .map(|j| {
            let col = 2 * n + j;
            let cand = (cell.input(col, x) + cell.recurrent(col, &rh)).tanh();
            (1.0 - z[j]) * h[j] + z[j] * cand
        })
        .collect()
}

fn recurrent_case(rng: &mut ChaCha8Rng, kind: CellKind) -> (Cell, ParamStore<f64>, RecurrentParams) {
    let d = rng.gen_range(1..=5);
    let h = rng.gen_range(1..=5);
    let g = kind.gates() * h;
    let cell = Cell {
        h,
        w: uniform_vec(rng, d * g, 1.5),
        u: uniform_vec(rng, h * g, 1.5),
        b: uniform_vec(rng, g, 1.0),
    };
    let mut store = ParamStore::<f64>::new();
    let params = RecurrentParams::new(&mut store, "cell", kind, d, h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    store.get_mut(params.w).data_mut().copy_from_slice(&cell.w);
    store.get_mut(params.u).data_mut().copy_from_slice(&cell.u);
    store.get_mut(params.b).data_mut().copy_from_slice(&cell.b);
    (cell, store, params)
}

#[test]
fn criterion_02_recurrent_oracle() {
    criterion(2, "LSTM/GRU straight-line fp64 oracle", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..1000 {
            for kind in [CellKind::Lstm, CellKind::Gru] {
                let (cell, store, params) = recurrent_case(&mut rng, kind);
                let x = uniform_vec(&mut rng, cell.w.len() / cell.b.len(), 2.0);
                let h = uniform_vec(&mut rng, cell.h, 1.0);
                let c = uniform_vec(&mut rng, cell.h, 2.0);
                let mut tape = Tape::<f64>::new();
                let bound = params.bind(&mut tape, &store).unwrap();
                let xv = tape.constant(vec![1, cell.w.len() / cell.b.len()], x.clone()).unwrap();
                let hv = tape.constant(vec![1, cell.h], h.clone()).unwrap();
                match kind {
                    CellKind::Lstm => {
                        let cv = tape.constant(vec![1, cell.h], c.clone()).unwrap();
                        let st = lstm_step(&mut tape, xv, CellState { h: hv, c: Some(cv) }, &bound).unwrap();
                        let (h_ref, c_ref) = lstm_oracle(&cell, &x, &h, &c);
                        ensure(bits64(tape.value(st.h)) == bits64(&h_ref), || format!("lstm h differs at case {case}"))?;
                        ensure(bits64(tape.value(st.c.unwrap())) == bits64(&c_ref), || {
                            format!("lstm c differs at case {case}")
                        })?;
                    }
                    CellKind::Gru => {
                        let out = gru_step(&mut tape, xv, hv, &bound).unwrap();
                        let h_ref = gru_oracle(&cell, &x, &h);
                        ensure(bits64(tape.value(out)) == bits64(&h_ref), || format!("gru h differs at case {case}"))?;
                    }
                }
            }
        }
        Ok("1000 cases per cell, bit-exact".into())
    });
}

// ---------------------------------------------------------------------------
// 3. Mask equivalence
// ---------------------------------------------------------------------------

fn rows_of(tape: &Tape<f64>, v: Var, rows: usize) -> Vec<f64> {
    let cols = tape.shape(v)[1];
    tape.value(v)[..rows * cols].to_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_03_mask_equivalence() {
    criterion(3, "padding invariance of recurrent layer and encoder", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        let vocab_size = 12;
        for trial in 0..200 {
            let len = rng.gen_range(1..=20);
            let pad = rng.gen_range(1..=10);
            for kind in [CellKind::Lstm, CellKind::Gru] {
                let d = 6;
                let mut store = ParamStore::<f64>::new();
                let mut init = ChaCha8Rng::seed_from_u64(trial);
                let fwd = RecurrentParams::new(&mut store, "f", kind, d, 5, &mut init).unwrap();
                let bwd = RecurrentParams::new(&mut store, "b", kind, d, 5, &mut init).unwrap();
                let real = uniform_vec(&mut rng, len * d, 1.0);
                let garbage = uniform_vec(&mut rng, pad * d, 5.0);
                let run = |data: Vec<f64>, mask: Vec<bool>| {
                    let mut tape = Tape::<f64>::new();
                    let x = tape.constant(vec![mask.len(), d], data).unwrap();
                    let f = fwd.bind(&mut tape, &store).unwrap();
                    let b = bwd.bind(&mut tape, &store).unwrap();
                    let out = bidirectional_encode(&mut tape, x, &mask, &f, &b).unwrap();
                    rows_of(&tape, out, len)
                };
                let plain = run(real.clone(), vec![true; len]);
                let mut mask = vec![true; len];
                mask.extend(vec![false; pad]);
                let padded = run([real.clone(), garbage].concat(), mask);
                worst = worst.max(max_abs_diff(&plain, &padded));
            }

            let cfg = EncoderConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                max_len: 32,
                vocab_size,
                dropout: 0.1,
            };
            let mut store = ParamStore::<f64>::new();
            let encoder = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
            let input = TokenizedInput {
                id: "m".into(),
                token_ids: (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect(),
                segment_ids: (0..len).map(|_| rng.gen_range(0..2)).collect(),
                attention_mask: vec![true; len],
                text_span: (0, 0),
                gold: None,
                text: vec!['x'],
            };
            let encode = |inp: &TokenizedInput| {
                let mut tape = Tape::<f64>::new();
                let out = encoder.encode(&mut tape, &store, inp, &mut Mode::Eval).unwrap();
                rows_of(&tape, out.hidden, len)
            };
            worst = worst.max(max_abs_diff(&encode(&input), &encode(&input.padded(len + pad))));
        }
        ensure(worst <= 1e-6, || format!("max deviation {worst:.3e}"))?;
        Ok(format!("200 random lengths 1..=20, both cells, max deviation {worst:.1e}"))
    });
}

// ---------------------------------------------------------------------------
// 4. Decode oracle
// ---------------------------------------------------------------------------

fn oracle_log_softmax(x: &[f64], valid: &[bool]) -> Vec<f64> {
    let live: Vec<f64> = x.iter().zip(valid).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + live.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Every valid pair, best first (score, then start, then end).
fn oracle_pairs(logits: &SpanLogits, max_span: usize) -> Vec<(f64, usize, usize)> {
    let lps = oracle_log_softmax(&logits.start_logits, &logits.valid);
    let lpe = oracle_log_softmax(&logits.end_logits, &logits.valid);
    let n = logits.valid.len();
    let mut pairs = Vec::new();
    for s in 0..n {
        for e in 0..n {
            if logits.valid[s] && logits.valid[e] && s <= e && e - s < max_span {
                pairs.push((lps[s] + lpe[e], s, e));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

#[test]
fn criterion_04_decode_oracle() {
    criterion(4, "span decoding vs exhaustive enumeration", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let alphabet: Vec<char> = "甲乙丙丁戊己".chars().collect();
        for case in 0..500 {
            let seq_len = rng.gen_range(4..=20);
            let n_text = rng.gen_range(1..=seq_len - 3);
            let text: Vec<char> = (0..n_text).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            let mut valid = vec![false; seq_len];
            for v in &mut valid[1..=n_text] {
                *v = true;
            }
            // Integer logits half the time, to exercise tie-breaking.
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                if case % 2 == 0 {
                    (0..seq_len).map(|_| rng.gen_range(-2..=2) as f64).collect()
                } else {
                    uniform_vec(rng, seq_len, 4.0)
                }
            };
            let logits = SpanLogits {
                start_logits: draw(&mut rng),
                end_logits: draw(&mut rng),
                valid,
            };
            let max_span = rng.gen_range(1..=8);
            let pairs = oracle_pairs(&logits, max_span);
            let top = decode_top1(&logits, &text, (1, n_text), max_span).unwrap();
            let (score, s, e) = pairs[0];
            ensure((top.start, top.end) == (s, e) && top.score.to_bits() == score.to_bits(), || {
                format!("case {case}: top1 ({},{}) vs oracle ({s},{e})", top.start, top.end)
            })?;

            let span_text = |s: usize, e: usize| -> String { text[s - 1..e].iter().collect() };
            let mut distinct: Vec<(String, f64, usize, usize)> = Vec::new();
            for &(sc, s, e) in &pairs {
                let t = span_text(s, e);
                if !distinct.iter().any(|d| d.0 == t) {
                    distinct.push((t, sc, s, e));
                }
            }
            let mut previous: Vec<String> = Vec::new();
            for k in 1..=6 {
                let cfg = RecallConfig {
                    k,
                    max_span_len: max_span,
                    ..Default::default()
                };
                let list = decode_multichannel(&logits, &text, (1, n_text), &cfg).unwrap();
                let texts: Vec<String> = list.iter().map(|c| c.entity_text.clone()).collect();
                ensure(list[0] == top, || format!("case {case} k={k}: first candidate is not top-1"))?;
                ensure(list.len() <= k, || format!("case {case} k={k}: {} candidates", list.len()))?;
                let mut dedup = texts.clone();
                dedup.sort();
                dedup.dedup();
                ensure(dedup.len() == texts.len(), || format!("case {case} k={k}: duplicate texts {texts:?}"))?;
                ensure(list.windows(2).all(|w| w[0].score >= w[1].score), || {
                    format!("case {case} k={k}: not sorted")
                })?;
                ensure(texts.starts_with(&previous), || {
                    format!("case {case} k={k}: {texts:?} does not extend {previous:?}")
                })?;
                for c in &list {
                    ensure(
                        c.start <= c.end && c.end - c.start < max_span && c.entity_text == span_text(c.start, c.end),
                        || format!("case {case}: invalid candidate {c:?}"),
                    )?;
                }
                let expected: Vec<String> = distinct.iter().take(k).map(|d| d.0.clone()).collect();
                ensure(texts == expected, || format!("case {case} k={k}: {texts:?} vs oracle {expected:?}"))?;
                previous = texts;
            }
        }
        Ok("500 logit sets; top-1 exact; multichannel prefix/dedup/sorted".into())
    });
}

// ---------------------------------------------------------------------------
// Shared training setup for 5-7
// ---------------------------------------------------------------------------

const MAX_LEN: usize = 140;

fn tiny_config(variant: ModelVariant, vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        encoder: EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            max_len: MAX_LEN,
            vocab_size,
            dropout: 0.1,
        },
        sequence: SequenceConfig {
            cell: CellKind::Gru,
            hidden: 16,
        },
        recall: RecallConfig::default(),
        seed,
    }
}

fn train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        optimizer: OptimizerConfig::default(),
        ..Default::default()
    }
}

fn train_variant(
    variant: ModelVariant,
    train: &[RawExample],
    vocab: &sebertnets::data::Vocabulary,
    seed: u64,
    epochs: usize,
) -> (Model, ParamStore<f32>) {
    let (items, skipped) = encode_training(train, vocab, MAX_LEN).unwrap();
    assert_eq!(skipped, 0);
    let (model, mut store) = Model::init::<f32>(tiny_config(variant, vocab.len(), seed)).unwrap();
    fit(&model, &mut store, &items, None, &train_config(seed, epochs), None, |_, _, _| true).unwrap();
    (model, store)
}

fn fmt_f1(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

// ---------------------------------------------------------------------------
// 5. Overfit
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_overfit() {
    criterion(5, "tiny SEBERTNets overfits 64 examples", Duration::from_secs(300), || {
        let seed = 5;
        let corpus = generate_synthetic(
            &SynthConfig {
                n_examples: 64,
                ..Default::default()
            },
            seed,
        );
        let vocab = build_vocab(&corpus);
        let (items, _) = encode_training(&corpus, &vocab, MAX_LEN).unwrap();
        let train_set = EvalSet::new(&corpus, &vocab, MAX_LEN).unwrap();
        let (model, mut store) = Model::init::<f32>(tiny_config(ModelVariant::Sebertnets, vocab.len(), seed)).unwrap();
        let mut cfg = train_config(seed, 300);
        cfg.top_k = 1;
        let out = fit(&model, &mut store, &items, Some(&train_set), &cfg, None, |log, _, _| {
            log.dev_f1.as_ref().is_none_or(|f| f[0] < 1.0)
        })
        .map_err(|e| e.to_string())?;
        let last = out.logs.last().unwrap();
        let f = last.dev_f1.as_ref().unwrap()[0];
        ensure(f == 1.0, || format!("train F1@1 {f:.4} after {} epochs", last.epoch))?;
        Ok(format!("train F1@1 = 1.0 at epoch {} (loss {:.4})", last.epoch, last.loss))
    });
}

// ---------------------------------------------------------------------------
// 6. Directional ordering
// ---------------------------------------------------------------------------

const ORDER_EPOCHS: usize = 6;

#[test]
fn criterion_06_directional_ordering() {
    criterion(6, "BERT <= SEBERTNets on dev F1@1, F1@k monotone", Duration::from_secs(1200), || {
        let mut wins = 0;
        let mut notes = Vec::new();
        for seed in [11u64, 12, 13] {
            let corpus = generate_synthetic(
                &SynthConfig {
                    n_examples: 2000,
                    ..Default::default()
                },
                seed,
            );
            let (train, dev) = corpus.split_at(1500);
            let vocab = build_vocab(train);
            let dev_set = EvalSet::new(dev, &vocab, MAX_LEN).unwrap();
            let (bert, bert_store) = train_variant(ModelVariant::BertBaseline, train, &vocab, seed, ORDER_EPOCHS);
            let (se, se_store) = train_variant(ModelVariant::Sebertnets, train, &vocab, seed, ORDER_EPOCHS);
            let hse = se.with_variant(ModelVariant::Hsebertnets).unwrap();
            let mut f1s = Vec::new();
            for (name, model, store) in [("bert", &bert, &bert_store), ("se", &se, &se_store), ("hse", &hse, &se_store)] {
                let report = evaluate_model(model, store, &dev_set, 5, Default::default()).map_err(|e| e.to_string())?;
                let v: Vec<f64> = report.top_k.iter().map(|s| s.f1).collect();
                ensure(monotone(&v), || format!("seed {seed} {name}: F1@k not monotone {v:?}"))?;
                f1s.push((name, v));
            }
            if f1s[0].1[0] <= f1s[1].1[0] {
                wins += 1;
            }
            notes.push(format!(
                "seed {seed}: bert {} se {} hse {}",
                fmt_f1(&f1s[0].1),
                fmt_f1(&f1s[1].1),
                fmt_f1(&f1s[2].1)
            ));
        }
        ensure(wins >= 2, || format!("ordering held on {wins}/3 seeds; {}", notes.join("; ")))?;
        Ok(format!("ordering held on {wins}/3 seeds; {}", notes.join("; ")))
    });
}

// ---------------------------------------------------------------------------
// 7. Multi-entity recall
// ---------------------------------------------------------------------------

const RECALL_EPOCHS: usize = 4;

#[test]
fn criterion_07_multi_entity_recall() {
    criterion(7, "HSEBERTNets F1@3 > repeated SEBERTNets top-1", Duration::from_secs(1200), || {
        let mut notes = Vec::new();
        for seed in [21u64, 22, 23] {
            let corpus = generate_synthetic(
                &SynthConfig {
                    n_examples: 2000,
                    multi_entity_fraction: 0.5,
                    ..Default::default()
                },
                seed,
            );
            let (train, dev) = corpus.split_at(1500);
            let vocab = build_vocab(train);
            let dev_set = EvalSet::new(dev, &vocab, MAX_LEN).unwrap();
            let (se, store) = train_variant(ModelVariant::Sebertnets, train, &vocab, seed, RECALL_EPOCHS);
            let top1 = predict_all(&se, &store, &dev_set.inputs).map_err(|e| e.to_string())?;
            let repeated: HashMap<String, Vec<String>> = top1
                .into_iter()
                .map(|(id, c)| (id, vec![c[0].entity_text.clone(); 3]))
                .collect();
            let se_f1 = evaluate(&repeated, &dev_set.gold, 3).map_err(|e| e.to_string())?.f1_at(3);
            let hse = se.with_variant(ModelVariant::Hsebertnets).unwrap();
            let hse_f1 = evaluate_model(&hse, &store, &dev_set, 3, Default::default())
                .map_err(|e| e.to_string())?
                .f1_at(3);
            notes.push(format!("seed {seed}: hse {hse_f1:.3} vs se {se_f1:.3}"));
            ensure(hse_f1 > se_f1, || notes.join("; "))?;
        }
        Ok(notes.join("; "))
    });
}

// ---------------------------------------------------------------------------
// 8. SWATS contract
// ---------------------------------------------------------------------------

const QUAD_DIM: usize = 10;

fn quad_grad(theta: &[f64]) -> Vec<f64> {
    theta.iter().enumerate().map(|(i, t)| (i + 1) as f64 * t).collect()
}

#[test]
fn criterion_08_swats_contract() {
    criterion(8, "SWATS switch on a 10-d quadratic", Duration::from_secs(5), || {
        let adam_cfg = AdamConfig {
            lr: 3e-5,
            ..Default::default()
        };
        let theta0: Vec<f64> = (0..QUAD_DIM).map(|i| 1.0 - 0.05 * i as f64).collect();
        let mut theta = theta0.clone();
        let mut st = SwatsState::new(AdamState::new(adam_cfg, &[QUAD_DIM]), DEFAULT_EPS_SWITCH);
        let mut adam_theta = theta0;
        let mut adam = AdamState::new(adam_cfg, &[QUAD_DIM]);
        let mut switched_at = None;
        let total = 5000;
        for step in 1..=total {
            let g = quad_grad(&theta);
            let before = st.phase;
            if before == Phase::Adam {
                let ga = quad_grad(&adam_theta);
                adam_step(&mut [adam_theta.as_mut_slice()], &[&ga], &mut adam).unwrap();
                swats_step(&mut [theta.as_mut_slice()], &[&g], &mut st).unwrap();
                ensure(bits64(&theta) == bits64(&adam_theta), || format!("step {step}: diverged from Adam"))?;
                if st.phase == Phase::Sgd {
                    switched_at = Some(step);
                }
            } else {
                let lr = st.sgd_lr.ok_or("SGD phase without a rate")?;
                let mut expected = theta.clone();
                sgd_step(&mut [expected.as_mut_slice()], &[&g], lr).unwrap();
                swats_step(&mut [theta.as_mut_slice()], &[&g], &mut st).unwrap();
                ensure(bits64(&theta) == bits64(&expected), || format!("step {step}: diverged from SGD"))?;
                ensure(st.phase == Phase::Sgd, || format!("step {step}: phase reverted"))?;
            }
        }
        let k = switched_at.ok_or_else(|| format!("no switch within {total} steps"))?;
        let lambda = st.sgd_lr.unwrap();
        ensure(lambda > 0.0 && lambda.is_finite(), || format!("bad rate {lambda}"))?;
        Ok(format!("switch at k={k}, rate {lambda:.6e}; {total} steps bit-exact, no reversion"))
    });
}

// ---------------------------------------------------------------------------
// 9. Eval oracle
// ---------------------------------------------------------------------------

fn brute_force(preds: &HashMap<String, Vec<String>>, gold: &HashMap<String, Vec<String>>, k: usize) -> (f64, f64, f64) {
    let norm = |s: &String| clean_text(s).unwrap_or_default();
    let mut correct = 0usize;
    let mut identified = 0usize;
    for (id, p) in preds {
        if !p.is_empty() {
            identified += 1;
        }
        let top: Vec<String> = p.iter().take(k).map(norm).collect();
        if gold[id].iter().map(norm).any(|g| top.contains(&g)) {
            correct += 1;
        }
    }
    let annotated = gold.values().filter(|g| !g.is_empty()).count();
    let p = if identified == 0 { 0.0 } else { correct as f64 / identified as f64 };
    let r = if annotated == 0 { 0.0 } else { correct as f64 / annotated as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[test]
fn criterion_09_eval_oracle() {
    criterion(9, "evaluation vs brute-force counter", Duration::from_secs(5), || {
        ensure(f1(0.5, 1.0) == 2.0 / 3.0, || format!("f1(0.5,1) = {}", f1(0.5, 1.0)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = ["甲公司", "乙集团", " 丙科技", "丁\u{200b}银行", "丁银行", "戊", "己 控股"];
        for set in 0..200 {
            let n = rng.gen_range(1..=30);
            let mut preds = HashMap::new();
            let mut gold = HashMap::new();
            for i in 0..n {
                let id = format!("e{i}");
                let g: Vec<String> = (0..rng.gen_range(0..=3)).map(|_| pool[rng.gen_range(0..pool.len())].to_string()).collect();
                gold.insert(id.clone(), g);
                if rng.gen_bool(0.9) {
                    let p: Vec<String> =
                        (0..rng.gen_range(0..=6)).map(|_| pool[rng.gen_range(0..pool.len())].to_string()).collect();
                    preds.insert(id, p);
                }
            }
            let report = evaluate(&preds, &gold, 5).map_err(|e| e.to_string())?;
            for s in &report.top_k {
                let (p, r, f) = brute_force(&preds, &gold, s.k);
                ensure(s.precision == p && s.recall == r && s.f1 == f, || {
                    format!("set {set} k={}: ({}, {}, {}) vs oracle ({p}, {r}, {f})", s.k, s.precision, s.recall, s.f1)
                })?;
            }
        }
        Ok("200 random sets match; f1(0.5,1) = 2/3".into())
    });
}

// ---------------------------------------------------------------------------
// 10. Persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_persistence() {
    criterion(10, "checkpoint round trip and header integrity", Duration::from_secs(10), || {
        let seed = 10;
        let corpus = generate_synthetic(
            &SynthConfig {
                n_examples: 24,
                ..Default::default()
            },
            seed,
        );
        let vocab = build_vocab(&corpus);
        let (items, _) = encode_training(&corpus, &vocab, MAX_LEN).unwrap();
        let (model, mut store) = Model::init::<f32>(tiny_config(ModelVariant::Sebertnets, vocab.len(), seed)).unwrap();
        let out = fit(&model, &mut store, &items, None, &train_config(seed, 1), None, |_, _, _| true)
            .map_err(|e| e.to_string())?;
        let ck = ModelCheckpoint {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: store.clone(),
            training: TrainingMeta {
                step: out.steps,
                epoch: 1,
                seed,
            },
            optimizer: Some(out.optimizer.clone()),
        };
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("model.sebn");
        ck.save(&path).map_err(|e| e.to_string())?;
        let loaded = ModelCheckpoint::load(&path).map_err(|e| e.to_string())?;
        let reloaded = loaded.model().map_err(|e| e.to_string())?;
        ensure(loaded.optimizer.as_ref() == Some(&out.optimizer), || "optimizer state changed".into())?;
        for input in EvalSet::new(&corpus, &vocab, MAX_LEN).unwrap().inputs {
            let forward = |m: &Model, s: &ParamStore<f32>| {
                let mut tape = Tape::<f32>::new();
                let f = m.forward(&mut tape, s, &input, &mut Mode::Eval).unwrap();
                bits32(tape.value(f.logits))
            };
            ensure(forward(&model, &store) == forward(&reloaded, &loaded.params), || {
                format!("forward differs on {}", input.id)
            })?;
        }

        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let header_len = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for i in 0..header_len {
            let mut bad = bytes.clone();
            bad[i] = bad[i].wrapping_add(1 + (i % 255) as u8);
            ensure(ModelCheckpoint::from_bytes(&bad).is_err(), || format!("corrupted header byte {i} accepted"))?;
        }
        Ok(format!("forward bit-identical on {} inputs; all {header_len} header bytes protected", corpus.len()))
    });
}
