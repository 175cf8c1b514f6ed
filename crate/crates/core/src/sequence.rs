//! Masked bidirectional recurrent layer over encoder outputs.
//!
//! LSTM step:
//!
//! ```text
//! f = σ(W_f l + b_f + U_f h)      i = σ(W_i l + b_i + U_i h)
//! o = σ(W_o l + b_o + U_o h)      c̃ = tanh(W_c l + b_c + U_c h)
//! c' = f ⊙ c + i ⊙ c̃             h' = o ⊙ tanh(c')
//! ```
//!
//! GRU step:
//!
//! ```text
//! z = σ(W_z l + b_z + U_z h)      r = σ(W_r l + b_r + U_r h)
//! ĥ = tanh(W_h l + b_h + U_h (r ⊙ h))
//! h' = (1 − z) ⊙ h + z ⊙ ĥ
//! ```
//!
//! Gate weights are stored fused, gate-major along the columns: `[f|i|o|c]`
//! for the LSTM and `[z|r|h]` for the GRU. The input projection `l W + b` is
//! evaluated before the recurrent term is added.
//!
//! Masked positions freeze the carried state and emit a zero row, which makes
//! the output at real positions identical to running on the unpadded
//! sequence.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::uniform;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Contract(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub cell: CellKind,
    pub hidden: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Gru,
            hidden: 200,
        }
    }
}

/// Stored weights of one recurrent direction.
#[derive(Clone, Debug)]
pub struct RecurrentParams {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden: usize,
    /// `[input_size × gates·hidden]`.
    pub w: ParamId,
    /// `[hidden × gates·hidden]`.
    pub u: ParamId,
    /// `[gates·hidden]`.
    pub b: ParamId,
}

impl RecurrentParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        input_size: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_size == 0 || hidden == 0 {
            return Err(Error::Contract("recurrent sizes must be positive".into()));
        }
        let g = kind.gates() * hidden;
        let w = store.add(
            format!("{name}.w"),
            uniform(rng, vec![input_size, g], 1.0 / (input_size as f64).sqrt()),
        )?;
        let u = store.add(
            format!("{name}.u"),
            uniform(rng, vec![hidden, g], 1.0 / (hidden as f64).sqrt()),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![g]))?;
        Ok(Self {
            kind,
            input_size,
            hidden,
            w,
            u,
            b,
        })
    }

    /// Binds the weights onto `tape`, checking their shapes.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<BoundCell> {
        let g = self.kind.gates() * self.hidden;
        for (id, want) in [
            (self.w, vec![self.input_size, g]),
            (self.u, vec![self.hidden, g]),
            (self.b, vec![g]),
        ] {
            if store.get(id).shape() != want.as_slice() {
                return Err(shape_err("recurrent params", store.get(id).shape(), &want));
            }
        }
        let w = tape.param(store, self.w);
        let u = tape.param(store, self.u);
        let b = tape.param(store, self.b);
        let (u_gates, u_cand) = match self.kind {
            CellKind::Lstm => (u, None),
            CellKind::Gru => {
                let h = self.hidden;
                (tape.slice_cols(u, 0, 2 * h)?, Some(tape.slice_cols(u, 2 * h, h)?))
            }
        };
        Ok(BoundCell {
            kind: self.kind,
            input_size: self.input_size,
            hidden: self.hidden,
            w,
            b,
            u_gates,
            u_cand,
        })
    }
}

/// Recurrent weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden: usize,
    w: Var,
    b: Var,
    /// Full `U` for the LSTM; the `[z|r]` columns for the GRU.
    u_gates: Var,
    /// GRU candidate columns of `U`.
    u_cand: Option<Var>,
}

/// Carried recurrent state; `c` is absent for the GRU.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    pub fn zeros<T: Scalar>(tape: &mut Tape<T>, cell: &BoundCell) -> Self {
        let h = tape.zeros(vec![1, cell.hidden]);
        let c = (cell.kind == CellKind::Lstm).then(|| tape.zeros(vec![1, cell.hidden]));
        Self { h, c }
    }
}

impl BoundCell {
    /// `x W + b` for every row of `x`.
    pub fn project_input<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let xw = tape.matmul(x, self.w)?;
        let bb = tape.broadcast_rows(self.b, rows)?;
        tape.add(xw, bb)
    }

    /// One step given an already projected input row `[1 × gates·hidden]`.
    pub fn step_projected<T: Scalar>(&self, tape: &mut Tape<T>, xp: Var, prev: CellState) -> Result<CellState> {
        let h = self.hidden;
        match self.kind {
            CellKind::Lstm => {
                let c_prev = prev
                    .c
                    .ok_or_else(|| Error::Contract("LSTM step without cell state".into()))?;
                let rec = tape.matmul(prev.h, self.u_gates)?;
                let pre = tape.add(xp, rec)?;
                let f = tape.slice_cols(pre, 0, h)?;
                let f = tape.sigmoid(f);
                let i = tape.slice_cols(pre, h, h)?;
                let i = tape.sigmoid(i);
                let o = tape.slice_cols(pre, 2 * h, h)?;
                let o = tape.sigmoid(o);
                let cand = tape.slice_cols(pre, 3 * h, h)?;
                let cand = tape.tanh(cand);
                let keep = tape.mul(f, c_prev)?;
                let write = tape.mul(i, cand)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c);
                let h_new = tape.mul(o, tc)?;
                Ok(CellState { h: h_new, c: Some(c) })
            }
            CellKind::Gru => {
                let u_cand = self
                    .u_cand
                    .ok_or_else(|| Error::Contract("GRU without candidate weights".into()))?;
                let x_zr = tape.slice_cols(xp, 0, 2 * h)?;
                let x_h = tape.slice_cols(xp, 2 * h, h)?;
                let rec = tape.matmul(prev.h, self.u_gates)?;
                let zr = tape.add(x_zr, rec)?;
                let z = tape.slice_cols(zr, 0, h)?;
                let z = tape.sigmoid(z);
                let r = tape.slice_cols(zr, h, h)?;
                let r = tape.sigmoid(r);
                let rh = tape.mul(r, prev.h)?;
                let rec_h = tape.matmul(rh, u_cand)?;
                let cand = tape.add(x_h, rec_h)?;
                let cand = tape.tanh(cand);
                let ones = tape.constant(vec![1, h], vec![T::one(); h])?;
                let one_minus_z = tape.sub(ones, z)?;
                let carry = tape.mul(one_minus_z, prev.h)?;
                let update = tape.mul(z, cand)?;
                let h_new = tape.add(carry, update)?;
                Ok(CellState { h: h_new, c: None })
            }
        }
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, l: Var) -> Result<()> {
        if tape.shape(l) != [1, self.input_size] {
            return Err(shape_err("recurrent input", tape.shape(l), &[1, self.input_size]));
        }
        Ok(())
    }
}

/// One LSTM step on an input row `l_t` of shape `[1 × input_size]`.
pub fn lstm_step<T: Scalar>(tape: &mut Tape<T>, l_t: Var, prev: CellState, cell: &BoundCell) -> Result<CellState> {
    if cell.kind != CellKind::Lstm {
        return Err(Error::Contract("lstm_step on GRU weights".into()));
    }
    cell.check_input(tape, l_t)?;
    let xp = cell.project_input(tape, l_t)?;
    cell.step_projected(tape, xp, prev)
}

/// One GRU step; returns the new hidden state.
pub fn gru_step<T: Scalar>(tape: &mut Tape<T>, l_t: Var, prev_h: Var, cell: &BoundCell) -> Result<Var> {
    if cell.kind != CellKind::Gru {
        return Err(Error::Contract("gru_step on LSTM weights".into()));
    }
    cell.check_input(tape, l_t)?;
    let xp = cell.project_input(tape, l_t)?;
    Ok(cell.step_projected(tape, xp, CellState { h: prev_h, c: None })?.h)
}

fn run_direction<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &BoundCell,
    projected: Var,
    mask: &[bool],
    order: impl Iterator<Item = usize>,
    zero_row: Var,
) -> Result<Vec<Var>> {
    let mut out = vec![zero_row; mask.len()];
    let mut state = CellState::zeros(tape, cell);
    for t in order {
        if !mask[t] {
            continue;
        }
        let xp = tape.row(projected, t)?;
        state = cell.step_projected(tape, xp, state)?;
        out[t] = state.h;
    }
    Ok(out)
}

/// Runs the forward cell left-to-right and the backward cell right-to-left
/// over the unmasked positions of `seq` (`[seq_len × input_size]`) and
/// returns `[seq_len × 2·hidden]` rows `concat(h_fwd, h_bwd)`.
pub fn bidirectional_encode<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    mask: &[bool],
    fwd: &BoundCell,
    bwd: &BoundCell,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[0] != mask.len() || shape[1] != fwd.input_size || shape[1] != bwd.input_size {
        return Err(shape_err("bidirectional_encode", &shape, &[mask.len(), fwd.input_size]));
    }
    if fwd.kind != bwd.kind || fwd.hidden != bwd.hidden {
        return Err(Error::Contract("forward and backward cells differ".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask);
    }
    let n = mask.len();
    let zero_row = tape.zeros(vec![1, fwd.hidden]);
    let xf = fwd.project_input(tape, seq)?;
    let xb = bwd.project_input(tape, seq)?;
    let rows_f = run_direction(tape, fwd, xf, mask, 0..n, zero_row)?;
    let rows_b = run_direction(tape, bwd, xb, mask, (0..n).rev(), zero_row)?;
    let f = tape.concat(&rows_f, 0)?;
    let b = tape.concat(&rows_b, 0)?;
    tape.concat(&[f, b], 1)
}
