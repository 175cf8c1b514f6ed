//! Parameter initialization and the small building blocks shared by the
//! encoder, the recurrent layer and the span head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, rate, *rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("positive shape")
}

pub(crate) fn filled<T: Scalar>(shape: Vec<usize>, value: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![T::lit(value); n]).expect("positive shape")
}

/// Affine map `x W + b` over the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, vec![fan_in, fan_out], bound))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let rows = tape.shape(x)[0];
        let xw = tape.matmul(x, w)?;
        let bb = tape.broadcast_rows(b, rows)?;
        tape.add(xw, bb)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), filled(vec![dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}
