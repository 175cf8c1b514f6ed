//! Adam, plain SGD, and SWATS (start with Adam, switch to SGD once).
//!
//! All three operate on a list of parameter slices and matching gradient
//! slices, flattened in parameter-store order. SWATS projects the Adam step
//! onto the gradient once per step over *all* parameters:
//!
//! ```text
//! p   = Adam step (the full parameter delta)
//! γ   = −(pᵀp)/(pᵀg)                       (skipped when pᵀg = 0)
//! λ   ← β₂ λ + (1 − β₂) γ
//! switch when k > 1 and |λ/(1 − β₂ᵏ) − γ| < ε_switch, with Λ = λ/(1 − β₂ᵏ)
//! ```
//!
//! After the switch every step is `θ ← θ − Λ g`; the phase never goes back.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `sizes`.
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_store(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
        Self::new(cfg, &sizes)
    }

    /// Advances the moments by one step and returns the parameter delta
    /// `−α m̂ / (√v̂ + ε)`.
    fn advance(&mut self, grads: &[&[T]]) -> Result<Vec<Vec<T>>> {
        check_grads(grads, &self.m, self.step + 1)?;
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let one = T::one();
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let mut deltas = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            let mut d = Vec::with_capacity(g.len());
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                d.push(-(lr * m_hat / (v_hat.sqrt() + eps)));
            }
            deltas.push(d);
        }
        Ok(deltas)
    }
}

fn check_grads<T: Scalar>(grads: &[&[T]], like: &[Vec<T>], step: u64) -> Result<()> {
    if grads.len() != like.len() || grads.iter().zip(like).any(|(g, l)| g.len() != l.len()) {
        return Err(shape_err(
            "optimizer",
            &grads.iter().map(|g| g.len()).collect::<Vec<_>>(),
            &like.iter().map(Vec::len).collect::<Vec<_>>(),
        ));
    }
    check_finite(grads, step)
}

fn check_finite<T: Scalar>(grads: &[&[T]], step: u64) -> Result<()> {
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            step,
            msg: "non-finite gradient".into(),
        });
    }
    Ok(())
}

fn apply<T: Scalar>(params: &mut [&mut [T]], deltas: &[Vec<T>]) {
    for (p, d) in params.iter_mut().zip(deltas) {
        for (x, &dx) in p.iter_mut().zip(d) {
            *x = *x + dx;
        }
    }
}

fn check_params<T: Scalar>(params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(shape_err(
            "optimizer params",
            &params.iter().map(|p| p.len()).collect::<Vec<_>>(),
            &grads.iter().map(|g| g.len()).collect::<Vec<_>>(),
        ));
    }
    Ok(())
}

/// `m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²; θ ← θ − α m̂/(√v̂ + ε)`.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], st: &mut AdamState<T>) -> Result<()> {
    check_params(params, grads)?;
    let deltas = st.advance(grads)?;
    apply(params, &deltas);
    Ok(())
}

/// `θ ← θ − lr·g`, no momentum.
pub fn sgd_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], lr: T) -> Result<()> {
    check_params(params, grads)?;
    check_finite(grads, 0)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.iter_mut().zip(g.iter()) {
            *x = *x - lr * gi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwatsState<T> {
    pub phase: Phase,
    pub adam: AdamState<T>,
    /// Exponential average of the projected step sizes γ.
    pub lambda: T,
    /// Frozen SGD learning rate; `Some` iff `phase == Sgd`.
    pub sgd_lr: Option<T>,
    pub eps_switch: f64,
    /// Step at which the switch happened.
    pub switch_step: Option<u64>,
    /// Number of λ updates performed.
    pub lambda_updates: u64,
}

pub const DEFAULT_EPS_SWITCH: f64 = 1e-9;

impl<T: Scalar> SwatsState<T> {
    pub fn new(adam: AdamState<T>, eps_switch: f64) -> Self {
        Self {
            phase: Phase::Adam,
            adam,
            lambda: T::zero(),
            sgd_lr: None,
            eps_switch,
            switch_step: None,
            lambda_updates: 0,
        }
    }

    /// Bias-corrected λ estimate, once at least one update has happened.
    pub fn lambda_hat(&self) -> Option<T> {
        (self.lambda_updates > 0).then(|| {
            let bc = T::one() - T::lit(self.adam.cfg.beta2).powi(self.adam.step as i32);
            self.lambda / bc
        })
    }
}

pub fn swats_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], st: &mut SwatsState<T>) -> Result<()> {
    check_params(params, grads)?;
    match st.phase {
        Phase::Sgd => {
            let lr = st
                .sgd_lr
                .ok_or_else(|| Error::Contract("SGD phase without a learning rate".into()))?;
            sgd_step(params, grads, lr)
        }
        Phase::Adam => {
            let deltas = st.adam.advance(grads)?;
            let mut pp = T::zero();
            let mut pg = T::zero();
            for (d, g) in deltas.iter().zip(grads) {
                for (&di, &gi) in d.iter().zip(g.iter()) {
                    pp = pp + di * di;
                    pg = pg + di * gi;
                }
            }
            if pg != T::zero() {
                let gamma = -(pp / pg);
                let b2 = T::lit(st.adam.cfg.beta2);
                st.lambda = b2 * st.lambda + (T::one() - b2) * gamma;
                st.lambda_updates += 1;
                let k = st.adam.step;
                let corrected = st.lambda / (T::one() - b2.powi(k as i32));
                if k > 1 && (corrected - gamma).abs() < T::lit(st.eps_switch) {
                    st.phase = Phase::Sgd;
                    st.sgd_lr = Some(corrected);
                    st.switch_step = Some(k);
                }
            }
            apply(params, &deltas);
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Swats,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            "swats" => Ok(Self::Swats),
            other => Err(Error::Contract(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    /// Learning rate of the plain SGD optimizer.
    pub sgd_lr: f64,
    pub eps_switch: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Swats,
            adam: AdamConfig::default(),
            sgd_lr: 0.1,
            eps_switch: DEFAULT_EPS_SWITCH,
        }
    }
}

/// Optimizer state for a whole parameter store.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Adam(AdamState<T>),
    Sgd { lr: T },
    Swats(SwatsState<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore<T>) -> Self {
        match cfg.kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::for_store(cfg.adam, store)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: T::lit(cfg.sgd_lr) },
            OptimizerKind::Swats => {
                Optimizer::Swats(SwatsState::new(AdamState::for_store(cfg.adam, store), cfg.eps_switch))
            }
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            Optimizer::Adam(_) => Phase::Adam,
            Optimizer::Sgd { .. } => Phase::Sgd,
            Optimizer::Swats(s) => s.phase,
        }
    }

    /// Applies one update using the gradients held by the store.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let grads_owned = store.grads();
        let grads: Vec<&[T]> = grads_owned.0.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [T]> = store.tensors_mut().map(|t| t.data_mut()).collect();
        match self {
            Optimizer::Adam(st) => adam_step(&mut params, &grads, st),
            Optimizer::Sgd { lr } => sgd_step(&mut params, &grads, *lr),
            Optimizer::Swats(st) => swats_step(&mut params, &grads, st),
        }
    }
}
