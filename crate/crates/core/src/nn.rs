//! Activations and dropout, both as plain tensor functions and as tape operations.

use serde::{Deserialize, Serialize};

use crate::autograd::{silu_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

/// Which entries share a dropout decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutStyle {
    /// Every entry is kept or dropped independently.
    #[default]
    Elementwise,
    /// Whole columns (latent dimensions) are dropped for the entire batch.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn identity(x: &Tensor) -> Tensor {
    x.clone()
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted-dropout keep mask: surviving entries hold `1 / (1 − p)`.
fn dropout_mask(rows: usize, cols: usize, p: f64, style: DropoutStyle, rng: &mut RngState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    match style {
        DropoutStyle::Elementwise => (0..rows * cols)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect(),
        DropoutStyle::Channel => {
            let cols_mask: Vec<f64> = (0..cols)
                .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
                .collect();
            (0..rows).flat_map(|_| cols_mask.iter().copied()).collect()
        }
    }
}

/// Inverted dropout on a plain tensor. Identity in eval mode or when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, style: DropoutStyle, rng: &mut RngState) -> Result<Tensor> {
    check_probability(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let (rows, cols) = x.dims2()?;
    let mask = Tensor::new(x.shape().to_vec(), dropout_mask(rows, cols, p, style, rng))?;
    x.hadamard(&mask)
}

/// Tape version of [`dropout`]; the mask is recorded as a constant.
pub fn dropout_on_tape(
    tape: &mut Tape,
    x: Var,
    p: f64,
    mode: Mode,
    style: DropoutStyle,
    rng: &mut RngState,
) -> Result<Var> {
    check_probability(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let (rows, cols) = tape.value(x).dims2()?;
    let mask = tape.constant(Tensor::new(shape, dropout_mask(rows, cols, p, style, rng))?);
    tape.mul(x, mask)
}
