//! Softmax-weighted fusion of per-frame stream features.

use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Tape, Var};

pub const OMEGA: &str = "fusion.omega";

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub omega: Vec<f64>,
    /// Reinforcement factor scaling `omega` before the softmax.
    pub lambda: f64,
}

impl FusionParams {
    /// Zero-initialised weights for `m` streams.
    pub fn new(m: usize, lambda: f64) -> Self {
        Self {
            omega: vec![0.0; m],
            lambda,
        }
    }
}

/// `α_m = exp(λ ω_m) / Σ_n exp(λ ω_n)`, evaluated with max subtraction.
pub fn fusion_weights(fp: &FusionParams) -> Result<Vec<f64>> {
    if !(fp.lambda > 0.0 && fp.lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be positive, got {}", fp.lambda)));
    }
    if fp.omega.is_empty() || fp.omega.iter().any(|w| !w.is_finite()) {
        return Err(Error::Parameter(format!("omega must be finite, got {:?}", fp.omega)));
    }
    let mut alpha: Vec<f64> = fp.omega.iter().map(|w| fp.lambda * w).collect();
    softmax_in_place(&mut alpha);
    Ok(alpha)
}

/// Differentiable `α = softmax(λ ω)` on the tape.
pub fn fusion_weights_on_tape(tape: &mut Tape, omega: Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    let scaled = tape.scale(omega, lambda);
    Ok(tape.softmax(scaled))
}

/// `Σ_m α_m x_m` for equally shaped feature sequences.
pub fn fuse(tape: &mut Tape, features: &[Var], alpha: Var) -> Result<Var> {
    if features.is_empty() || tape.value(alpha).numel() != features.len() {
        return Err(Error::dim(
            "fuse",
            tape.value(alpha).shape(),
            &[features.len()],
        ));
    }
    let shape = tape.value(features[0]).shape().to_vec();
    let mut acc: Option<Var> = None;
    for (m, &f) in features.iter().enumerate() {
        if tape.value(f).shape() != shape.as_slice() {
            return Err(Error::dim("fuse", &shape, tape.value(f).shape()));
        }
        let a = tape.select(alpha, m)?;
        let term = tape.mul(a, f)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.unwrap())
}
