//! Closed-form constants of the spectral gap, correlation decay and finite
//! speed of propagation bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{model_constants, support_distance, ModelSpec, Observable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("gap lower bound {gamma} is not positive; bound not applicable")]
    NonPositiveGap { gamma: f64 },
    #[error("argument {name} must be finite and nonnegative, got {value}")]
    Argument { name: &'static str, value: f64 },
    #[error("observable has empty effective support")]
    EmptySupport,
}

fn check(name: &'static str, value: f64) -> Result<(), BoundsError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(BoundsError::Argument { name, value })
    }
}

/// `R = 0` is evaluated as `R = 1` wherever `1/R` appears.
fn effective_range(r: u64) -> f64 {
    r.max(1) as f64
}

/// `e^{-2βC} - 5 max(1, βλ) (2R)^d (e^{3βC} - 1)`; may be negative.
pub fn gap_lower_bound(c: f64, r: u64, lambda: f64, beta: f64, d: u32) -> Result<f64, BoundsError> {
    check("C", c)?;
    check("lambda", lambda)?;
    check("beta", beta)?;
    let volume = (2.0 * r as f64).powi(d as i32);
    let spread = if volume == 0.0 { 0.0 } else { 5.0 * (beta * lambda).max(1.0) * volume * (3.0 * beta * c).exp_m1() };
    Ok((-2.0 * beta * c).exp() - spread)
}

/// `(2 / (1 - e^{-1/R}))^d`.
fn volume_constant(r: u64, d: u32) -> f64 {
    (2.0 / -(-1.0 / effective_range(r)).exp_m1()).powi(d as i32)
}

/// `10 max(1, λβ) e^{βC+1}`.
fn speed_constant(c: f64, lambda: f64, beta: f64) -> f64 {
    10.0 * (lambda * beta).max(1.0) * (beta * c + 1.0).exp()
}

/// `(N, δ)` with `N = (2/(1 - e^{-1/R}))^d` and
/// `δ = (1/2R) min(1/2, γ / (10 max(1,λβ) e^{βC+1}))`.
pub fn decay_constants(c: f64, r: u64, lambda: f64, beta: f64, d: u32) -> Result<(f64, f64), BoundsError> {
    let gamma = gap_lower_bound(c, r, lambda, beta, d)?;
    if !(gamma > 0.0) {
        return Err(BoundsError::NonPositiveGap { gamma });
    }
    let delta = 0.5 / effective_range(r) * (gamma / speed_constant(c, lambda, beta)).min(0.5);
    Ok((volume_constant(r, d), delta))
}

/// `(N, M, ε)` with `M = 10 max(1,λβ) e^{βC+1}` and `ε = 1/2R`.
pub fn finite_speed_constants(c: f64, r: u64, lambda: f64, beta: f64, d: u32) -> Result<(f64, f64, f64), BoundsError> {
    check("C", c)?;
    check("lambda", lambda)?;
    check("beta", beta)?;
    Ok((volume_constant(r, d), speed_constant(c, lambda, beta), 0.5 / effective_range(r)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "R")]
    pub r: u64,
    pub lambda_max: f64,
    pub beta: f64,
    pub dimension: u32,
    pub gamma: f64,
    /// Absent when `gamma ≤ 0`.
    #[serde(rename = "N_decay")]
    pub n_decay: Option<f64>,
    pub delta: Option<f64>,
    #[serde(rename = "N_fsp")]
    pub n_fsp: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub epsilon: f64,
    pub gap_positive: bool,
    pub spec_hash: String,
}

pub fn bounds_report(spec: &ModelSpec) -> BoundsReport {
    let k = model_constants(spec);
    let d = spec.lattice().dimension() as u32;
    let beta = spec.beta();
    let gamma = gap_lower_bound(k.c, k.r, k.lambda_max, beta, d).expect("validated spec");
    let decay = decay_constants(k.c, k.r, k.lambda_max, beta, d).ok();
    let (n_fsp, m, epsilon) = finite_speed_constants(k.c, k.r, k.lambda_max, beta, d).expect("validated spec");
    BoundsReport {
        c: k.c,
        r: k.r,
        lambda_max: k.lambda_max,
        beta,
        dimension: d,
        gamma,
        n_decay: decay.map(|x| x.0),
        delta: decay.map(|x| x.1),
        n_fsp,
        m,
        epsilon,
        gap_positive: gamma > 0.0,
        spec_hash: spec.spec_hash(),
    }
}

/// `(‖f‖‖g‖ + N |||f||| |||g|||) e^{-δ d(Λ_f, Λ_g)}`.
pub fn decay_bound(spec: &ModelSpec, f: &Observable, g: &Observable) -> Result<f64, BoundsError> {
    let k = model_constants(spec);
    let d = spec.lattice().dimension() as u32;
    let (n, delta) = decay_constants(k.c, k.r, k.lambda_max, spec.beta(), d)?;
    let distance = support_distance(spec.lattice(), &f.effective_support(), &g.effective_support()).ok_or(BoundsError::EmptySupport)?;
    Ok((f.sup_norm() * g.sup_norm() + n * f.triple_norm() * g.triple_norm()) * (-delta * distance as f64).exp())
}
