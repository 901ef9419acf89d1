//! Scalar Poisson binomial mechanism.
//!
//! A bounded real `x ∈ [-C, C]` is encoded as a `Binomial(b, 1/2 + βx/C)`
//! sample. Summing the integer encodings of `M` inputs and re-centering gives
//! an unbiased estimate of the real sum whose noise is controlled by `b` and
//! `β`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest admissible privacy scale.
pub const MAX_BETA: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PbmError {
    #[error("invalid mechanism parameters: {0}")]
    InvalidParams(String),
    #[error("input {x} lies outside [-{c}, {c}]")]
    OutOfDomain { x: f64, c: f64 },
    #[error("aggregate {q_hat} outside [0, {max}] for {m} summands")]
    CorruptAggregate { q_hat: u64, m: usize, max: u64 },
    #[error("beta = 0 carries no signal; the sum cannot be estimated")]
    DegenerateBeta,
}

/// Mechanism configuration: trial count `b`, privacy scale `beta` and input bound `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PbmParams {
    pub b: u32,
    pub beta: f64,
    pub c: f64,
}

impl PbmParams {
    pub fn new(b: u32, beta: f64, c: f64) -> Result<Self, PbmError> {
        let params = Self { b, beta, c };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), PbmError> {
        if self.b == 0 {
            return Err(PbmError::InvalidParams("b must be at least 1".into()));
        }
        if !(0.0..=MAX_BETA).contains(&self.beta) {
            return Err(PbmError::InvalidParams(format!(
                "beta = {} is outside [0, 1/4]",
                self.beta
            )));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(PbmError::InvalidParams(format!(
                "c = {} must be positive and finite",
                self.c
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: f64) -> Result<(), PbmError> {
        if x.is_finite() && x.abs() <= self.c {
            Ok(())
        } else {
            Err(PbmError::OutOfDomain { x, c: self.c })
        }
    }
}

/// A single binomial encoding, always in `[0, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantizedValue(u32);

impl QuantizedValue {
    /// Wraps a raw encoding, checking it against the trial count.
    pub fn new(q: u32, b: u32) -> Option<Self> {
        (q <= b).then_some(Self(q))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// Re-centred estimate of a sum of `m` inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumEstimate {
    pub value: f64,
    pub m: usize,
}

/// Success probability `1/2 + (β/C)·x` of each binomial trial.
pub fn success_probability(x: f64, params: &PbmParams) -> Result<f64, PbmError> {
    params.check_input(x)?;
    Ok(0.5 + params.beta / params.c * x)
}

/// Draws `Binomial(b, success_probability(x))` as `b` Bernoulli trials.
pub fn quantize<R: Rng + ?Sized>(x: f64, params: &PbmParams, rng: &mut R) -> Result<QuantizedValue, PbmError> {
    let p = success_probability(x, params)?;
    let q = (0..params.b).filter(|_| rng.random_bool(p)).count() as u32;
    Ok(QuantizedValue(q))
}

/// Quantizes every entry of `xs`, failing on the first out-of-range input.
pub fn quantize_all<R: Rng + ?Sized>(
    xs: &[f64],
    params: &PbmParams,
    rng: &mut R,
) -> Result<Vec<QuantizedValue>, PbmError> {
    xs.iter().map(|&x| quantize(x, params, rng)).collect()
}

/// Unbiased estimate `(C/(βb))·(q̂ − bM/2)` of the sum of `m` inputs whose
/// encodings add up to `q_hat`.
pub fn estimate_sum(q_hat: u64, m: usize, params: &PbmParams) -> Result<SumEstimate, PbmError> {
    let max = u64::from(params.b) * m as u64;
    if m == 0 || q_hat > max {
        return Err(PbmError::CorruptAggregate { q_hat, m, max });
    }
    if params.beta == 0.0 {
        return Err(PbmError::DegenerateBeta);
    }
    let b = f64::from(params.b);
    let centred = q_hat as f64 - b * m as f64 / 2.0;
    Ok(SumEstimate {
        value: params.c / (params.beta * b) * centred,
        m,
    })
}

/// Worst-case estimator variance `C²M/(4β²b)`, attained when every input is zero.
pub fn theoretical_variance(m: usize, params: &PbmParams) -> f64 {
    let b = f64::from(params.b);
    params.c * params.c * m as f64 / (4.0 * params.beta * params.beta * b)
}

/// Exact estimator variance for the given inputs:
/// `C²M/(4β²b) − Σ x²/b`.
pub fn estimator_variance(inputs: &[f64], params: &PbmParams) -> Result<f64, PbmError> {
    let b = f64::from(params.b);
    let scale = params.c / (params.beta * b);
    let mut var = 0.0;
    for &x in inputs {
        let p = success_probability(x, params)?;
        var += b * p * (1.0 - p);
    }
    Ok(scale * scale * var)
}
