//! Rényi-DP accounting for feature and sample privacy, plus an exact
//! divergence oracle over Poisson binomial sum distributions.
//!
//! The closed-form budgets carry an unspecified universal constant `C0`;
//! every `eps` produced here is a multiple of it (`c0_units = true`).
//! Logarithms are natural.

use serde::Serialize;
use thiserror::Error;

use crate::pbm::{success_probability, PbmError, PbmParams};

/// Largest support handled by [`pbm_sum_distribution`].
pub const MAX_SUPPORT: usize = 10_001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("Rényi order must exceed 1, got {0}")]
    Order(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("beta = {0} outside [0, 1/4]")]
    Beta(f64),
    #[error("sample privacy needs at least 2 parties, got {0}")]
    TooFewParties(usize),
    #[error("distribution support of {0} points exceeds the exact-convolution limit")]
    SupportTooLarge(usize),
    #[error("invalid distribution: {0}")]
    InvalidDist(String),
    #[error(transparent)]
    Pbm(#[from] PbmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Feature,
    Sample,
    PerRoundFeature,
}

/// An `(α, ε)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RdpBudget {
    pub alpha: f64,
    pub eps: f64,
    pub kind: BudgetKind,
    pub c0_units: bool,
}

fn check_alpha(alpha: f64) -> Result<(), PrivacyError> {
    if alpha > 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(PrivacyError::Order(alpha))
    }
}

fn check_beta(beta: f64) -> Result<(), PrivacyError> {
    if (0.0..=0.25).contains(&beta) {
        Ok(())
    } else {
        Err(PrivacyError::Beta(beta))
    }
}

fn positive(v: usize, name: &'static str) -> Result<f64, PrivacyError> {
    if v == 0 {
        Err(PrivacyError::NonPositive(name))
    } else {
        Ok(v as f64)
    }
}

/// Per-round feature budget `P·b·β²·α/M` (one embedding-sum release per sample).
pub fn per_round_feature_budget(
    alpha: f64,
    p_dim: usize,
    b: u32,
    beta: f64,
    m: usize,
) -> Result<RdpBudget, PrivacyError> {
    check_alpha(alpha)?;
    check_beta(beta)?;
    let p = positive(p_dim, "P")?;
    let b = positive(b as usize, "b")?;
    let m = positive(m, "M")?;
    Ok(RdpBudget {
        alpha,
        eps: p * b * beta * beta * alpha / m,
        kind: BudgetKind::PerRoundFeature,
        c0_units: true,
    })
}

/// Final feature budget after `t` iterations: `T·B·P·b·β²·α/(M·N)`.
///
/// Each sample takes part in `T·B/N` iterations in expectation and rounds
/// compose additively.
#[allow(clippy::too_many_arguments)]
pub fn feature_budget(
    alpha: f64,
    t: usize,
    b_batch: usize,
    p_dim: usize,
    b: u32,
    beta: f64,
    m: usize,
    n: usize,
) -> Result<RdpBudget, PrivacyError> {
    check_alpha(alpha)?;
    check_beta(beta)?;
    let batch = positive(b_batch, "B")?;
    let p = positive(p_dim, "P")?;
    let bb = positive(b as usize, "b")?;
    let m = positive(m, "M")?;
    let n = positive(n, "N")?;
    Ok(RdpBudget {
        alpha,
        eps: t as f64 * batch * p * bb * beta * beta * alpha / (m * n),
        kind: BudgetKind::Feature,
        c0_units: true,
    })
}

/// Group factor `S_M(α)` bounding the divergence when all `M` embeddings of
/// one sample change:
///
/// `S_M(α) = (2^{M+1} − 2^{M−1} − 2)α − (3·2^{M−1} − 3M) + (2^{M−1} − 1)/(2^{M−2}(α−1))`
pub fn sample_group_factor(m: usize, alpha: f64) -> Result<f64, PrivacyError> {
    check_alpha(alpha)?;
    if m < 2 {
        return Err(PrivacyError::TooFewParties(m));
    }
    let mf = m as f64;
    let pow = |e: f64| 2f64.powf(e);
    let slope = pow(mf + 1.0) - pow(mf - 1.0) - 2.0;
    let offset = 3.0 * pow(mf - 1.0) - 3.0 * mf;
    let tail = (pow(mf - 1.0) - 1.0) / (pow(mf - 2.0) * (alpha - 1.0));
    Ok(slope * alpha - offset + tail)
}

/// Per-release sample budget `P·b·β²·S_M(α)/M`.
pub fn sample_budget(alpha: f64, p_dim: usize, b: u32, beta: f64, m: usize) -> Result<RdpBudget, PrivacyError> {
    let s = sample_group_factor(m, alpha)?;
    let per_round = per_round_feature_budget(alpha, p_dim, b, beta, m)?;
    Ok(RdpBudget {
        alpha,
        eps: per_round.eps / alpha * s,
        kind: BudgetKind::Sample,
        c0_units: true,
    })
}

/// Bound obtained by chaining the weak triangle inequality for Rényi divergence,
/// `D_α(P‖Q) ≤ (α − 1/2)/(α − 1)·D_{2α}(P‖R) + D_{2α−1}(R‖Q)`,
/// across `steps` single-embedding swaps, each bounded by `eps_fn`.
///
/// With zero steps the bound is `eps_fn(α)` itself.
pub fn corollary4_chain<F>(eps_fn: F, steps: usize) -> impl Fn(f64) -> f64
where
    F: Fn(f64) -> f64,
{
    move |alpha| chain_at(&eps_fn, steps, alpha)
}

fn chain_at<F: Fn(f64) -> f64>(eps_fn: &F, steps: usize, alpha: f64) -> f64 {
    if steps == 0 {
        return eps_fn(alpha);
    }
    let weight = (alpha - 0.5) / (alpha - 1.0);
    weight * eps_fn(2.0 * alpha) + chain_at(eps_fn, steps - 1, 2.0 * alpha - 1.0)
}

/// Probability mass function on `offset, offset + 1, …`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteDist {
    offset: i64,
    pmf: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(offset: i64, pmf: Vec<f64>) -> Result<Self, PrivacyError> {
        if pmf.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(PrivacyError::InvalidDist("negative or non-finite mass".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(PrivacyError::InvalidDist(format!("mass sums to {total}")));
        }
        Ok(Self { offset, pmf })
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn prob(&self, x: i64) -> f64 {
        usize::try_from(x - self.offset)
            .ok()
            .and_then(|i| self.pmf.get(i))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(i, p)| (self.offset + i as i64) as f64 * p)
            .sum()
    }
}

/// `Binomial(b, p)` mass computed in log space.
fn binomial_pmf(b: u32, p: f64) -> Vec<f64> {
    let n = b as usize;
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_choose = 0.0;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        out.push((log_choose + k as f64 * lp + (n - k) as f64 * lq).exp());
    }
    out
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Exact distribution of `Σ_m Binomial(b, p(x_m))` on `{0, …, bM}`.
pub fn pbm_sum_distribution(inputs: &[f64], params: &PbmParams) -> Result<DiscreteDist, PrivacyError> {
    params.validate()?;
    if inputs.is_empty() {
        return Err(PrivacyError::NonPositive("M"));
    }
    let support = params.b as usize * inputs.len() + 1;
    if support > MAX_SUPPORT {
        return Err(PrivacyError::SupportTooLarge(support));
    }
    let mut pmf = vec![1.0];
    for &x in inputs {
        let p = success_probability(x, params)?;
        pmf = convolve(&pmf, &binomial_pmf(params.b, p));
    }
    DiscreteDist::new(0, pmf)
}

/// `D_α(P‖Q) = ln(Σ_x Q(x)·(P(x)/Q(x))^α)/(α − 1)`.
///
/// Returns `+∞` when `P` puts mass where `Q` has none.
pub fn renyi_divergence(p: &DiscreteDist, q: &DiscreteDist, alpha: f64) -> Result<f64, PrivacyError> {
    check_alpha(alpha)?;
    let mut terms = Vec::with_capacity(p.pmf.len());
    for (i, &pp) in p.pmf.iter().enumerate() {
        if pp == 0.0 {
            continue;
        }
        let qq = q.prob(p.offset + i as i64);
        if qq == 0.0 {
            return Ok(f64::INFINITY);
        }
        let (lp, lq) = (pp.ln(), qq.ln());
        terms.push(lq + alpha * (lp - lq));
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok((lse / (alpha - 1.0)).max(0.0))
}

/// Convergence-bound noise term `(1 + 2Lη)·C²MP(L0² + Lh²·ΣH_m²)/(4β²b)`.
///
/// Diagnostic only: the smoothness constants are user-supplied.
#[allow(clippy::too_many_arguments)]
pub fn convergence_noise_term(
    lipschitz: f64,
    eta: f64,
    c: f64,
    m: usize,
    p_dim: usize,
    l0: f64,
    lh: f64,
    embedding_grad_bounds: &[f64],
    beta: f64,
    b: u32,
) -> f64 {
    let h2: f64 = embedding_grad_bounds.iter().map(|h| h * h).sum();
    (1.0 + 2.0 * lipschitz * eta) * c * c * m as f64 * p_dim as f64 * (l0 * l0 + lh * lh * h2)
        / (4.0 * beta * beta * f64::from(b))
}
