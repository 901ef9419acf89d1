//! Vertical federated training with PBM-quantized, securely aggregated
//! embeddings, plus the unprotected (NPQ) and local-Gaussian (LDP) baselines.

mod data;
mod train;

pub use data::{contiguous_blocks, generate_synthetic, SyntheticSpec, VerticalDataset};
pub use train::{run_experiment, Aggregate, StepRecord, TraceRow, TrainTrace, Trainer, TRACE_HEADER};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{LedgerError, DEFAULT_FLOAT_BITS};
use crate::nn::NnError;
use crate::pbm::{PbmError, PbmParams};
use crate::privacy::PrivacyError;
use crate::secureagg::SecAggError;

#[derive(Debug, Error)]
pub enum VflError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Pbm(#[from] PbmError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Quantize with PBM, aggregate through pairwise masking.
    Pbm,
    /// Exact real-valued sums, no protection.
    Npq,
    /// Each party adds Gaussian noise to its embedding before a plain sum.
    Ldp,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pbm => "pbm",
            Mode::Npq => "npq",
            Mode::Ldp => "ldp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub mechanism: u64,
    pub minibatch: u64,
}

impl Seeds {
    /// Every seed shifted by `k`, for repeated runs.
    pub fn offset(self, k: u64) -> Self {
        Self {
            data: self.data.wrapping_add(k),
            model: self.model.wrapping_add(k),
            mechanism: self.mechanism.wrapping_add(k),
            minibatch: self.minibatch.wrapping_add(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VflConfig {
    /// Number of parties `M`.
    pub m: usize,
    /// Embedding dimension `P`.
    pub p_dim: usize,
    /// Hidden width of each party network; 0 for a single tanh layer.
    pub hidden: usize,
    /// Minibatch size `B`.
    pub batch: usize,
    /// Iterations `T`.
    pub iters: usize,
    /// Learning rate.
    pub eta: f64,
    pub pbm: PbmParams,
    pub mode: Mode,
    pub seeds: Seeds,
    /// Bits charged per downstream float.
    pub f_bits: u64,
    /// Evaluate accuracy every this many iterations (0: final iteration only).
    pub eval_every: usize,
    /// Overrides the calibrated LDP noise scale `sqrt(2M/(bβ²))`.
    pub ldp_sigma: Option<f64>,
}

impl VflConfig {
    pub fn new(m: usize, p_dim: usize, batch: usize, iters: usize, eta: f64, pbm: PbmParams, mode: Mode) -> Self {
        Self {
            m,
            p_dim,
            hidden: 16,
            batch,
            iters,
            eta,
            pbm,
            mode,
            seeds: Seeds {
                data: 0,
                model: 1,
                mechanism: 2,
                minibatch: 3,
            },
            f_bits: DEFAULT_FLOAT_BITS,
            eval_every: 0,
            ldp_sigma: None,
        }
    }

    /// Standard deviation of the per-party Gaussian noise in LDP mode.
    pub fn ldp_noise_std(&self) -> f64 {
        self.ldp_sigma.unwrap_or_else(|| {
            let b = f64::from(self.pbm.b);
            (2.0 * self.m as f64 / (b * self.pbm.beta * self.pbm.beta)).sqrt()
        })
    }

    pub fn validate(&self, n: usize) -> Result<(), VflError> {
        let fail = |msg: String| Err(VflError::Config(msg));
        if self.m == 0 {
            return fail("at least one party is required".into());
        }
        if self.p_dim == 0 || self.p_dim > usize::from(u16::MAX) {
            return fail(format!("embedding dimension {} out of range", self.p_dim));
        }
        if self.batch == 0 || self.batch > n {
            return fail(format!("batch size {} must lie in [1, {n}]", self.batch));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return fail(format!("learning rate {} must be positive", self.eta));
        }
        if u32::try_from(self.iters).is_err() {
            return fail("too many iterations for 32-bit round numbers".into());
        }
        self.pbm.validate()?;
        match self.mode {
            Mode::Pbm if self.pbm.beta == 0.0 => fail("PBM mode needs beta > 0".into()),
            Mode::Ldp if !(self.ldp_noise_std().is_finite() && self.ldp_noise_std() >= 0.0) => {
                fail("LDP noise scale is not finite; use beta > 0 or set ldp_sigma".into())
            }
            _ => Ok(()),
        }
    }
}

/// Minibatch `B^t`: `batch` distinct indices drawn uniformly from `0..n`.
/// Every participant derives the same set from the shared seed.
pub fn sample_minibatch(seed: u64, t: usize, n: usize, batch: usize) -> Result<Vec<usize>, VflError> {
    if batch > n {
        return Err(VflError::Config(format!("batch size {batch} exceeds {n} samples")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    Ok(index::sample(&mut rng, n, batch).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_a_permutation() {
        let mut idx = sample_minibatch(7, 3, 12, 12).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
        assert!(sample_minibatch(7, 3, 12, 13).is_err());
    }

    #[test]
    fn all_parties_agree() {
        let views: Vec<_> = (0..5).map(|_| sample_minibatch(99, 17, 1000, 32).unwrap()).collect();
        assert!(views.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(views[0], sample_minibatch(99, 18, 1000, 32).unwrap());
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let (n, batch, iters) = (10, 2, 10_000);
        let mut counts = vec![0usize; n];
        for t in 0..iters {
            let idx = sample_minibatch(5, t, n, batch).unwrap();
            let mut dedup = idx.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), batch);
            for i in idx {
                counts[i] += 1;
            }
        }
        let p = batch as f64 / n as f64;
        let se = (p * (1.0 - p) / iters as f64).sqrt();
        for c in counts {
            let freq = c as f64 / iters as f64;
            assert!((freq - p).abs() < 3.0 * se, "{freq}");
        }
    }

    #[test]
    fn ldp_noise_is_calibrated() {
        let cfg = VflConfig::new(4, 4, 8, 1, 0.1, PbmParams::new(4, 0.1, 1.0).unwrap(), Mode::Ldp);
        assert!((cfg.ldp_noise_std().powi(2) - 2.0 * 4.0 / (4.0 * 0.01)).abs() < 1e-9);
        let forced = VflConfig {
            ldp_sigma: Some(0.0),
            ..cfg
        };
        assert_eq!(forced.ldp_noise_std(), 0.0);
    }

    #[test]
    fn config_validation() {
        let pbm = PbmParams::new(4, 0.1, 1.0).unwrap();
        assert!(VflConfig::new(2, 4, 8, 1, 0.1, pbm, Mode::Pbm).validate(8).is_ok());
        assert!(VflConfig::new(2, 4, 9, 1, 0.1, pbm, Mode::Pbm).validate(8).is_err());
        assert!(VflConfig::new(2, 4, 8, 1, 0.0, pbm, Mode::Pbm).validate(8).is_err());
        let no_beta = PbmParams::new(4, 0.0, 1.0).unwrap();
        assert!(VflConfig::new(2, 4, 8, 1, 0.1, no_beta, Mode::Pbm).validate(8).is_err());
        assert!(VflConfig::new(2, 4, 8, 1, 0.1, no_beta, Mode::Npq).validate(8).is_ok());
    }
}
