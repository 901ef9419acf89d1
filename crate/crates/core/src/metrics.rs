//! Communication-cost ledger.
//!
//! Upstream, each party sends one masked integer per embedding coordinate.
//! A masked value lies in `(-(M-1)b, Mb)`, so it is charged
//! `w = ceil(log2((2M-1)b)) + 1` bits. Downstream, the server sends one
//! float per coordinate to each party, charged `F` bits (32 by default).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bits charged for one downstream floating point scalar.
pub const DEFAULT_FLOAT_BITS: u64 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("iteration {iter}: {direction} charge of {charged} bits, expected {expected}")]
    Mismatch {
        iter: usize,
        direction: &'static str,
        charged: u64,
        expected: u64,
    },
}

/// `ceil(log2(v))` for `v ≥ 1`.
fn ceil_log2(v: u64) -> u32 {
    debug_assert!(v >= 1);
    u64::BITS - (v - 1).leading_zeros()
}

/// Width in bits of one masked share for `m` parties and `b` trials, sign included.
pub fn share_width(m: usize, b: u32) -> u32 {
    let span = (2 * m as u64).saturating_sub(1).max(1) * u64::from(b);
    ceil_log2(span) + 1
}

pub fn upstream_bits_per_iter(batch: usize, m: usize, p_dim: usize, b: u32) -> u64 {
    (batch * m * p_dim) as u64 * u64::from(share_width(m, b))
}

pub fn downstream_bits_per_iter(batch: usize, m: usize, p_dim: usize, f_bits: u64) -> u64 {
    (batch * m * p_dim) as u64 * f_bits
}

/// Baseline cost with full-precision floats in both directions.
pub fn npq_bits_per_iter(batch: usize, m: usize, p_dim: usize, f_bits: u64) -> u64 {
    2 * (batch * m * p_dim) as u64 * f_bits
}

/// How upstream values are encoded on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Upstream {
    /// Masked quantized shares of [`share_width`] bits.
    Masked { b: u32 },
    /// Raw floats of `F` bits.
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerParams {
    pub batch: usize,
    pub m: usize,
    pub p_dim: usize,
    pub f_bits: u64,
    pub upstream: Upstream,
}

impl LedgerParams {
    pub fn expected_up(&self) -> u64 {
        match self.upstream {
            Upstream::Masked { b } => upstream_bits_per_iter(self.batch, self.m, self.p_dim, b),
            Upstream::Float => downstream_bits_per_iter(self.batch, self.m, self.p_dim, self.f_bits),
        }
    }

    pub fn expected_down(&self) -> u64 {
        downstream_bits_per_iter(self.batch, self.m, self.p_dim, self.f_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationBits {
    pub up: u64,
    pub down: u64,
}

/// Cumulative bit counters with a per-iteration snapshot.
///
/// Charges accumulate in a pending slot until [`CommLedger::close_iteration`]
/// checks them against the closed form and commits them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommLedger {
    params: LedgerParams,
    up_bits: u64,
    down_bits: u64,
    pending: IterationBits,
    history: Vec<IterationBits>,
}

impl CommLedger {
    pub fn new(params: LedgerParams) -> Self {
        Self {
            params,
            up_bits: 0,
            down_bits: 0,
            pending: IterationBits { up: 0, down: 0 },
            history: Vec::new(),
        }
    }

    pub fn params(&self) -> &LedgerParams {
        &self.params
    }

    pub fn charge_up(&mut self, bits: u64) {
        self.pending.up += bits;
    }

    pub fn charge_down(&mut self, bits: u64) {
        self.pending.down += bits;
    }

    pub fn close_iteration(&mut self) -> Result<IterationBits, LedgerError> {
        let iter = self.history.len();
        let pending = std::mem::replace(&mut self.pending, IterationBits { up: 0, down: 0 });
        let checks = [
            ("upstream", pending.up, self.params.expected_up()),
            ("downstream", pending.down, self.params.expected_down()),
        ];
        for (direction, charged, expected) in checks {
            if charged != expected {
                return Err(LedgerError::Mismatch {
                    iter,
                    direction,
                    charged,
                    expected,
                });
            }
        }
        self.up_bits += pending.up;
        self.down_bits += pending.down;
        self.history.push(pending);
        Ok(pending)
    }

    pub fn up_bits(&self) -> u64 {
        self.up_bits
    }

    pub fn down_bits(&self) -> u64 {
        self.down_bits
    }

    pub fn total_bits(&self) -> u64 {
        self.up_bits + self.down_bits
    }

    pub fn history(&self) -> &[IterationBits] {
        &self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_examples() {
        assert_eq!(share_width(2, 4), 5);
        assert_eq!(upstream_bits_per_iter(1, 2, 1, 4), 10);
        // a single party sends its raw encoding
        for b in [1u32, 2, 3, 4, 5, 16, 17, 128] {
            assert_eq!(share_width(1, b), ceil_log2(u64::from(b)) + 1);
        }
        assert_eq!(
            upstream_bits_per_iter(3, 4, 8, 16),
            2 * upstream_bits_per_iter(3, 4, 4, 16)
        );
    }

    #[test]
    fn downstream_examples() {
        assert_eq!(downstream_bits_per_iter(100, 4, 16, 32), 204_800);
        assert_eq!(downstream_bits_per_iter(100, 4, 16, 0), 0);
        assert_eq!(npq_bits_per_iter(1, 1, 1, 32), 64);
        let (bt, m, p) = (7, 3, 5);
        assert_eq!(
            npq_bits_per_iter(bt, m, p, 32),
            2 * downstream_bits_per_iter(bt, m, p, 32)
        );
    }

    #[test]
    fn masked_upstream_beats_floats_on_experiment_grids() {
        for m in [2usize, 4, 5, 10] {
            for b in [2u32, 4, 8, 16, 32, 64, 128] {
                assert!(share_width(m, b) < 32);
                assert!(upstream_bits_per_iter(100, m, 16, b) < npq_bits_per_iter(100, m, 16, 32) / 2);
            }
        }
    }

    #[test]
    fn ledger_accumulates_closed_form() {
        let params = LedgerParams {
            batch: 8,
            m: 3,
            p_dim: 4,
            f_bits: 32,
            upstream: Upstream::Masked { b: 16 },
        };
        let mut ledger = CommLedger::new(params);
        for _ in 0..5 {
            for _ in 0..3 {
                ledger.charge_up(params.expected_up() / 3);
                ledger.charge_down(params.expected_down() / 3);
            }
            ledger.close_iteration().unwrap();
        }
        assert_eq!(ledger.total_bits(), 5 * (params.expected_up() + params.expected_down()));
        ledger.charge_up(1);
        assert!(matches!(
            ledger.close_iteration(),
            Err(LedgerError::Mismatch { iter: 5, .. })
        ));
    }
}
