//! Vertically partitioned datasets and the synthetic Gaussian-cluster generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::VflError;
use crate::nn::Tensor2;

/// Rows aligned across parties; party `m` holds the columns `columns[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerticalDataset {
    blocks: Vec<Tensor2>,
    labels: Vec<usize>,
    classes: usize,
    columns: Vec<Vec<usize>>,
}

impl VerticalDataset {
    /// Splits a full feature matrix by a column assignment. The assignment
    /// must partition `0..features.cols()`.
    pub fn from_columns(
        features: &Tensor2,
        labels: Vec<usize>,
        classes: usize,
        columns: Vec<Vec<usize>>,
    ) -> Result<Self, VflError> {
        let d = features.cols();
        let mut owner = vec![None; d];
        for (party, cols) in columns.iter().enumerate() {
            if cols.is_empty() {
                return Err(VflError::Data(format!("party {party} holds no features")));
            }
            for &c in cols {
                match owner.get_mut(c) {
                    None => return Err(VflError::Data(format!("column {c} out of range for {d} features"))),
                    Some(Some(other)) => {
                        return Err(VflError::Data(format!(
                            "column {c} assigned to parties {other} and {party}"
                        )))
                    }
                    Some(slot) => *slot = Some(party),
                }
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(VflError::Data(format!("column {c} is not assigned to any party")));
        }
        if labels.len() != features.rows() {
            return Err(VflError::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(VflError::Data(format!("label {l} outside {classes} classes")));
        }
        let n = features.rows();
        let blocks = columns
            .iter()
            .map(|cols| {
                let mut data = Vec::with_capacity(n * cols.len());
                for r in 0..n {
                    data.extend(cols.iter().map(|&c| features.get(r, c)));
                }
                Tensor2::from_vec(n, cols.len(), data).expect("sized above")
            })
            .collect();
        Ok(Self {
            blocks,
            labels,
            classes,
            columns,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn parties(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn block(&self, party: usize) -> &Tensor2 {
        &self.blocks[party]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    /// Subset of rows, preserving the partition.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            columns: self.columns.clone(),
        }
    }

    /// First `n - n_test` rows and the remaining `n_test` rows.
    pub fn split_tail(&self, n_test: usize) -> (Self, Self) {
        let cut = self.n().saturating_sub(n_test);
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.n()).collect();
        (self.select_rows(&head), self.select_rows(&tail))
    }
}

/// Contiguous, near-equal column blocks: the first `d % m` parties get one extra column.
pub fn contiguous_blocks(d: usize, m: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (d / m.max(1), d % m.max(1));
    let mut start = 0;
    (0..m)
        .map(|party| {
            let len = base + usize::from(party < extra);
            let cols = (start..start + len).collect();
            start += len;
            cols
        })
        .collect()
}

/// Gaussian class clusters. Class means sit at distance `separation / 2`
/// from the origin (for two classes, exactly `separation` apart);
/// features are the class mean plus isotropic noise with standard deviation `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), VflError> {
        if self.features == 0 {
            return Err(VflError::Config("features must be positive".into()));
        }
        if self.classes < 2 {
            return Err(VflError::Config("at least two classes are needed".into()));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(VflError::Config("separation must be non-negative".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(VflError::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws `(features, labels)`; identical seeds give identical data.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Tensor2, Vec<usize>), VflError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = spec.features;
    let radius = spec.separation * spec.noise / 2.0;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for k in 0..spec.classes {
        let mean = if k == 1 && spec.classes == 2 {
            means[0].iter().map(|v| -v).collect()
        } else {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter().map(|v| v / norm * radius).collect()
        };
        means.push(mean);
    }
    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let y = rng.random_range(0..spec.classes);
        labels.push(y);
        for mu in &means[y] {
            data.push(mu + spec.noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let features = Tensor2::from_vec(spec.n, d, data).expect("sized above");
    Ok((features, labels))
}
