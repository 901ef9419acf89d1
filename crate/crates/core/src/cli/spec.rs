//! TOML experiment and dataset-generation specs.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::pbm::PbmParams;
use crate::vfl::{Mode, Seeds, SyntheticSpec, VflConfig};

/// A problem with a spec file, anchored to a 1-based line when one can be found.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for SpecError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Directory for traces and the summary; relative paths resolve against the spec file.
    pub output_dir: PathBuf,
    /// Independent runs; run `r` offsets every seed by `r`.
    #[serde(default = "one")]
    pub repeats: usize,
    /// Also write model checkpoints for each run.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub checkpoints: bool,
    pub experiment: ExperimentSection,
    pub pbm: PbmParams,
    pub seeds: Seeds,
    pub dataset: DatasetSpec,
}

fn one() -> usize {
    1
}

fn default_hidden() -> usize {
    16
}

fn default_f_bits() -> u64 {
    crate::metrics::DEFAULT_FLOAT_BITS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    pub parties: usize,
    pub embedding_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub batch: usize,
    pub iters: usize,
    pub eta: f64,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_f_bits")]
    pub f_bits: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldp_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        features: usize,
        classes: usize,
        separation: f64,
        #[serde(default = "unit")]
        noise: f64,
        #[serde(default)]
        test_fraction: f64,
        /// Column indices per party; contiguous blocks when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        columns: Option<Vec<Vec<usize>>>,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "label")]
        label_column: String,
        #[serde(default)]
        test_fraction: f64,
        /// Class count; one more than the largest label when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        /// Column names per party.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        columns: Option<Vec<Vec<String>>>,
        /// `column,party` sidecar, as written by `gen`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        party_file: Option<PathBuf>,
    },
}

fn unit() -> f64 {
    1.0
}

fn label() -> String {
    "label".into()
}

impl DatasetSpec {
    pub fn test_fraction(&self) -> f64 {
        match self {
            DatasetSpec::Synthetic { test_fraction, .. } | DatasetSpec::Csv { test_fraction, .. } => *test_fraction,
        }
    }
}

/// Spec for `gen`: a synthetic dataset written to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    /// Features CSV; the party sidecar goes next to it with a `.parties.csv` suffix.
    pub output: PathBuf,
    pub seed: u64,
    pub parties: usize,
    pub synthetic: SyntheticSpec,
}

/// 1-based line of `key = ...` inside `[section]` (or the top level when
/// `section` is empty), falling back to the section header.
pub fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, SpecError> {
    toml::from_str(text).map_err(|e| SpecError {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })
}

impl ExperimentSpec {
    /// Parses and checks everything that can be checked without loading data.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let spec: Self = parse_toml(text)?;
        spec.check().map_err(|(section, key, message)| SpecError {
            line: locate(text, section, key),
            message,
        })?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec types serialize")
    }

    /// The training configuration for run `r`.
    pub fn config(&self, r: usize) -> VflConfig {
        let e = &self.experiment;
        let mut cfg = VflConfig::new(e.parties, e.embedding_dim, e.batch, e.iters, e.eta, self.pbm, e.mode);
        cfg.hidden = e.hidden;
        cfg.seeds = self.seeds.offset(r as u64);
        cfg.f_bits = e.f_bits;
        cfg.eval_every = e.eval_every;
        cfg.ldp_sigma = e.ldp_sigma;
        cfg
    }

    fn check(&self) -> Result<(), (&'static str, &'static str, String)> {
        let e = &self.experiment;
        let bad = |section, key, msg: String| Err((section, key, msg));
        if self.repeats == 0 {
            return bad("", "repeats", "repeats must be at least 1".into());
        }
        if e.parties == 0 {
            return bad("experiment", "parties", "at least one party is required".into());
        }
        if e.embedding_dim == 0 || e.embedding_dim > usize::from(u16::MAX) {
            return bad(
                "experiment",
                "embedding_dim",
                format!("embedding_dim {} out of range", e.embedding_dim),
            );
        }
        if e.batch == 0 {
            return bad("experiment", "batch", "batch must be positive".into());
        }
        if u32::try_from(e.iters).is_err() {
            return bad("experiment", "iters", "too many iterations".into());
        }
        if !(e.eta.is_finite() && e.eta > 0.0) {
            return bad("experiment", "eta", format!("eta = {} must be positive", e.eta));
        }
        if e.f_bits == 0 {
            return bad("experiment", "f_bits", "f_bits must be positive".into());
        }
        if let Some(s) = e.ldp_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return bad(
                    "experiment",
                    "ldp_sigma",
                    format!("ldp_sigma = {s} must be non-negative"),
                );
            }
        }
        if self.pbm.b == 0 {
            return bad("pbm", "b", "b must be at least 1".into());
        }
        if !(0.0..=0.25).contains(&self.pbm.beta) {
            return bad("pbm", "beta", format!("beta = {} outside [0, 0.25]", self.pbm.beta));
        }
        if !(self.pbm.c.is_finite() && self.pbm.c > 0.0) {
            return bad("pbm", "c", format!("c = {} must be positive", self.pbm.c));
        }
        if e.mode != Mode::Npq && self.pbm.beta == 0.0 && e.ldp_sigma.is_none() {
            return bad("pbm", "beta", format!("{} mode needs beta > 0", e.mode));
        }
        let frac = self.dataset.test_fraction();
        if !(0.0..1.0).contains(&frac) {
            return bad(
                "dataset",
                "test_fraction",
                format!("test_fraction = {frac} outside [0, 1)"),
            );
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                features,
                classes,
                separation,
                noise,
                columns,
                ..
            } => {
                let synth = SyntheticSpec {
                    n: *n,
                    features: *features,
                    classes: *classes,
                    separation: *separation,
                    noise: *noise,
                };
                if let Err(err) = synth.validate() {
                    let key = if *features == 0 {
                        "features"
                    } else if *classes < 2 {
                        "classes"
                    } else if !(separation.is_finite() && *separation >= 0.0) {
                        "separation"
                    } else {
                        "noise"
                    };
                    return bad("dataset", key, err.to_string());
                }
                if *features < e.parties {
                    return bad(
                        "dataset",
                        "features",
                        format!("{features} features cannot be split over {} parties", e.parties),
                    );
                }
                if let Some(cols) = columns {
                    if cols.len() != e.parties {
                        return bad(
                            "dataset",
                            "columns",
                            format!("{} column groups for {} parties", cols.len(), e.parties),
                        );
                    }
                    let mut seen = vec![false; *features];
                    for &c in cols.iter().flatten() {
                        match seen.get_mut(c) {
                            Some(s) if !*s => *s = true,
                            Some(_) => return bad("dataset", "columns", format!("column {c} assigned twice")),
                            None => return bad("dataset", "columns", format!("column {c} out of range")),
                        }
                    }
                    if let Some(c) = seen.iter().position(|s| !s) {
                        return bad("dataset", "columns", format!("column {c} not assigned to any party"));
                    }
                    if cols.iter().any(Vec::is_empty) {
                        return bad("dataset", "columns", "every party needs at least one column".into());
                    }
                }
                let n_train = *n - test_rows(*n, frac);
                if e.batch > n_train {
                    return bad(
                        "experiment",
                        "batch",
                        format!("batch {} exceeds {n_train} training rows", e.batch),
                    );
                }
            }
            DatasetSpec::Csv {
                columns, party_file, ..
            } => match (columns, party_file) {
                (Some(_), Some(_)) => {
                    return bad(
                        "dataset",
                        "party_file",
                        "give either columns or party_file, not both".into(),
                    )
                }
                (None, None) => return bad("dataset", "kind", "csv datasets need columns or party_file".into()),
                (Some(cols), None) if cols.len() != e.parties => {
                    return bad(
                        "dataset",
                        "columns",
                        format!("{} column groups for {} parties", cols.len(), e.parties),
                    )
                }
                _ => {}
            },
        }
        Ok(())
    }
}

/// Rows held out for testing.
pub fn test_rows(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

impl GenSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let spec: Self = parse_toml(text)?;
        let fail = |section: &str, key: &str, message: String| SpecError {
            line: locate(text, section, key),
            message,
        };
        if spec.parties == 0 || spec.parties > spec.synthetic.features {
            return Err(fail(
                "",
                "parties",
                format!("{} parties for {} features", spec.parties, spec.synthetic.features),
            ));
        }
        spec.synthetic
            .validate()
            .map_err(|e| fail("synthetic", "features", e.to_string()))?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec types serialize")
    }

    pub fn sidecar_path(&self) -> PathBuf {
        sidecar_for(&self.output)
    }
}

/// `data/blobs.csv` → `data/blobs.parties.csv`.
pub fn sidecar_for(features: &std::path::Path) -> PathBuf {
    let stem = features
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    features.with_file_name(format!("{stem}.parties.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const SAMPLE: &str = r#"
output_dir = "out"
repeats = 3

[experiment]
mode = "pbm"
parties = 4
embedding_dim = 4
batch = 32
iters = 50
eta = 0.2
eval_every = 10

[pbm]
b = 16
beta = 0.1
c = 1.0

[seeds]
data = 0
model = 1
mechanism = 2
minibatch = 3

[dataset]
kind = "synthetic"
n = 400
features = 10
classes = 2
separation = 3.0
test_fraction = 0.25
"#;

    #[test]
    fn parses_sample_with_defaults() {
        let spec = ExperimentSpec::parse(SAMPLE).unwrap();
        assert_eq!(spec.repeats, 3);
        assert_eq!(spec.experiment.hidden, 16);
        assert_eq!(spec.experiment.f_bits, 32);
        let cfg = spec.config(2);
        assert_eq!(cfg.seeds.model, 3);
        assert_eq!((cfg.m, cfg.p_dim, cfg.batch), (4, 4, 32));
    }

    #[test]
    fn round_trip_is_identity() {
        let spec = ExperimentSpec::parse(SAMPLE).unwrap();
        assert_eq!(ExperimentSpec::parse(&spec.to_toml()).unwrap(), spec);
        let csv = SAMPLE.replace(
            "kind = \"synthetic\"\nn = 400\nfeatures = 10\nclasses = 2\nseparation = 3.0\n",
            "kind = \"csv\"\npath = \"d.csv\"\ncolumns = [[\"a\"], [\"b\"], [\"c\"], [\"d\", \"e\"]]\n",
        );
        let spec = ExperimentSpec::parse(&csv).unwrap();
        assert!(matches!(spec.dataset, DatasetSpec::Csv { .. }));
        assert_eq!(ExperimentSpec::parse(&spec.to_toml()).unwrap(), spec);
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let broken = SAMPLE.replace("batch = 32", "batch = = 32");
        let err = ExperimentSpec::parse(&broken).unwrap_err();
        assert_eq!(err.line, Some(9), "{err}");
        let unknown = SAMPLE.replace("batch = 32", "batchsize = 32");
        let err = ExperimentSpec::parse(&unknown).unwrap_err();
        assert!(err.message.contains("batchsize"), "{err}");
        assert!(err.line.is_some());
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let err = ExperimentSpec::parse(&SAMPLE.replace("beta = 0.1", "beta = 0.3")).unwrap_err();
        assert_eq!(err.line, Some(16), "{err}");
        let err = ExperimentSpec::parse(&SAMPLE.replace("repeats = 3", "repeats = 0")).unwrap_err();
        assert_eq!(err.line, Some(3));
        let err = ExperimentSpec::parse(&SAMPLE.replace("batch = 32", "batch = 301")).unwrap_err();
        assert_eq!(err.line, Some(9), "{err}");
        let cols = SAMPLE.replace(
            "test_fraction",
            "columns = [[0, 1], [2, 3], [4, 5], [6, 7, 8, 8]]\ntest_fraction",
        );
        let err = ExperimentSpec::parse(&cols).unwrap_err();
        assert!(err.message.contains("twice"), "{err}");
        assert_eq!(err.line, Some(31));
    }

    #[test]
    fn locate_falls_back_to_section() {
        assert_eq!(locate(SAMPLE, "pbm", "missing"), Some(14));
        assert_eq!(locate(SAMPLE, "", "output_dir"), Some(2));
        assert_eq!(locate(SAMPLE, "nowhere", "x"), None);
    }

    #[test]
    fn gen_spec_round_trip() {
        let text = r#"
output = "data/blobs.csv"
seed = 7
parties = 2

[synthetic]
n = 10
features = 4
classes = 3
separation = 6.0
"#;
        let spec = GenSpec::parse(text).unwrap();
        assert_eq!(spec.sidecar_path(), PathBuf::from("data/blobs.parties.csv"));
        assert_eq!(GenSpec::parse(&spec.to_toml()).unwrap(), spec);
        let err = GenSpec::parse(&text.replace("parties = 2", "parties = 5")).unwrap_err();
        assert_eq!(err.line, Some(4));
    }

    proptest! {
        #[test]
        fn arbitrary_specs_round_trip(
            mode in prop_oneof![Just(Mode::Pbm), Just(Mode::Npq), Just(Mode::Ldp)],
            parties in 1usize..6,
            extra in 0usize..6,
            b in 1u32..1000,
            beta in 0.001f64..0.25,
            eta in 1e-4f64..10.0,
            frac in 0.0f64..0.5,
            sigma in proptest::option::of(0.0f64..5.0),
            seeds in proptest::array::uniform4(0u64..i64::MAX as u64),
        ) {
            let spec = ExperimentSpec {
                output_dir: "runs/x".into(),
                repeats: 2,
                checkpoints: extra % 2 == 0,
                experiment: ExperimentSection {
                    mode,
                    parties,
                    embedding_dim: 3,
                    hidden: extra,
                    batch: 8,
                    iters: 10,
                    eta,
                    eval_every: extra,
                    f_bits: 32,
                    ldp_sigma: sigma,
                },
                pbm: PbmParams::new(b, beta, 1.0).unwrap(),
                seeds: Seeds { data: seeds[0], model: seeds[1], mechanism: seeds[2], minibatch: seeds[3] },
                dataset: DatasetSpec::Synthetic {
                    n: 200,
                    features: parties + extra,
                    classes: 2,
                    separation: 2.5,
                    noise: 1.0,
                    test_fraction: frac,
                    columns: None,
                },
            };
            let text = spec.to_toml();
            prop_assert_eq!(ExperimentSpec::parse(&text).unwrap(), spec);
        }
    }
}
