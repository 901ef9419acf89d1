//! `run`, `account` and `gen` subcommands.
//!
//! Output files:
//! - `trace_seed{r}.csv` with the columns of [`TRACE_HEADER`];
//! - `summary.csv` with [`SUMMARY_HEADER`];
//! - `gen` writes `f0,...,f{D-1},label` plus a `column,party` sidecar.

mod spec;

pub use spec::{locate, sidecar_for, test_rows, DatasetSpec, ExperimentSection, ExperimentSpec, GenSpec, SpecError};

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::nn::{save_checkpoint, Tensor2};
use crate::privacy::{feature_budget, per_round_feature_budget, sample_budget};
use crate::vfl::{contiguous_blocks, generate_synthetic, SyntheticSpec, TrainTrace, Trainer, VerticalDataset};

pub use crate::vfl::TRACE_HEADER;

pub const SUMMARY_HEADER: &str = "mode,b,beta,parties,repeats,iters,final_loss_mean,final_loss_std,\
train_acc_mean,train_acc_std,test_acc_mean,test_acc_std,total_bits,eps_feat_alpha2,eps_sample_alpha2";

pub const ACCOUNT_HEADER: &str = "alpha,eps_round_feature_c0,eps_feature_c0,eps_sample_c0";

/// Files written by [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub traces: Vec<PathBuf>,
    pub summary: PathBuf,
}

fn read_spec(path: &Path) -> Result<(ExperimentSpec, PathBuf)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
    let spec = ExperimentSpec::parse(&text).map_err(|e| anchored(path, e))?;
    Ok((spec, base_dir(path)))
}

fn anchored(path: &Path, e: SpecError) -> anyhow::Error {
    match e.line {
        Some(line) => anyhow!("{}:{line}: {}", path.display(), e.message),
        None => anyhow!("{}: {}", path.display(), e.message),
    }
}

fn base_dir(spec_path: &Path) -> PathBuf {
    spec_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the dataset for run `r` and splits off the test rows with a
/// permutation drawn from the run's data seed.
pub fn load_dataset(spec: &ExperimentSpec, base: &Path, r: usize) -> Result<(VerticalDataset, VerticalDataset)> {
    let seed = spec.seeds.offset(r as u64).data;
    let m = spec.experiment.parties;
    let full = match &spec.dataset {
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
            let (x, y) = generate_synthetic(&synth, seed)?;
            let cols = columns.clone().unwrap_or_else(|| contiguous_blocks(*features, m));
            VerticalDataset::from_columns(&x, y, *classes, cols)?
        }
        DatasetSpec::Csv {
            path,
            label_column,
            classes,
            columns,
            party_file,
            ..
        } => {
            let path = resolve(base, path);
            let table = read_feature_csv(&path, label_column)?;
            let names: Vec<Vec<String>> = match (columns, party_file) {
                (Some(cols), _) => cols.clone(),
                (None, Some(side)) => read_sidecar(&resolve(base, side), m)?,
                (None, None) => bail!("csv datasets need columns or party_file"),
            };
            let mut cols = Vec::with_capacity(names.len());
            for group in &names {
                let mut idx = Vec::with_capacity(group.len());
                for name in group {
                    let c = table
                        .names
                        .iter()
                        .position(|h| h == name)
                        .ok_or_else(|| anyhow!("{}: no feature column named {name:?}", path.display()))?;
                    idx.push(c);
                }
                cols.push(idx);
            }
            let classes = classes.unwrap_or_else(|| table.labels.iter().max().map_or(0, |&l| l + 1));
            VerticalDataset::from_columns(&table.features, table.labels, classes, cols)
                .with_context(|| format!("partitioning {}", path.display()))?
        }
    };
    let n = full.n();
    let n_test = test_rows(n, spec.dataset.test_fraction());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let perm = index::sample(&mut rng, n, n).into_vec();
    Ok((full.select_rows(&perm[n_test..]), full.select_rows(&perm[..n_test])))
}

struct FeatureTable {
    names: Vec<String>,
    features: Tensor2,
    labels: Vec<usize>,
}

fn read_feature_csv(path: &Path, label_column: &str) -> Result<FeatureTable> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot open dataset {}", path.display()))?;
    let header = reader.headers()?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| anyhow!("{}: no label column {label_column:?}", path.display()))?;
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), row + 2))?;
        for (i, field) in record.iter().enumerate() {
            let field = field.trim();
            if i == label_idx {
                labels.push(field.parse::<usize>().with_context(|| {
                    format!("{}:{}: label {field:?} is not a class index", path.display(), row + 2)
                })?);
            } else {
                data.push(
                    field
                        .parse::<f64>()
                        .with_context(|| format!("{}:{}: {field:?} is not a number", path.display(), row + 2))?,
                );
            }
        }
    }
    let features = Tensor2::from_vec(labels.len(), names.len(), data)?;
    Ok(FeatureTable {
        names,
        features,
        labels,
    })
}

fn read_sidecar(path: &Path, parties: usize) -> Result<Vec<Vec<String>>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("cannot open party file {}", path.display()))?;
    let mut groups = vec![Vec::new(); parties];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let (name, party) = match (record.get(0), record.get(1)) {
            (Some(n), Some(p)) => (n.trim().to_string(), p.trim()),
            _ => bail!("{}:{}: expected `column,party`", path.display(), row + 2),
        };
        let party: usize = party
            .parse()
            .with_context(|| format!("{}:{}: party {party:?} is not an index", path.display(), row + 2))?;
        groups
            .get_mut(party)
            .ok_or_else(|| {
                anyhow!(
                    "{}:{}: party {party} but only {parties} configured",
                    path.display(),
                    row + 2
                )
            })?
            .push(name);
    }
    Ok(groups)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One summary row over all repeats.
pub fn summarize(spec: &ExperimentSpec, traces: &[TrainTrace]) -> String {
    let last = |f: &dyn Fn(&TrainTrace) -> Option<f64>| traces.iter().filter_map(f).collect::<Vec<_>>();
    let (loss_m, loss_s) = mean_std(&last(&|t| t.rows.last().map(|r| r.loss)));
    let (tr_m, tr_s) = mean_std(&last(&|t| t.final_train_acc()));
    let (te_m, te_s) = mean_std(&last(&|t| t.final_test_acc()));
    let tail = traces.first().and_then(|t| t.rows.last());
    let e = &spec.experiment;
    let nan_empty = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    format!(
        "{SUMMARY_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        e.mode,
        spec.pbm.b,
        spec.pbm.beta,
        e.parties,
        spec.repeats,
        e.iters,
        nan_empty(loss_m),
        nan_empty(loss_s),
        nan_empty(tr_m),
        nan_empty(tr_s),
        nan_empty(te_m),
        nan_empty(te_s),
        traces.first().map_or(0, TrainTrace::total_bits),
        fmt_opt(tail.and_then(|r| r.eps_feat_alpha2)),
        fmt_opt(tail.and_then(|r| r.eps_sample_alpha2)),
    )
}

fn trace_csv(trace: &TrainTrace) -> String {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("trace is ASCII")
}

/// Runs every repeat of the spec (in parallel) and writes the traces and summary.
pub fn cmd_run(spec_path: &Path) -> Result<RunOutput> {
    let (spec, base) = read_spec(spec_path)?;
    let out_dir = resolve(&base, &spec.output_dir);
    let runs: Vec<Result<(TrainTrace, Trainer)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.repeats)
            .map(|r| {
                let (spec, base) = (&spec, &base);
                s.spawn(move || -> Result<(TrainTrace, Trainer)> {
                    let (train, test) = load_dataset(spec, base, r)?;
                    let mut trainer = Trainer::new(spec.config(r), train).map_err(|e| {
                        anchored(
                            spec_path,
                            SpecError {
                                line: None,
                                message: e.to_string(),
                            },
                        )
                    })?;
                    let test = (test.n() > 0).then_some(test);
                    let trace = trainer.run(test.as_ref())?;
                    Ok((trace, trainer))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("training thread panicked"))))
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut traces = Vec::with_capacity(runs.len());
    for (r, (trace, trainer)) in runs.iter().enumerate() {
        let path = out_dir.join(format!("trace_seed{r}.csv"));
        fs::write(&path, trace_csv(trace)).with_context(|| format!("cannot write {}", path.display()))?;
        traces.push(path);
        if spec.checkpoints {
            fs::write(
                out_dir.join(format!("server_seed{r}.json")),
                save_checkpoint(trainer.server_net()),
            )?;
            for m in 0..spec.experiment.parties {
                fs::write(
                    out_dir.join(format!("party{m}_seed{r}.json")),
                    save_checkpoint(trainer.party_net(m)),
                )?;
            }
        }
    }
    let summary = out_dir.join("summary.csv");
    let all: Vec<TrainTrace> = runs.into_iter().map(|(t, _)| t).collect();
    fs::write(&summary, summarize(&spec, &all)).with_context(|| format!("cannot write {}", summary.display()))?;
    Ok(RunOutput { traces, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccountParams {
    pub t: usize,
    pub batch: usize,
    pub p_dim: usize,
    pub b: u32,
    pub beta: f64,
    pub m: usize,
    pub n: usize,
    pub alphas: Vec<f64>,
}

/// Budgets for one order, in units of `C0`. `sample` is `None` for a single party.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccountRow {
    pub alpha: f64,
    pub per_round_feature: f64,
    pub feature: f64,
    pub sample: Option<f64>,
}

pub fn cmd_account(p: &AccountParams) -> Result<Vec<AccountRow>> {
    if p.alphas.is_empty() {
        bail!("give at least one --alpha");
    }
    p.alphas
        .iter()
        .map(|&alpha| {
            let sample = if p.m >= 2 {
                Some(sample_budget(alpha, p.p_dim, p.b, p.beta, p.m)?.eps)
            } else {
                None
            };
            Ok(AccountRow {
                alpha,
                per_round_feature: per_round_feature_budget(alpha, p.p_dim, p.b, p.beta, p.m)?.eps,
                feature: feature_budget(alpha, p.t, p.batch, p.p_dim, p.b, p.beta, p.m, p.n)?.eps,
                sample,
            })
        })
        .collect()
}

pub fn render_account(rows: &[AccountRow]) -> String {
    let mut out = format!("{ACCOUNT_HEADER}\n");
    for r in rows {
        let sample = r.sample.map_or_else(|| "unavailable".to_string(), |s| s.to_string());
        out.push_str(&format!("{},{},{},{sample}\n", r.alpha, r.per_round_feature, r.feature));
    }
    out
}

/// Writes the features CSV and its party sidecar; returns both paths.
pub fn cmd_gen(spec_path: &Path) -> Result<(PathBuf, PathBuf)> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("cannot read spec {}", spec_path.display()))?;
    let spec = GenSpec::parse(&text).map_err(|e| anchored(spec_path, e))?;
    let base = base_dir(spec_path);
    let features_path = resolve(&base, &spec.output);
    let sidecar_path = sidecar_for(&features_path);
    let (x, y) = generate_synthetic(&spec.synthetic, spec.seed)?;
    let d = spec.synthetic.features;

    let mut out = String::new();
    let names: Vec<String> = (0..d).map(|c| format!("f{c}")).collect();
    out.push_str(&names.join(","));
    out.push_str(",label\n");
    for (r, label) in y.iter().enumerate() {
        for v in x.row(r) {
            out.push_str(&v.to_string());
            out.push(',');
        }
        out.push_str(&label.to_string());
        out.push('\n');
    }
    let mut side = String::from("column,party\n");
    for (party, cols) in contiguous_blocks(d, spec.parties).iter().enumerate() {
        for &c in cols {
            side.push_str(&format!("{},{party}\n", names[c]));
        }
    }
    if let Some(dir) = features_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(&features_path, out).with_context(|| format!("cannot write {}", features_path.display()))?;
    fs::write(&sidecar_path, side).with_context(|| format!("cannot write {}", sidecar_path.display()))?;
    Ok((features_path, sidecar_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn account_rows() {
        let p = AccountParams {
            t: 100,
            batch: 100,
            p_dim: 16,
            b: 16,
            beta: 0.1,
            m: 4,
            n: 50_000,
            alphas: vec![2.0, 4.0],
        };
        let rows = cmd_account(&p).unwrap();
        assert!((rows[0].feature - 0.256).abs() < 1e-12);
        assert!((rows[1].feature - 2.0 * rows[0].feature).abs() < 1e-12);
        assert!((rows[1].per_round_feature - 2.0 * rows[0].per_round_feature).abs() < 1e-12);
        let single = cmd_account(&AccountParams { m: 1, ..p.clone() }).unwrap();
        assert!(single.iter().all(|r| r.sample.is_none()));
        assert!(render_account(&single)
            .lines()
            .nth(1)
            .unwrap()
            .ends_with(",unavailable"));
        assert!(cmd_account(&AccountParams { alphas: vec![1.0], ..p }).is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
