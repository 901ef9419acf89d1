//! Browser playground: three interactive views over the pbm-vfl library.
//! Every exported function returns a JSON string; the page plots it.

use pbm_vfl::metrics::share_width;
use pbm_vfl::pbm::{theoretical_variance, PbmParams};
use pbm_vfl::privacy::{
    feature_budget, pbm_sum_distribution, per_round_feature_budget, renyi_divergence, sample_budget,
};
use pbm_vfl::vfl::{
    contiguous_blocks, generate_synthetic, run_experiment, Mode, SyntheticSpec, VerticalDataset, VflConfig,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct MechanismView {
    /// Support point of `pmf_plus[0]`.
    pub offset: i64,
    /// Sum of `M` binomials when party 0 holds `+C`.
    pub pmf_plus: Vec<f64>,
    /// Same with party 0 at `-C`.
    pub pmf_minus: Vec<f64>,
    pub divergence: f64,
    /// `divergence / (bβ²α/M)`.
    pub ratio: f64,
    pub estimator_variance: f64,
    pub share_bits: u32,
}

/// Output distributions of the aggregated mechanism on two adjacent inputs.
/// Parties other than 0 hold `others`.
pub fn mechanism(b: u32, beta: f64, m: usize, others: f64, alpha: f64) -> Result<MechanismView, String> {
    if m == 0 || m > 16 {
        return Err("parties must be between 1 and 16".into());
    }
    let params = PbmParams::new(b, beta, 1.0).map_err(|e| e.to_string())?;
    let mut x = vec![others.clamp(-1.0, 1.0); m];
    x[0] = 1.0;
    let plus = pbm_sum_distribution(&x, &params).map_err(|e| e.to_string())?;
    x[0] = -1.0;
    let minus = pbm_sum_distribution(&x, &params).map_err(|e| e.to_string())?;
    let divergence = renyi_divergence(&plus, &minus, alpha).map_err(|e| e.to_string())?;
    Ok(MechanismView {
        offset: plus.offset(),
        pmf_plus: plus.pmf().to_vec(),
        pmf_minus: minus.pmf().to_vec(),
        divergence,
        ratio: divergence / (f64::from(b) * beta * beta * alpha / m as f64),
        estimator_variance: theoretical_variance(m, &params),
        share_bits: share_width(m, b),
    })
}

#[derive(Debug, Serialize)]
pub struct BudgetCurves {
    pub alphas: Vec<f64>,
    pub per_round_feature: Vec<f64>,
    pub feature: Vec<f64>,
    /// Empty for a single party.
    pub sample: Vec<f64>,
}

/// Budgets (in units of the unknown constant `C0`) for `α` from 1.25 to `alpha_max`.
#[allow(clippy::too_many_arguments)]
pub fn budgets(
    t: usize,
    batch: usize,
    p_dim: usize,
    b: u32,
    beta: f64,
    m: usize,
    n: usize,
    alpha_max: f64,
) -> Result<BudgetCurves, String> {
    if !(alpha_max > 1.25 && alpha_max <= 1024.0) {
        return Err("alpha_max must lie in (1.25, 1024]".into());
    }
    let steps = 64;
    let alphas: Vec<f64> = (0..=steps)
        .map(|i| 1.25 + (alpha_max - 1.25) * i as f64 / steps as f64)
        .collect();
    let mut curves = BudgetCurves {
        alphas: alphas.clone(),
        per_round_feature: Vec::new(),
        feature: Vec::new(),
        sample: Vec::new(),
    };
    for &a in &alphas {
        let err = |e: pbm_vfl::privacy::PrivacyError| e.to_string();
        curves
            .per_round_feature
            .push(per_round_feature_budget(a, p_dim, b, beta, m).map_err(err)?.eps);
        curves
            .feature
            .push(feature_budget(a, t, batch, p_dim, b, beta, m, n).map_err(err)?.eps);
        if m >= 2 {
            curves
                .sample
                .push(sample_budget(a, p_dim, b, beta, m).map_err(err)?.eps);
        }
    }
    Ok(curves)
}

#[derive(Debug, Serialize)]
pub struct ModeCurve {
    pub mode: String,
    pub iters: Vec<usize>,
    pub test_acc: Vec<f64>,
    pub loss: Vec<f64>,
    pub total_bits: u64,
}

const DEMO_PARTIES: usize = 4;
const DEMO_FEATURES: usize = 10;

fn demo_data(seed: u64) -> (VerticalDataset, VerticalDataset) {
    let spec = SyntheticSpec {
        n: 1000,
        features: DEMO_FEATURES,
        classes: 2,
        separation: 3.0,
        noise: 1.0,
    };
    let (x, y) = generate_synthetic(&spec, seed).expect("valid spec");
    VerticalDataset::from_columns(&x, y, 2, contiguous_blocks(DEMO_FEATURES, DEMO_PARTIES))
        .expect("contiguous blocks partition the columns")
        .split_tail(250)
}

/// Trains the same 4-party model in PBM, LDP and NPQ mode on a synthetic
/// 10-feature task and returns the test-accuracy curves.
pub fn training(b: u32, beta: f64, iters: usize, seed: u64) -> Result<Vec<ModeCurve>, String> {
    if iters == 0 || iters > 5000 {
        return Err("iterations must be between 1 and 5000".into());
    }
    let params = PbmParams::new(b, beta, 1.0).map_err(|e| e.to_string())?;
    let (train, test) = demo_data(seed);
    let every = (iters / 50).max(1);
    [Mode::Pbm, Mode::Ldp, Mode::Npq]
        .into_iter()
        .map(|mode| {
            let mut cfg = VflConfig::new(DEMO_PARTIES, 4, 32, iters, 0.05, params, mode);
            cfg.hidden = 8;
            cfg.eval_every = every;
            cfg.seeds = cfg.seeds.offset(seed);
            let trace = run_experiment(cfg, train.clone(), Some(&test)).map_err(|e| e.to_string())?;
            let evaluated: Vec<_> = trace.rows.iter().filter(|r| r.test_acc.is_some()).collect();
            Ok(ModeCurve {
                mode: mode.to_string(),
                iters: evaluated.iter().map(|r| r.iter + 1).collect(),
                test_acc: evaluated.iter().filter_map(|r| r.test_acc).collect(),
                loss: evaluated.iter().map(|r| r.loss).collect(),
                total_bits: trace.total_bits(),
            })
        })
        .collect()
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = mechanism)]
pub fn mechanism_js(b: u32, beta: f64, m: usize, others: f64, alpha: f64) -> Result<String, JsValue> {
    json(mechanism(b, beta, m, others, alpha))
}

#[wasm_bindgen(js_name = budgets)]
#[allow(clippy::too_many_arguments)]
pub fn budgets_js(
    t: usize,
    batch: usize,
    p_dim: usize,
    b: u32,
    beta: f64,
    m: usize,
    n: usize,
    alpha_max: f64,
) -> Result<String, JsValue> {
    json(budgets(t, batch, p_dim, b, beta, m, n, alpha_max))
}

#[wasm_bindgen(js_name = training)]
pub fn training_js(b: u32, beta: f64, iters: usize, seed: u32) -> Result<String, JsValue> {
    json(training(b, beta, iters, u64::from(seed)))
}
