//! Single-method baselines and the side-by-side comparison against the
//! adaptive search.

use serde::{Deserialize, Serialize};

use crate::calibrators::{self, CalibMethod, CalibResult};
use crate::error::{Error, Result};
use crate::model::{Evaluator, QuantizableModel};
use crate::quant::TensorView;
use crate::search::{
    calibrate_weights, collect_profiles, run_stablequant, LayerEntry, Profiles, QuantPlan,
    SearchConfig, SearchReport, REPORT_SCHEMA_VERSION,
};

/// Cut-off used by the percentile baseline (keeps the 99.99th percentile).
pub const BASELINE_PERCENTILE: f64 = 0.01;

/// The single-method pipelines compared against the search.
pub fn baseline_methods() -> [CalibMethod; 3] {
    [
        CalibMethod::Percentile(BASELINE_PERCENTILE),
        CalibMethod::Mse,
        CalibMethod::Entropy,
    ]
}

/// Calibrates every site with `method`. Entropy falls back to Max on sites
/// whose histogram has fewer bins than quantization levels (high bit-widths).
pub fn single_method_plan<M: QuantizableModel>(
    model: &M,
    profiles: &Profiles,
    method: CalibMethod,
    config: &SearchConfig,
) -> Result<QuantPlan> {
    let weights = calibrate_weights(model, config.weight_bits, config.weight_method, config.bins)?;
    let activations = profiles
        .layers
        .iter()
        .zip(&profiles.histograms)
        .map(|(layer, h)| {
            let calib = match calibrators::calibrate(h, method, config.act_bits) {
                Err(Error::HistogramTooCoarse { .. }) => {
                    calibrators::calibrate_max(h, config.act_bits)?
                }
                r => r.map_err(|e| Error::Evaluation(format!("{}: {e}", layer.id)))?,
            };
            Ok((layer.clone(), calib))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantPlan { activations, weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub dev_error: f64,
    pub test_error: f64,
    pub per_layer: Vec<LayerEntry>,
}

impl MethodResult {
    fn new(method: String, dev_error: f64, test_error: f64, activations: &[(crate::LayerInfo, CalibResult)]) -> Self {
        Self {
            method,
            dev_error,
            test_error,
            per_layer: activations.iter().map(|(l, c)| LayerEntry::new(l, c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareReport {
    pub schema_version: u32,
    pub bits: u32,
    /// Percentile, MSE, Entropy, then StableQuant.
    pub methods: Vec<MethodResult>,
    pub stablequant: SearchReport,
}

impl CompareReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Runs the three baselines and the search on the same calibration data.
/// `dev` drives the search; `test` is held out and only scored.
pub fn compare<M, D, T>(
    model: &M,
    calib: &[TensorView],
    dev: &D,
    test: &T,
    config: &SearchConfig,
) -> Result<CompareReport>
where
    M: QuantizableModel,
    D: Evaluator<M>,
    T: Evaluator<M>,
{
    config.validate()?;
    let profiles = collect_profiles(model, calib, config.bins, config.parallel)
        .map_err(|e| e.in_stage("collect profiles"))?;
    let mut methods = Vec::new();
    for method in baseline_methods() {
        let plan = single_method_plan(model, &profiles, method, config)?;
        let q = plan.apply(model)?;
        methods.push(MethodResult::new(
            method.name().to_string(),
            dev.evaluate(&q)?,
            test.evaluate(&q)?,
            &plan.activations,
        ));
    }
    let (report, plan) = run_stablequant(model, dev, calib, config)?;
    let test_error = test.evaluate(&plan.apply(model)?)?;
    methods.push(MethodResult::new(
        "stablequant".to_string(),
        report.final_error,
        test_error,
        &plan.activations,
    ));
    Ok(CompareReport { schema_version: REPORT_SCHEMA_VERSION, bits: config.act_bits, methods, stablequant: report })
}
