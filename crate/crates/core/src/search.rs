//! Layer-adaptive activation calibration search.
//!
//! Stage 1 quantizes one activation site at a time with the probe calibrator
//! and marks the site for clipping when the error rate rises by more than
//! `gamma` over the full-precision baseline. Stage 2 sweeps a single global
//! cut-off percentile over the marked sites (clipped-MSE scales) while every
//! other site keeps plain MSE scales; the percentile with the lowest error
//! wins. Weights are MSE-calibrated once and held fixed throughout Stage 2.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::calibrators::{self, CalibMethod, CalibResult};
use crate::error::{Error, Result};
use crate::histogram::{check_percentile, ActivationHistogram, HistogramCollector, DEFAULT_BINS, MAX_PERCENTILE};
use crate::model::{Evaluator, LayerInfo, LayerKind, QuantizableModel};
use crate::ordered_map;
use crate::quant::{check_bits, TensorView};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Error-rate increase (percentage points) above which a site is clipped.
    pub gamma: f64,
    /// Candidate cut-off percentiles, strictly increasing within `[0, 0.5]`.
    pub grid: Vec<f64>,
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Calibrator used for the Stage 1 probes.
    pub probe: CalibMethod,
    pub weight_method: CalibMethod,
    pub bins: usize,
    pub parallel: bool,
}

impl SearchConfig {
    pub fn new(bits: u32) -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            grid: percentile_grid(0.0, MAX_PERCENTILE, DEFAULT_GRID_STEP)
                .expect("default grid is valid"),
            weight_bits: bits,
            act_bits: bits,
            probe: CalibMethod::Percentile(0.0),
            weight_method: CalibMethod::Mse,
            bins: DEFAULT_BINS,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.act_bits)?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("percentile grid is empty".into()));
        }
        for &p in &self.grid {
            check_percentile(p)?;
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("percentile grid must be strictly increasing".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        self.probe.validate()?;
        self.weight_method.validate()
    }
}

/// `lo, lo + step, ...` up to `hi`, with values rounded to 1e-9 so that e.g.
/// `0.07` is the literal nearest double rather than `7 * 0.01`.
pub fn percentile_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("grid step must be positive, got {step}")));
    }
    check_percentile(lo)?;
    check_percentile(hi)?;
    if hi < lo {
        return Err(Error::Config(format!("grid bounds reversed: {lo} > {hi}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|k| ((lo + k as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Per-site activation histograms from the full-precision model.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub layers: Vec<LayerInfo>,
    pub histograms: Vec<ActivationHistogram>,
}

impl Profiles {
    pub fn get(&self, layer: &str) -> Option<&ActivationHistogram> {
        self.layers
            .iter()
            .position(|l| l.id == layer)
            .map(|i| &self.histograms[i])
    }
}

/// Forwards every calibration sample through the full-precision model and
/// builds one `|x|` histogram per activation site. A first pass finds each
/// site's maximum so the histogram spans exactly `[0, amax]`, which makes the
/// result independent of sample order and batching.
pub fn collect_profiles<M: QuantizableModel>(
    model: &M,
    calib: &[TensorView],
    bins: usize,
    parallel: bool,
) -> Result<Profiles> {
    if calib.is_empty() {
        return Err(Error::NoCalibrationData);
    }
    let mut fp = model.clone();
    fp.reset();
    let layers = fp.layers();
    let n = layers.len();

    let maxima = ordered_map(parallel, calib, |x| {
        let mut m = vec![0.0f64; n];
        fp.forward_observed(x, &mut |i, v| {
            m[i] = v.iter().fold(m[i], |a, b| a.max(b.abs()));
        })?;
        Ok::<_, Error>(m)
    });
    let mut amax = vec![0.0f64; n];
    for m in maxima {
        let m = m?;
        amax.iter_mut().zip(m).for_each(|(a, b)| *a = a.max(b));
    }

    let partials = ordered_map(parallel, calib, |x| {
        let mut cols: Vec<HistogramCollector> =
            amax.iter().map(|&a| HistogramCollector::with_range(bins, a)).collect();
        let mut err = None;
        fp.forward_observed(x, &mut |i, v| {
            if let Err(e) = cols[i].observe_slice(v) {
                err.get_or_insert(e);
            }
        })?;
        err.map_or(Ok(cols), Err)
    });
    let mut merged: Vec<HistogramCollector> =
        amax.iter().map(|&a| HistogramCollector::with_range(bins, a)).collect();
    for part in partials {
        for (m, p) in merged.iter_mut().zip(part?) {
            m.merge(&p)?;
        }
    }
    let histograms = merged
        .iter()
        .map(HistogramCollector::finalize)
        .collect::<Result<Vec<_>>>()?;
    Ok(Profiles { layers, histograms })
}

/// Wraps an evaluator and counts calls.
#[derive(Debug)]
pub struct CountingEvaluator<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E> CountingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_count(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<M, E: Evaluator<M>> Evaluator<M> for CountingEvaluator<E> {
    fn evaluate(&self, model: &M) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub baseline_error: f64,
    pub deltas: Vec<LayerDelta>,
    pub clip_set: Vec<String>,
}

/// Stage 1. Performs exactly `L + 1` evaluations: the baseline, then one per
/// site with only that site's activation quantized by the probe calibrator.
/// Probes run on private copies, so `model` is never modified.
pub fn select_layers<M, E>(
    model: &M,
    evaluator: &E,
    profiles: &Profiles,
    config: &SearchConfig,
) -> Result<LayerSelection>
where
    M: QuantizableModel,
    E: Evaluator<M>,
{
    config.validate()?;
    let mut fp = model.clone();
    fp.reset();
    let baseline_error = evaluator.evaluate(&fp)?;

    let probes = profiles
        .layers
        .iter()
        .zip(&profiles.histograms)
        .map(|(l, h)| Ok((l.id.clone(), calibrators::calibrate(h, config.probe, config.act_bits)?)))
        .collect::<Result<Vec<_>>>()?;
    let errors = ordered_map(config.parallel, &probes, |(id, calib)| {
        let mut m = fp.clone();
        m.set_activation_quant(id, Some(calib.params()))?;
        evaluator.evaluate(&m)
    });

    let mut deltas = Vec::with_capacity(probes.len());
    let mut clip_set = Vec::new();
    for ((id, _), err) in probes.iter().zip(errors) {
        let delta = err? - baseline_error;
        if delta > config.gamma {
            clip_set.push(id.clone());
        }
        deltas.push(LayerDelta { layer: id.clone(), delta });
    }
    if !fp.is_full_precision() {
        return Err(Error::Invariant("stage 1 left a quantizer attached".into()));
    }
    Ok(LayerSelection { baseline_error, deltas, clip_set })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCalib {
    pub name: String,
    pub calib: CalibResult,
}

/// Per-tensor weight scales for every quantizable weight of `model`.
pub fn calibrate_weights<M: QuantizableModel>(
    model: &M,
    bits: u32,
    method: CalibMethod,
    bins: usize,
) -> Result<Vec<WeightCalib>> {
    model
        .weight_names()
        .into_iter()
        .map(|name| {
            let w = model.weight(&name)?;
            let mut c = HistogramCollector::with_range(bins, w.amax());
            c.observe(w)?;
            let calib = calibrators::calibrate(&c.finalize()?, method, bits)?;
            Ok(WeightCalib { name, calib })
        })
        .collect()
}

/// A full quantization assignment: one result per activation site plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub activations: Vec<(LayerInfo, CalibResult)>,
    pub weights: Vec<WeightCalib>,
}

impl QuantPlan {
    /// Copy of `model` with every quantizer of the plan attached.
    pub fn apply<M: QuantizableModel>(&self, model: &M) -> Result<M> {
        let mut m = model.clone();
        m.reset();
        for w in &self.weights {
            m.set_weight_quant(&w.name, Some(w.calib.params()))?;
        }
        for (layer, calib) in &self.activations {
            m.set_activation_quant(&layer.id, Some(calib.params()))?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub p: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub grid: Vec<f64>,
    pub scores: Vec<Score>,
    pub p_opt: f64,
    pub plan: QuantPlan,
}

fn plan_for(
    profiles: &Profiles,
    clip_set: &[String],
    mse: &[CalibResult],
    p: f64,
    bits: u32,
    weights: &[WeightCalib],
) -> Result<QuantPlan> {
    let activations = profiles
        .layers
        .iter()
        .zip(&profiles.histograms)
        .zip(mse)
        .map(|((layer, h), base)| {
            let calib = if clip_set.contains(&layer.id) {
                calibrators::scale_calibration(h, p, true, bits)?
            } else {
                base.clone()
            };
            Ok((layer.clone(), calib))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantPlan { activations, weights: weights.to_vec() })
}

/// Stage 2. Evaluates one global cut-off percentile per grid point, exactly
/// `|grid|` evaluations, or a single evaluation at `p = 0` when `clip_set` is
/// empty. Ties in the error go to the smallest percentile.
pub fn grid_search<M, E>(
    model: &M,
    evaluator: &E,
    profiles: &Profiles,
    clip_set: &[String],
    config: &SearchConfig,
) -> Result<GridResult>
where
    M: QuantizableModel,
    E: Evaluator<M>,
{
    config.validate()?;
    let weights = calibrate_weights(model, config.weight_bits, config.weight_method, config.bins)?;
    let mse = profiles
        .histograms
        .iter()
        .map(|h| calibrators::calibrate_mse(h, config.act_bits))
        .collect::<Result<Vec<_>>>()?;
    let grid = if clip_set.is_empty() { vec![0.0] } else { config.grid.clone() };

    let plans = grid
        .iter()
        .map(|&p| plan_for(profiles, clip_set, &mse, p, config.act_bits, &weights))
        .collect::<Result<Vec<_>>>()?;
    let errors = ordered_map(config.parallel, &plans, |plan| evaluator.evaluate(&plan.apply(model)?));

    let mut scores = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (k, (p, e)) in grid.iter().zip(errors).enumerate() {
        let error = e?;
        if error < scores.get(best).map_or(f64::INFINITY, |s: &Score| s.error) {
            best = k;
        }
        scores.push(Score { p: *p, error });
    }
    let p_opt = grid[best];
    let plan = plans.into_iter().nth(best).expect("best index within grid");
    Ok(GridResult { grid, scores, p_opt, plan })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: String,
    pub kind: LayerKind,
    pub scale: f64,
    pub bits: u32,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl LayerEntry {
    pub fn new(layer: &LayerInfo, calib: &CalibResult) -> Self {
        Self {
            layer: layer.id.clone(),
            kind: layer.kind,
            scale: calib.scale,
            bits: calib.bits,
            method: calib.method.name().to_string(),
            p: calib.method.percentile(),
            degenerate: calib.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub tensor: String,
    pub scale: f64,
    pub bits: u32,
    pub method: String,
}

impl From<&WeightCalib> for WeightEntry {
    fn from(w: &WeightCalib) -> Self {
        Self {
            tensor: w.name.clone(),
            scale: w.calib.scale,
            bits: w.calib.bits,
            method: w.calib.method.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchReport {
    pub schema_version: u32,
    pub gamma: f64,
    pub baseline_error: f64,
    pub probe_deltas: Vec<LayerDelta>,
    pub clip_set: Vec<String>,
    /// Percentiles actually searched (`[0]` when nothing was selected).
    pub grid: Vec<f64>,
    pub scores: Vec<Score>,
    pub p_opt: f64,
    pub per_layer: Vec<LayerEntry>,
    pub weights: Vec<WeightEntry>,
    pub final_error: f64,
}

impl SearchReport {
    pub fn degradation(&self) -> f64 {
        self.final_error - self.baseline_error
    }
}

/// The full procedure: profiles, Stage 1, Stage 2, then a fresh evaluation of
/// the winning configuration.
pub fn run_stablequant<M, E>(
    model: &M,
    evaluator: &E,
    calib: &[TensorView],
    config: &SearchConfig,
) -> Result<(SearchReport, QuantPlan)>
where
    M: QuantizableModel,
    E: Evaluator<M>,
{
    config.validate()?;
    let profiles = collect_profiles(model, calib, config.bins, config.parallel)
        .map_err(|e| e.in_stage("collect profiles"))?;
    let selection = select_layers(model, evaluator, &profiles, config)
        .map_err(|e| e.in_stage("layer selection"))?;
    let grid = grid_search(model, evaluator, &profiles, &selection.clip_set, config)
        .map_err(|e| e.in_stage("percentile search"))?;
    let final_error = evaluator
        .evaluate(&grid.plan.apply(model)?)
        .map_err(|e| e.in_stage("final evaluation"))?;
    let best = grid
        .scores
        .iter()
        .map(|s| s.error)
        .fold(f64::INFINITY, f64::min);
    if final_error.to_bits() != best.to_bits() {
        return Err(Error::Invariant(format!(
            "re-evaluated error {final_error} differs from best grid score {best}"
        )));
    }
    let report = SearchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        gamma: config.gamma,
        baseline_error: selection.baseline_error,
        probe_deltas: selection.deltas,
        clip_set: selection.clip_set,
        grid: grid.grid,
        scores: grid.scores,
        p_opt: grid.p_opt,
        per_layer: grid
            .plan
            .activations
            .iter()
            .map(|(l, c)| LayerEntry::new(l, c))
            .collect(),
        weights: grid.plan.weights.iter().map(WeightEntry::from).collect(),
        final_error,
    };
    Ok((report, grid.plan))
}
