//! Histogram-driven scale calibrators.
//!
//! [`scale_calibration`] is the fused clip-then-search routine: the histogram
//! is clipped by a cut-off percentile, then either the last surviving bin
//! center sets the range (percentile mode) or every bin center up to the last
//! nonzero bin is tried as a clipping threshold and the one minimizing the mass-weighted
//! quantization error of all bin centers wins (MSE mode). Max and KL-entropy
//! baselines live alongside.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::{check_percentile, ActivationHistogram};
use crate::quant::{check_bits, fake_quantize_scalar, qmax, QuantParams};

/// Smoothing applied to empty bins of the quantized distribution before KL.
const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "p", rename_all = "kebab-case")]
pub enum CalibMethod {
    /// Raw observed maximum magnitude.
    Max,
    /// Last surviving bin center after clipping `p` percent of the mass.
    Percentile(f64),
    /// KL-divergence truncation search.
    Entropy,
    /// Histogram MSE search over the unclipped histogram.
    Mse,
    /// Histogram MSE search after clipping `p` percent of the mass.
    ClippedMse(f64),
}

impl CalibMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CalibMethod::Max => "max",
            CalibMethod::Percentile(_) => "percentile",
            CalibMethod::Entropy => "entropy",
            CalibMethod::Mse => "mse",
            CalibMethod::ClippedMse(_) => "clipped-mse",
        }
    }

    pub fn percentile(&self) -> Option<f64> {
        match *self {
            CalibMethod::Percentile(p) | CalibMethod::ClippedMse(p) => Some(p),
            _ => None,
        }
    }

    /// Builds a method from its name and an optional cut-off percentile.
    pub fn from_parts(name: &str, p: Option<f64>) -> Result<Self> {
        let method = match (name, p) {
            ("max", None) => CalibMethod::Max,
            ("entropy", None) => CalibMethod::Entropy,
            ("mse", None) => CalibMethod::Mse,
            ("percentile", Some(p)) => CalibMethod::Percentile(p),
            ("clipped-mse", Some(p)) => CalibMethod::ClippedMse(p),
            ("percentile" | "clipped-mse", None) => {
                return Err(Error::Config(format!("method `{name}` needs a percentile")))
            }
            ("max" | "entropy" | "mse", Some(_)) => {
                return Err(Error::Config(format!("method `{name}` takes no percentile")))
            }
            _ => return Err(Error::Config(format!("unknown calibration method `{name}`"))),
        };
        method.validate()?;
        Ok(method)
    }

    pub fn validate(&self) -> Result<()> {
        match self.percentile() {
            Some(p) => check_percentile(p),
            None => Ok(()),
        }
    }
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.percentile() {
            Some(p) => write!(f, "{}({p})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for CalibMethod {
    type Err = Error;

    /// Accepts `max`, `entropy`, `mse`, `percentile(P)` and `clipped-mse(P)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((name, rest)) = s.split_once('(') {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::Config(format!("malformed method `{s}`")))?;
            let p: f64 = inner
                .parse()
                .map_err(|_| Error::Config(format!("malformed percentile in `{s}`")))?;
            Self::from_parts(name, Some(p))
        } else {
            Self::from_parts(s, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub scale: f64,
    pub method: CalibMethod,
    pub bits: u32,
    /// Histogram bin whose center defines the range (last nonzero bin for Max).
    pub chosen_bin: usize,
    /// `(candidate bin, e_i)` for MSE-mode searches.
    pub mse_curve: Option<Vec<(usize, f64)>>,
    /// Error of the chosen candidate, for MSE-mode searches.
    pub error: Option<f64>,
    /// Set when the data was all zero and the scale fell back to 1.0.
    pub degenerate: bool,
}

impl CalibResult {
    pub fn params(&self) -> QuantParams {
        QuantParams::new(self.scale, self.bits).expect("calibrated scale is always valid")
    }

    fn degenerate(method: CalibMethod, bits: u32) -> Self {
        Self {
            scale: 1.0,
            method,
            bits,
            chosen_bin: 0,
            mse_curve: None,
            error: None,
            degenerate: true,
        }
    }
}

/// Mass-weighted squared error of fake-quantizing every bin center at `scale`,
/// normalized by the effective bin count. All-zero data scores 0.
pub fn histogram_mse(h: &ActivationHistogram, scale: f64, bits: u32) -> f64 {
    let len = h.effective_len();
    if len == 0 || is_all_zero(h) {
        return 0.0;
    }
    let qm = qmax(bits);
    let counts = h.counts();
    let mut acc = 0.0;
    for (j, &mass) in counts[..len].iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let c = h.bin_center(j);
        let d = c - fake_quantize_scalar(c, scale, qm);
        acc += d * d * mass;
    }
    acc / len as f64
}

fn is_all_zero(h: &ActivationHistogram) -> bool {
    h.amax() == 0.0
}

/// Clips `h` by `p` percent, then picks a scale by MSE search (`mse == true`)
/// or from the last surviving bin center.
pub fn scale_calibration(
    h: &ActivationHistogram,
    p: f64,
    mse: bool,
    bits: u32,
) -> Result<CalibResult> {
    check_bits(bits)?;
    check_percentile(p)?;
    let method = match (mse, p == 0.0) {
        (true, true) => CalibMethod::Mse,
        (true, false) => CalibMethod::ClippedMse(p),
        (false, _) => CalibMethod::Percentile(p),
    };
    if is_all_zero(h) {
        return Ok(CalibResult::degenerate(method, bits));
    }
    let clipped = h.clip(p)?;
    let len = clipped.effective_len();
    if len == 0 {
        return Err(Error::EmptyHistogram);
    }
    let qm = qmax(bits) as f64;
    if !mse {
        return Ok(CalibResult {
            scale: clipped.bin_center(len - 1) / qm,
            method,
            bits,
            chosen_bin: len - 1,
            mse_curve: None,
            error: None,
            degenerate: false,
        });
    }

    let mut curve = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for i in 0..len {
        let c = clipped.bin_center(i);
        if c <= 0.0 {
            continue;
        }
        let e = histogram_mse(&clipped, c / qm, bits);
        curve.push((i, e));
        // `<=` so ties go to the larger candidate.
        if best.is_none_or(|(_, be)| e <= be) {
            best = Some((i, e));
        }
    }
    let (chosen, err) = best.ok_or(Error::EmptyHistogram)?;
    Ok(CalibResult {
        scale: clipped.bin_center(chosen) / qm,
        method,
        bits,
        chosen_bin: chosen,
        mse_curve: Some(curve),
        error: Some(err),
        degenerate: false,
    })
}

/// Range from the raw observed maximum.
pub fn calibrate_max(h: &ActivationHistogram, bits: u32) -> Result<CalibResult> {
    check_bits(bits)?;
    if is_all_zero(h) {
        return Ok(CalibResult::degenerate(CalibMethod::Max, bits));
    }
    let len = h.effective_len();
    if len == 0 {
        return Err(Error::EmptyHistogram);
    }
    Ok(CalibResult {
        scale: h.amax() / qmax(bits) as f64,
        method: CalibMethod::Max,
        bits,
        chosen_bin: len - 1,
        mse_curve: None,
        error: None,
        degenerate: false,
    })
}

pub fn calibrate_percentile(h: &ActivationHistogram, p: f64, bits: u32) -> Result<CalibResult> {
    scale_calibration(h, p, false, bits)
}

pub fn calibrate_mse(h: &ActivationHistogram, bits: u32) -> Result<CalibResult> {
    scale_calibration(h, 0.0, true, bits)
}

pub fn calibrate_clipped_mse(h: &ActivationHistogram, p: f64, bits: u32) -> Result<CalibResult> {
    scale_calibration(h, p, true, bits)
}

/// KL(P‖Q) of truncating the histogram at `i` bins and re-quantizing the
/// truncated slice into `levels` groups. The tail beyond `i` is folded into
/// the last reference bin only, so truncation is penalized.
pub(crate) fn truncation_divergence(counts: &[f64], i: usize, levels: usize) -> f64 {
    debug_assert!(i >= levels && i <= counts.len());
    let slice = &counts[..i];
    let mut p: Vec<f64> = slice.to_vec();
    p[i - 1] += counts[i..].iter().sum::<f64>();

    let merged = i / levels;
    let mut q = vec![0.0; i];
    for g in 0..levels {
        let start = g * merged;
        let stop = if g == levels - 1 { i } else { start + merged };
        let mass: f64 = slice[start..stop].iter().sum();
        let support = p[start..stop].iter().filter(|&&v| v > 0.0).count();
        if support == 0 {
            continue;
        }
        let share = mass / support as f64;
        for j in start..stop {
            if p[j] > 0.0 {
                q[j] = share;
            }
        }
    }
    for j in 0..i {
        if p[j] > 0.0 && q[j] == 0.0 {
            q[j] = KL_EPSILON;
        }
    }
    let p_sum: f64 = p.iter().sum();
    let q_sum: f64 = q.iter().sum();
    p.iter()
        .zip(&q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| {
            let pn = pv / p_sum;
            pn * (pn / (qv / q_sum)).ln()
        })
        .sum()
}

/// Minimum-KL truncation calibrator.
pub fn calibrate_entropy(h: &ActivationHistogram, bits: u32) -> Result<CalibResult> {
    check_bits(bits)?;
    if is_all_zero(h) {
        return Ok(CalibResult::degenerate(CalibMethod::Entropy, bits));
    }
    let len = h.effective_len();
    let levels = qmax(bits) as usize + 1;
    if len < levels {
        return Err(Error::HistogramTooCoarse {
            bins: len,
            needed: levels,
        });
    }
    let counts = &h.counts()[..len];
    let mut best = (levels, f64::INFINITY);
    for i in levels..=len {
        let kl = truncation_divergence(counts, i, levels);
        if kl < best.1 {
            best = (i, kl);
        }
    }
    let chosen = best.0 - 1;
    Ok(CalibResult {
        scale: h.bin_center(chosen) / qmax(bits) as f64,
        method: CalibMethod::Entropy,
        bits,
        chosen_bin: chosen,
        mse_curve: None,
        error: None,
        degenerate: false,
    })
}

/// Dispatches on `method`.
pub fn calibrate(h: &ActivationHistogram, method: CalibMethod, bits: u32) -> Result<CalibResult> {
    method.validate()?;
    match method {
        CalibMethod::Max => calibrate_max(h, bits),
        CalibMethod::Percentile(p) => calibrate_percentile(h, p, bits),
        CalibMethod::Entropy => calibrate_entropy(h, bits),
        CalibMethod::Mse => calibrate_mse(h, bits),
        CalibMethod::ClippedMse(p) => calibrate_clipped_mse(h, p, bits),
    }
}
