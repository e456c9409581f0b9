//! Absolute-value histograms of calibration activations.
//!
//! A [`HistogramCollector`] accumulates `|x|` into `B` uniform bins starting
//! at zero. When a batch exceeds the current range, the bin width is widened
//! by an integer factor `k` and every run of `k` adjacent bins is merged, so
//! bin edges stay nested and counts stay exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::TensorView;

pub const DEFAULT_BINS: usize = 2048;

/// Largest allowed cut-off percentile, in percent of total mass.
pub const MAX_PERCENTILE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct HistogramCollector {
    counts: Vec<u64>,
    // `None` until the first nonzero magnitude is seen; zeros always land in bin 0.
    bin_width: Option<f64>,
    amax: f64,
    total: u64,
}

impl HistogramCollector {
    /// Collector whose range is fixed by the first nonzero batch.
    pub fn new(num_bins: usize) -> Self {
        assert!(num_bins > 0, "histogram needs at least one bin");
        Self {
            counts: vec![0; num_bins],
            bin_width: None,
            amax: 0.0,
            total: 0,
        }
    }

    /// Collector covering `[0, range]` up front. A non-positive range behaves
    /// like [`HistogramCollector::new`].
    pub fn with_range(num_bins: usize, range: f64) -> Self {
        let mut c = Self::new(num_bins);
        if range.is_finite() && range > 0.0 {
            c.bin_width = Some(range / num_bins as f64);
        }
        c
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> Option<f64> {
        self.bin_width
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn amax_observed(&self) -> f64 {
        self.amax
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn observe(&mut self, t: &TensorView) -> Result<()> {
        self.observe_slice(t.data())
    }

    pub fn observe_slice(&mut self, values: &[f64]) -> Result<()> {
        let mut batch_max = 0.0f64;
        for &x in values {
            if !x.is_finite() {
                return Err(Error::NonFinite);
            }
            batch_max = batch_max.max(x.abs());
        }
        if batch_max > 0.0 {
            match self.bin_width {
                None => self.bin_width = Some(batch_max / self.counts.len() as f64),
                Some(w) if batch_max > w * self.counts.len() as f64 => self.widen(batch_max),
                Some(_) => {}
            }
        }
        let n = self.counts.len();
        match self.bin_width {
            None => self.counts[0] += values.len() as u64,
            Some(w) => {
                for &x in values {
                    let idx = ((x.abs() / w) as usize).min(n - 1);
                    self.counts[idx] += 1;
                }
            }
        }
        self.amax = self.amax.max(batch_max);
        self.total += values.len() as u64;
        Ok(())
    }

    fn widen(&mut self, needed: f64) {
        let n = self.counts.len();
        let w = self.bin_width.expect("widen requires an established bin width");
        let mut k = (needed / (w * n as f64)).ceil().max(2.0) as usize;
        while w * ((k * n) as f64) < needed {
            k += 1;
        }
        let mut merged = vec![0u64; n];
        for (i, &c) in self.counts.iter().enumerate() {
            merged[i / k] += c;
        }
        self.counts = merged;
        self.bin_width = Some(w * k as f64);
    }

    /// Adds another collector's counts. Both must share the same bin count
    /// and, once established, the same bin width.
    pub fn merge(&mut self, other: &HistogramCollector) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::Invariant("merging histograms with different bin counts".into()));
        }
        match (self.bin_width, other.bin_width) {
            (_, None) => self.counts[0] += other.counts[0],
            (None, Some(w)) => {
                let zeros = self.counts[0];
                self.counts.copy_from_slice(&other.counts);
                self.counts[0] += zeros;
                self.bin_width = Some(w);
            }
            (Some(a), Some(b)) if a == b => {
                for (c, o) in self.counts.iter_mut().zip(&other.counts) {
                    *c += o;
                }
            }
            (Some(a), Some(b)) => {
                return Err(Error::Invariant(format!(
                    "merging histograms with bin widths {a} and {b}"
                )))
            }
        }
        self.amax = self.amax.max(other.amax);
        self.total += other.total;
        Ok(())
    }

    /// Immutable snapshot of the current state.
    pub fn finalize(&self) -> Result<ActivationHistogram> {
        if self.total == 0 {
            return Err(Error::NoCalibrationData);
        }
        Ok(ActivationHistogram {
            bin_width: self.bin_width.unwrap_or(1.0 / self.counts.len() as f64),
            counts: self.counts.iter().map(|&c| c as f64).collect(),
            total: self.total as f64,
            amax: self.amax,
        })
    }
}

/// Finalized absolute-value histogram. Counts are reals so that clipping can
/// leave fractional mass in the boundary bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    bin_width: f64,
    counts: Vec<f64>,
    total: f64,
    amax: f64,
}

impl ActivationHistogram {
    /// Builds a histogram from explicit counts. The raw maximum is taken to be
    /// the upper edge of the last nonzero bin.
    pub fn from_counts(bin_width: f64, counts: Vec<f64>) -> Result<Self> {
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(Error::InvalidParams(format!("bin width {bin_width}")));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidParams("counts must be finite and non-negative".into()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyHistogram);
        }
        let mut h = Self {
            bin_width,
            counts,
            total,
            amax: 0.0,
        };
        h.amax = h.effective_len() as f64 * bin_width;
        Ok(h)
    }

    /// Overrides the tracked raw maximum. Must lie inside the last nonzero bin.
    pub fn with_amax(mut self, amax: f64) -> Result<Self> {
        let len = self.effective_len();
        let lo = len.saturating_sub(1) as f64 * self.bin_width;
        let hi = len as f64 * self.bin_width;
        if !(amax >= lo && amax <= hi) {
            return Err(Error::InvalidParams(format!(
                "amax {amax} outside last nonzero bin [{lo}, {hi}]"
            )));
        }
        self.amax = amax;
        Ok(self)
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Raw maximum magnitude observed (capped to the retained range after clipping).
    pub fn amax(&self) -> f64 {
        self.amax
    }

    /// Index of the last bin with nonzero mass, plus one.
    pub fn effective_len(&self) -> usize {
        self.counts
            .iter()
            .rposition(|&c| c > 0.0)
            .map_or(0, |i| i + 1)
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.bin_width
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.effective_len()).map(|i| self.bin_center(i)).collect()
    }

    /// Removes `p` percent of the total mass from the high-magnitude tail.
    pub fn clip(&self, p: f64) -> Result<Self> {
        check_percentile(p)?;
        if p == 0.0 {
            return Ok(self.clone());
        }
        let mut counts = self.counts.clone();
        let mut remaining = p * self.total / 100.0;
        for c in counts.iter_mut().rev() {
            if *c == 0.0 {
                continue;
            }
            if *c <= remaining {
                remaining -= *c;
                *c = 0.0;
            } else {
                *c -= remaining;
                break;
            }
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyHistogram);
        }
        let mut out = Self {
            bin_width: self.bin_width,
            counts,
            total,
            amax: self.amax,
        };
        out.amax = out.amax.min(out.effective_len() as f64 * out.bin_width);
        Ok(out)
    }
}

pub fn check_percentile(p: f64) -> Result<()> {
    if (0.0..=MAX_PERCENTILE).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidPercentile(p))
    }
}

pub fn clip_histogram(h: &ActivationHistogram, p: f64) -> Result<ActivationHistogram> {
    h.clip(p)
}

pub fn bin_centers(h: &ActivationHistogram) -> Vec<f64> {
    h.bin_centers()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(v: &[f64]) -> TensorView {
        TensorView::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn observe_counts_values() {
        let mut c = HistogramCollector::new(DEFAULT_BINS);
        c.observe(&tv(&[0.1, 0.2])).unwrap();
        assert_eq!(c.total_count(), 2);
        assert_eq!(c.counts().iter().sum::<u64>(), 2);
    }

    #[test]
    fn widening_merges_pairwise() {
        let mut c = HistogramCollector::with_range(4, 4.0);
        c.observe(&tv(&[0.5, 1.5, 1.6, 2.5, 3.5])).unwrap();
        assert_eq!(c.counts(), &[1, 2, 1, 1]);
        c.observe(&tv(&[7.5])).unwrap();
        assert_eq!(c.bin_width(), Some(2.0));
        assert_eq!(c.counts(), &[3, 2, 0, 1]);
        assert_eq!(c.total_count(), 6);
    }

    #[test]
    fn widening_by_non_power_of_two() {
        let mut c = HistogramCollector::with_range(4, 4.0);
        c.observe(&tv(&[0.5, 1.5, 2.5, 3.5])).unwrap();
        c.observe(&tv(&[11.0])).unwrap();
        assert_eq!(c.bin_width(), Some(3.0));
        assert_eq!(c.counts(), &[3, 1, 0, 1]);
    }

    #[test]
    fn observing_twice_doubles_counts() {
        let t = tv(&[0.1, -0.7, 0.3, 2.0, -2.0]);
        let mut c = HistogramCollector::new(16);
        c.observe(&t).unwrap();
        let once = c.counts().to_vec();
        c.observe(&t).unwrap();
        let twice: Vec<u64> = once.iter().map(|x| 2 * x).collect();
        assert_eq!(c.counts(), twice.as_slice());
    }

    #[test]
    fn top_edge_lands_in_last_bin() {
        let mut c = HistogramCollector::with_range(4, 4.0);
        c.observe(&tv(&[4.0])).unwrap();
        assert_eq!(c.counts(), &[0, 0, 0, 1]);
        assert_eq!(c.bin_width(), Some(1.0));
    }

    #[test]
    fn zeros_before_range_is_known() {
        let mut c = HistogramCollector::new(8);
        c.observe(&tv(&[0.0, 0.0])).unwrap();
        c.observe(&tv(&[8.0])).unwrap();
        assert_eq!(c.counts()[0], 2);
        assert_eq!(c.counts()[7], 1);
    }

    #[test]
    fn merge_matches_single_collector() {
        let mut whole = HistogramCollector::with_range(8, 4.0);
        whole.observe_slice(&[0.1, 3.9, 2.2, 0.0, 1.7]).unwrap();
        let mut a = HistogramCollector::with_range(8, 4.0);
        a.observe_slice(&[0.1, 3.9]).unwrap();
        let mut b = HistogramCollector::with_range(8, 4.0);
        b.observe_slice(&[2.2, 0.0, 1.7]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts(), whole.counts());
        assert_eq!(a.total_count(), 5);
        let c = HistogramCollector::with_range(8, 2.0);
        assert!(a.merge(&c).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut c = HistogramCollector::new(8);
        assert!(c.observe_slice(&[1.0, f64::NAN]).is_err());
        assert_eq!(c.total_count(), 0);
    }

    #[test]
    fn finalize_snapshots() {
        let mut c = HistogramCollector::with_range(4, 4.0);
        assert!(matches!(c.finalize(), Err(Error::NoCalibrationData)));
        c.observe(&tv(&[0.1, 0.2, 0.3, 1.2])).unwrap();
        let a = c.finalize().unwrap();
        let b = c.finalize().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts(), &[3.0, 1.0, 0.0, 0.0]);
        c.observe(&tv(&[3.9])).unwrap();
        assert_eq!(a.counts(), &[3.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn clip_examples() {
        let h = ActivationHistogram::from_counts(1.0, vec![10.0; 4]).unwrap();
        assert_eq!(h.clip(0.0).unwrap(), h);

        let h = ActivationHistogram::from_counts(1.0, vec![998.0, 1.0, 1.0]).unwrap();
        assert_eq!(h.clip(0.2).unwrap().counts(), &[998.0, 0.0, 0.0]);

        let h = ActivationHistogram::from_counts(1.0, vec![999.0, 1.0]).unwrap();
        let c = h.clip(0.05).unwrap();
        assert_eq!(c.counts(), &[999.0, 0.5]);
        assert_eq!(c.total(), 999.5);
    }

    #[test]
    fn clip_rejects_bad_percentile() {
        let h = ActivationHistogram::from_counts(1.0, vec![1.0]).unwrap();
        for p in [-0.01, 0.51, f64::NAN, 5.0] {
            assert!(matches!(h.clip(p), Err(Error::InvalidPercentile(_))));
        }
    }

    #[test]
    fn clip_never_empties_nonempty_input() {
        let h = ActivationHistogram::from_counts(1.0, vec![0.0, 0.0, 1.0]).unwrap();
        let c = h.clip(0.5).unwrap();
        assert_eq!(c.counts(), &[0.0, 0.0, 0.995]);
    }

    #[test]
    fn bin_center_examples() {
        let h = ActivationHistogram::from_counts(1.0, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(h.bin_centers(), vec![0.5, 1.5, 2.5]);
        let h = ActivationHistogram::from_counts(0.25, vec![5.0, 0.0]).unwrap();
        assert_eq!(h.bin_centers(), vec![0.125]);
    }

    #[test]
    fn clipping_shrinks_centers_by_zeroed_tail() {
        let h = ActivationHistogram::from_counts(1.0, vec![996.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = h.clip(0.3).unwrap();
        assert_eq!(c.counts(), &[996.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(h.bin_centers().len() - c.bin_centers().len(), 4);
    }

    #[test]
    fn with_amax_must_fall_in_last_bin() {
        let h = ActivationHistogram::from_counts(1.0, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(h.amax(), 3.0);
        assert_eq!(h.clone().with_amax(2.4).unwrap().amax(), 2.4);
        assert!(h.with_amax(1.5).is_err());
    }
}
