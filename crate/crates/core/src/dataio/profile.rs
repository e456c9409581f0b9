//! Histograms and quantization error statistics over a dump directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dump::{list_dumps, read_dump};
use crate::calibrators::histogram_mse;
use crate::error::Result;
use crate::histogram::{ActivationHistogram, HistogramCollector};
use crate::quant::{fake_quantize_in_place, QuantParams};

/// One `|x|` histogram per dumped layer, in layer-name order. Like
/// `collect_profiles`, a first pass over the files fixes each range at the
/// layer's maximum.
pub fn profile_dumps(dir: &Path, bins: usize) -> Result<Vec<(String, ActivationHistogram)>> {
    list_dumps(dir)?
        .into_iter()
        .map(|(layer, files)| Ok((layer.clone(), profile_files(&files, bins)?)))
        .collect()
}

fn profile_files(files: &[PathBuf], bins: usize) -> Result<ActivationHistogram> {
    let mut amax = 0.0f64;
    for f in files {
        amax = read_dump(f)?.data().iter().fold(amax, |a, &x| a.max(f64::from(x).abs()));
    }
    let mut collector = HistogramCollector::with_range(bins, amax);
    for f in files {
        collector.observe(&read_dump(f)?.to_view())?;
    }
    collector.finalize()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpStats {
    pub layer: String,
    pub scale: f64,
    pub bits: u32,
    /// Histogram-domain error, the quantity the MSE calibrators minimize.
    pub histogram_mse: f64,
    /// Mean squared fake-quantization error over the raw dumped values.
    pub element_mse: f64,
    /// Fraction of values beyond the representable range.
    pub saturation: f64,
    pub count: u64,
}

/// Applies `params` to every dumped value of one layer.
pub fn dump_stats(
    layer: &str,
    files: &[PathBuf],
    hist: &ActivationHistogram,
    params: &QuantParams,
) -> Result<DumpStats> {
    let range = params.range();
    let (mut sq, mut saturated, mut count) = (0.0f64, 0u64, 0u64);
    for f in files {
        let values: Vec<f64> = read_dump(f)?.data().iter().map(|&x| f64::from(x)).collect();
        let mut q = values.clone();
        fake_quantize_in_place(&mut q, params);
        for (x, y) in values.iter().zip(&q) {
            sq += (x - y) * (x - y);
            saturated += u64::from(x.abs() > range);
        }
        count += values.len() as u64;
    }
    let per = |v: f64| if count == 0 { 0.0 } else { v / count as f64 };
    Ok(DumpStats {
        layer: layer.to_string(),
        scale: params.scale(),
        bits: params.bits(),
        histogram_mse: histogram_mse(hist, params.scale(), params.bits()),
        element_mse: per(sq),
        saturation: per(saturated as f64),
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrators::calibrate_mse;
    use crate::dataio::{batch_path, write_batch, DumpTensor};

    #[test]
    fn stats_reproduce_the_calibrated_error() {
        let dir = tempfile::tempdir().unwrap();
        let a: Vec<f32> = (0..500).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        write_batch(dir.path(), "l", 0, &DumpTensor::new(vec![500], a).unwrap()).unwrap();
        write_batch(dir.path(), "l", 1, &DumpTensor::new(vec![2], vec![40.0, -0.5]).unwrap()).unwrap();
        let profiles = profile_dumps(dir.path(), 256).unwrap();
        let (name, hist) = &profiles[0];
        assert_eq!(name, "l");
        assert_eq!(hist.total(), 502.0);
        assert_eq!(hist.amax(), 40.0);

        let calib = calibrate_mse(hist, 8).unwrap();
        let files = [0, 1].map(|i| batch_path(dir.path(), "l", i));
        let stats = dump_stats("l", &files, hist, &calib.params()).unwrap();
        assert_eq!(stats.histogram_mse, calib.error.unwrap());
        assert_eq!(stats.count, 502);
        assert!(stats.saturation > 0.0 && stats.saturation < 0.01);
    }

    #[test]
    fn zero_dump_has_zero_error() {
        let dir = tempfile::tempdir().unwrap();
        write_batch(dir.path(), "z", 0, &DumpTensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
        let (_, hist) = profile_dumps(dir.path(), 16).unwrap().remove(0);
        let files = [batch_path(dir.path(), "z", 0)];
        let stats = dump_stats("z", &files, &hist, &QuantParams::new(1.0, 8).unwrap()).unwrap();
        assert_eq!((stats.histogram_mse, stats.element_mse, stats.saturation), (0.0, 0.0, 0.0));
    }
}
