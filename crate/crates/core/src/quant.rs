//! Symmetric per-tensor quantization primitives.
//!
//! `q = clamp(round(x / s), -qmax, qmax)` with `qmax = 2^(b-1) - 1` and the
//! zero-point pinned to 0. Rounding is half-to-even. The integer range is
//! symmetric, so `-2^(b-1)` is never produced and negation is closed.

use serde::{Deserialize, Serialize};

use crate::calibrators::{self, CalibMethod, CalibResult};
use crate::error::{Error, Result};
use crate::histogram::HistogramCollector;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Largest representable integer magnitude for a `bits`-wide symmetric range.
pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f64,
    bits: u32,
}

impl QuantParams {
    pub fn new(scale: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParams(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Self { scale, bits })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Always 0: the scheme is symmetric.
    pub fn zero_point(&self) -> i32 {
        0
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// Largest magnitude representable without saturation.
    pub fn range(&self) -> f64 {
        self.qmax() as f64 * self.scale
    }
}

/// Dense row-major tensor of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorView {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn amax(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Crate-internal constructor for buffers already known to be finite and
    /// correctly sized.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// Integer tensor produced by [`quantize_tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    params: QuantParams,
}

impl QTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn dequantize(&self) -> TensorView {
        let s = self.params.scale;
        TensorView::from_parts_unchecked(
            self.shape.clone(),
            self.data.iter().map(|&q| q as f64 * s).collect(),
        )
    }
}

#[inline]
fn quantize_unchecked(x: f64, scale: f64, qmax: i32) -> i32 {
    let q = (x / scale).round_ties_even();
    let m = qmax as f64;
    q.clamp(-m, m) as i32
}

/// Saturating quantize-dequantize of a single value. Inputs must be finite.
#[inline]
pub(crate) fn fake_quantize_scalar(x: f64, scale: f64, qmax: i32) -> f64 {
    quantize_unchecked(x, scale, qmax) as f64 * scale
}

pub fn quantize_value(x: f64, params: &QuantParams) -> Result<i32> {
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(quantize_unchecked(x, params.scale, params.qmax()))
}

pub fn dequantize_value(q: i32, params: &QuantParams) -> Result<f64> {
    let qmax = params.qmax();
    if q < -qmax || q > qmax {
        return Err(Error::OutOfRange {
            value: q as i64,
            qmax,
        });
    }
    Ok(q as f64 * params.scale)
}

pub fn quantize_tensor(t: &TensorView, params: &QuantParams) -> QTensor {
    let qmax = params.qmax();
    QTensor {
        shape: t.shape.clone(),
        data: t
            .data
            .iter()
            .map(|&x| quantize_unchecked(x, params.scale, qmax))
            .collect(),
        params: *params,
    }
}

/// Elementwise `dequantize(quantize(x))`, preserving shape.
pub fn fake_quantize(t: &TensorView, params: &QuantParams) -> TensorView {
    let mut out = t.data.clone();
    fake_quantize_in_place(&mut out, params);
    TensorView::from_parts_unchecked(t.shape.clone(), out)
}

pub fn fake_quantize_in_place(data: &mut [f64], params: &QuantParams) {
    let qmax = params.qmax();
    for x in data.iter_mut() {
        *x = fake_quantize_scalar(*x, params.scale, qmax);
    }
}

/// Calibrates a per-tensor scale for `w` from its absolute-value histogram and
/// quantizes it. All-zero tensors get scale 1.0 and a degenerate flag.
pub fn quantize_weights(
    w: &TensorView,
    bits: u32,
    method: CalibMethod,
) -> Result<(QTensor, CalibResult)> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::Shape("cannot quantize an empty weight tensor".into()));
    }
    let mut collector = HistogramCollector::with_range(crate::histogram::DEFAULT_BINS, w.amax());
    collector.observe(w)?;
    let hist = collector.finalize()?;
    let calib = calibrators::calibrate(&hist, method, bits)?;
    let params = calib.params();
    Ok((quantize_tensor(w, &params), calib))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(scale: f64, bits: u32) -> QuantParams {
        QuantParams::new(scale, bits).unwrap()
    }

    #[test]
    fn quantize_value_examples() {
        assert_eq!(quantize_value(0.0, &p(0.25, 8)).unwrap(), 0);
        assert_eq!(quantize_value(300.0, &p(1.0, 8)).unwrap(), 127);
        assert_eq!(quantize_value(-300.0, &p(1.0, 8)).unwrap(), -127);
        assert_eq!(quantize_value(-1.7, &p(0.5, 8)).unwrap(), -3);
    }

    #[test]
    fn rounding_is_half_to_even() {
        assert_eq!(quantize_value(2.5, &p(1.0, 8)).unwrap(), 2);
        assert_eq!(quantize_value(3.5, &p(1.0, 8)).unwrap(), 4);
        assert_eq!(quantize_value(-2.5, &p(1.0, 8)).unwrap(), -2);
    }

    #[test]
    fn non_finite_rejected() {
        let params = p(1.0, 8);
        assert!(matches!(quantize_value(f64::NAN, &params), Err(Error::NonFinite)));
        assert!(matches!(
            quantize_value(f64::INFINITY, &params),
            Err(Error::NonFinite)
        ));
        assert!(TensorView::from_vec(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn dequantize_value_examples() {
        assert_eq!(dequantize_value(2, &p(0.5, 8)).unwrap(), 1.0);
        assert_eq!(dequantize_value(0, &p(7.3, 8)).unwrap(), 0.0);
        assert_eq!(dequantize_value(-127, &p(0.01, 8)).unwrap(), -127.0 * 0.01);
        assert!((dequantize_value(-127, &p(0.01, 8)).unwrap() + 1.27).abs() < 1e-15);
        assert!(matches!(
            dequantize_value(128, &p(1.0, 8)),
            Err(Error::OutOfRange { .. })
        ));
        assert!(dequantize_value(-128, &p(1.0, 8)).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(QuantParams::new(0.0, 8).is_err());
        assert!(QuantParams::new(-1.0, 8).is_err());
        assert!(QuantParams::new(f64::INFINITY, 8).is_err());
        assert!(QuantParams::new(1.0, 1).is_err());
        assert!(QuantParams::new(1.0, 17).is_err());
        let q = p(1.0, 16);
        assert_eq!(q.qmax(), 32767);
        assert_eq!(q.zero_point(), 0);
        assert_eq!(p(1.0, 2).qmax(), 1);
    }

    #[test]
    fn fake_quantize_examples() {
        let zeros = TensorView::zeros(vec![3, 4]);
        assert_eq!(fake_quantize(&zeros, &p(0.37, 5)), zeros);

        let t = TensorView::from_vec(vec![-1.7]).unwrap();
        assert_eq!(fake_quantize(&t, &p(0.5, 8)).data(), &[-1.5]);
    }

    #[test]
    fn fake_quantize_error_bound_on_uniform_sample() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let params = p(1.0 / 127.0, 8);
        let t = TensorView::from_vec(data.clone()).unwrap();
        let out = fake_quantize(&t, &params);
        assert_eq!(out.shape(), t.shape());
        for (x, y) in data.iter().zip(out.data()) {
            let q = (y / params.scale()).round();
            assert_eq!(q * params.scale(), *y, "output is not a multiple of the scale");
            assert!(y.abs() <= params.range());
            if x.abs() <= params.range() {
                assert!((x - y).abs() <= params.scale() / 2.0 + 1e-15, "{x} -> {y}");
            }
        }
    }

    #[test]
    fn quantize_weights_max_example() {
        let w = TensorView::from_vec(vec![-3.0, 1.0, 2.0]).unwrap();
        let (q, calib) = quantize_weights(&w, 8, CalibMethod::Max).unwrap();
        assert_eq!(calib.scale, 3.0 / 127.0);
        assert_eq!(q.data(), &[-127, 42, 85]);
        assert!(!calib.degenerate);
    }

    #[test]
    fn quantize_weights_all_zero_is_degenerate() {
        for bits in [2, 8, 16] {
            let w = TensorView::zeros(vec![16]);
            let (q, calib) = quantize_weights(&w, bits, CalibMethod::Mse).unwrap();
            assert_eq!(calib.scale, 1.0);
            assert!(calib.degenerate);
            assert!(q.data().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn quantize_weights_rejects_empty() {
        let w = TensorView::from_vec(vec![]).unwrap();
        assert!(quantize_weights(&w, 8, CalibMethod::Mse).is_err());
    }

    #[test]
    fn qtensor_dequantize_matches_fake_quantize() {
        let t = TensorView::new(vec![2, 2], vec![0.3, -0.9, 1.4, 2.2]).unwrap();
        let params = p(0.1, 4);
        assert_eq!(quantize_tensor(&t, &params).dequantize(), fake_quantize(&t, &params));
    }
}
