//! Contracts between the calibration search and the network it tunes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quant::{QuantParams, TensorView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Attention,
    Linear,
    Other,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Attention => "attention",
            LayerKind::Linear => "linear",
            LayerKind::Other => "other",
        })
    }
}

/// One activation quantization site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub kind: LayerKind,
}

impl LayerInfo {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            kind,
        }
    }
}

/// A network with per-site activation fake-quantizers and per-tensor weight
/// fake-quantizers.
///
/// With every quantizer cleared, `forward` must reproduce the full-precision
/// network bit-exactly. Attaching a quantizer affects only the named site or
/// tensor. Implementations are cloned to give parallel workers private
/// configurations.
pub trait QuantizableModel: Clone + Send + Sync {
    /// Activation sites in forward order.
    fn layers(&self) -> Vec<LayerInfo>;

    /// Names of the quantizable weight tensors, in a fixed order.
    fn weight_names(&self) -> Vec<String>;

    /// Full-precision weight tensor by name.
    fn weight(&self, name: &str) -> Result<&TensorView>;

    fn set_activation_quant(&mut self, layer: &str, params: Option<QuantParams>) -> Result<()>;

    fn set_weight_quant(&mut self, name: &str, params: Option<QuantParams>) -> Result<()>;

    /// Clears every quantizer.
    fn reset(&mut self);

    /// True when no quantizer is attached.
    fn is_full_precision(&self) -> bool;

    fn forward(&self, input: &TensorView) -> Result<TensorView> {
        self.forward_observed(input, &mut |_, _| {})
    }

    /// Forward pass that reports every activation site's output (after its
    /// quantizer, if any) as `(site index, values)`.
    fn forward_observed(
        &self,
        input: &TensorView,
        observer: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<TensorView>;
}

/// Scores a model configuration; lower is better, in percent.
pub trait Evaluator<M>: Sync {
    fn evaluate(&self, model: &M) -> Result<f64>;
}
