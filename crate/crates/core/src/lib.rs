//! Post-training quantization calibration toolkit.
//!
//! Per-tensor symmetric fake quantization ([`quant`]), streaming
//! absolute-value histograms ([`histogram`]), histogram calibrators including
//! the fused percentile-clip + MSE scale search ([`calibrators`]), the
//! layer-adaptive two-stage search ([`search`]), a deterministic reference
//! network with a token-error-rate evaluator ([`refnet`]), method comparison
//! ([`pipeline`]) and the on-disk formats ([`dataio`]).

pub mod calibrators;
pub mod dataio;
pub mod error;
pub mod histogram;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod refnet;
pub mod search;

pub use calibrators::{CalibMethod, CalibResult};
pub use error::{Error, Result};
pub use histogram::{ActivationHistogram, HistogramCollector};
pub use model::{Evaluator, LayerInfo, LayerKind, QuantizableModel};
pub use quant::{QTensor, QuantParams, TensorView};
pub use search::{SearchConfig, SearchReport};

use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when asked, preserving input order.
pub(crate) fn ordered_map<T, R, F>(parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}
