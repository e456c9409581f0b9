//! Greedy decoding and token error rate.

use crate::error::{Error, Result};
use crate::model::{Evaluator, QuantizableModel};
use crate::ordered_map;
use crate::quant::TensorView;

use super::data::{self, STREAM_DATA};
use super::RefNet;

/// Per-frame argmax over `[frames, vocab]` logits; ties go to the lower index.
pub fn decode_greedy(logits: &TensorView) -> Result<Vec<usize>> {
    let vocab = match logits.shape() {
        [_, v] if *v > 0 => *v,
        s => return Err(Error::Shape(format!("expected [frames, vocab] logits, got {s:?}"))),
    };
    Ok(logits
        .data()
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 * edit_distance / |reference|`.
pub fn token_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Evaluation("empty reference".into()));
    }
    Ok(100.0 * levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Evaluation inputs with references decoded by the full-precision network.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub seed: u64,
    pub inputs: Vec<TensorView>,
    pub references: Vec<Vec<usize>>,
}

impl DevSet {
    /// Waveforms only, e.g. for calibration.
    pub fn waveforms(net: &RefNet, seed: u64, count: usize) -> Vec<TensorView> {
        data::labelled(&net.token_bank(), seed, STREAM_DATA, count, net.spec().input_len)
            .into_iter()
            .map(|(w, _)| w)
            .collect()
    }

    /// `count` utterances from `seed`, referenced by `net` with all quantizers
    /// cleared.
    pub fn generate(net: &RefNet, seed: u64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("dataset must hold at least one utterance".into()));
        }
        let mut teacher = net.clone();
        teacher.reset();
        let inputs = Self::waveforms(net, seed, count);
        let references = inputs
            .iter()
            .map(|x| decode_greedy(&teacher.forward(x)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, inputs, references })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn evaluator(&self, parallel: bool) -> TerEvaluator {
        TerEvaluator {
            inputs: self.inputs.clone(),
            references: self.references.clone(),
            parallel,
        }
    }
}

/// Mean token error rate of greedy decodes against fixed references.
#[derive(Debug, Clone)]
pub struct TerEvaluator {
    inputs: Vec<TensorView>,
    references: Vec<Vec<usize>>,
    parallel: bool,
}

impl TerEvaluator {
    pub fn new(inputs: Vec<TensorView>, references: Vec<Vec<usize>>, parallel: bool) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != references.len() {
            return Err(Error::Config(format!(
                "{} inputs for {} references",
                inputs.len(),
                references.len()
            )));
        }
        Ok(Self { inputs, references, parallel })
    }
}

impl<M: QuantizableModel> Evaluator<M> for TerEvaluator {
    fn evaluate(&self, model: &M) -> Result<f64> {
        let idx: Vec<usize> = (0..self.inputs.len()).collect();
        let per_utt = ordered_map(self.parallel, &idx, |&i| {
            let hyp = decode_greedy(&model.forward(&self.inputs[i])?)?;
            token_error_rate(&self.references[i], &hyp)
        });
        let mut sum = 0.0;
        for r in per_utt {
            sum += r?;
        }
        Ok(sum / self.inputs.len() as f64)
    }
}
