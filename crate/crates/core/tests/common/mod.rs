#![allow(dead_code)]

use ptqcal_core::refnet::{build_refnet, DevSet, RefNet, RefNetSpec};
use ptqcal_core::TensorView;

pub const CALIB: usize = 128;
pub const DEV: usize = 64;

pub fn rigged(seed: u64) -> RefNetSpec {
    RefNetSpec::default()
        .with_seed(seed)
        .with_outlier("conv0", 50.0)
        .with_outlier("conv2", 50.0)
}

pub struct Setup {
    pub net: RefNet,
    pub calib: Vec<TensorView>,
    pub dev: DevSet,
}

/// Network plus calibration and dev splits, seeded as the CLI does.
pub fn setup(spec: &RefNetSpec, dev: usize) -> Setup {
    let net = build_refnet(spec).unwrap();
    let calib = DevSet::waveforms(&net, spec.seed + 1000, CALIB);
    let dev = DevSet::generate(&net, spec.seed + 2000, dev).unwrap();
    Setup { net, calib, dev }
}

pub fn test_split(s: &Setup, count: usize) -> DevSet {
    DevSet::generate(&s.net, s.net.spec().seed + 3000, count).unwrap()
}

use ptqcal_core::quant::fake_quantize_in_place;
use ptqcal_core::refnet::{decode_greedy, TerEvaluator};
use ptqcal_core::{Error, LayerInfo, LayerKind, QuantParams, QuantizableModel, Result};

/// A chain of scalar gains, one activation site after each, whose output is
/// read as `[frames, vocab]` logits.
#[derive(Debug, Clone)]
pub struct Chain {
    pub vocab: usize,
    gains: Vec<TensorView>,
    weight_quant: Vec<Option<QuantParams>>,
    act_quant: Vec<Option<QuantParams>>,
}

impl Chain {
    pub fn new(gains: &[f64], vocab: usize) -> Self {
        Self {
            vocab,
            gains: gains.iter().map(|&g| TensorView::from_vec(vec![g]).unwrap()).collect(),
            weight_quant: vec![None; gains.len()],
            act_quant: vec![None; gains.len()],
        }
    }

    fn index(&self, name: &str, prefix: &str) -> Result<usize> {
        name.strip_prefix(prefix)
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < self.gains.len())
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }
}

impl QuantizableModel for Chain {
    fn layers(&self) -> Vec<LayerInfo> {
        (0..self.gains.len()).map(|i| LayerInfo::new(format!("site{i}"), LayerKind::Linear)).collect()
    }

    fn weight_names(&self) -> Vec<String> {
        (0..self.gains.len()).map(|i| format!("gain{i}")).collect()
    }

    fn weight(&self, name: &str) -> Result<&TensorView> {
        Ok(&self.gains[self.index(name, "gain")?])
    }

    fn set_activation_quant(&mut self, layer: &str, params: Option<QuantParams>) -> Result<()> {
        let i = self.index(layer, "site")?;
        self.act_quant[i] = params;
        Ok(())
    }

    fn set_weight_quant(&mut self, name: &str, params: Option<QuantParams>) -> Result<()> {
        let i = self.index(name, "gain")?;
        self.weight_quant[i] = params;
        Ok(())
    }

    fn reset(&mut self) {
        self.act_quant.iter_mut().for_each(|q| *q = None);
        self.weight_quant.iter_mut().for_each(|q| *q = None);
    }

    fn is_full_precision(&self) -> bool {
        self.act_quant.iter().chain(&self.weight_quant).all(Option::is_none)
    }

    fn forward_observed(
        &self,
        input: &TensorView,
        observer: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<TensorView> {
        if input.len() % self.vocab != 0 {
            return Err(Error::Shape(format!("length {} not a multiple of {}", input.len(), self.vocab)));
        }
        let mut x = input.data().to_vec();
        for i in 0..self.gains.len() {
            let mut g = self.gains[i].data().to_vec();
            if let Some(p) = &self.weight_quant[i] {
                fake_quantize_in_place(&mut g, p);
            }
            x.iter_mut().for_each(|v| *v *= g[0]);
            if let Some(p) = &self.act_quant[i] {
                fake_quantize_in_place(&mut x, p);
            }
            observer(i, &x);
        }
        TensorView::new(vec![x.len() / self.vocab, self.vocab], x)
    }
}

/// Teacher-referenced evaluator over `inputs`.
pub fn teacher<M: QuantizableModel>(model: &M, inputs: Vec<TensorView>) -> TerEvaluator {
    let references = inputs
        .iter()
        .map(|x| decode_greedy(&model.forward(x).unwrap()).unwrap())
        .collect();
    TerEvaluator::new(inputs, references, false).unwrap()
}
