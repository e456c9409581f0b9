//! Deterministic desk-scale reference network.
//!
//! A stack of 1-D convolutions (GELU, optional per-frame normalization)
//! feeds a linear projection, single-head pre-norm attention blocks, and a
//! linear output layer. The first conv layer is a bank of Hann-windowed
//! bandpass filters spread over the token band; later conv layers pool over
//! time with one random weight per channel pair shared across taps. All
//! random draws come from a ChaCha8 stream keyed by the spec seed.
//! Per-channel standardization statistics and the output layer (a ridge
//! regression onto token labels) are fitted on a fixed probe set drawn from
//! the same seed, so the whole network is a pure function of its spec.
//!
//! Channel 0 of every conv layer is a sparse detector that fires on a small
//! fraction of frames, with its strongest responses matching the busiest
//! ordinary channel. An outlier gain `g` on a conv layer multiplies that
//! channel's pre-activation by `g` and divides the channel by `g` again right
//! after the activation quantization site, so the tensor seen by the
//! quantizer gains a rare tail `g` times larger than its bulk while the
//! downstream signal stays on its usual scale.

mod data;
mod ter;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use data::TokenBank;
pub use ter::{decode_greedy, levenshtein, token_error_rate, DevSet, TerEvaluator};

use crate::error::{Error, Result};
use crate::model::{LayerInfo, LayerKind, QuantizableModel};
use crate::quant::{fake_quantize, fake_quantize_in_place, QuantParams, TensorView};

const LN_EPS: f64 = 1e-5;
const PROBE_UTTERANCES: usize = 96;
const RIDGE: f64 = 1.0;
const TAP_NOISE: f64 = 0.2;
// Weight of the attention and FFN residual branches. The attention branch
// applies it after its quantization site.
const RESIDUAL_SCALE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefNetSpec {
    pub seed: u64,
    /// Waveform samples per utterance.
    pub input_len: usize,
    pub conv: Vec<ConvSpec>,
    pub attention_blocks: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub vocab: usize,
    /// Fraction of frames on which each conv layer's sparse channel fires.
    pub sparse_rate: f64,
    /// Conv layer id (`conv0`, ...) to outlier gain.
    pub outliers: BTreeMap<String, f64>,
}

impl Default for RefNetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            input_len: 2560,
            conv: vec![
                ConvSpec { channels: 16, kernel: 96, stride: 2, normalize: false },
                ConvSpec { channels: 32, kernel: 16, stride: 8, normalize: false },
                ConvSpec { channels: 32, kernel: 3, stride: 2, normalize: false },
            ],
            attention_blocks: 2,
            width: 32,
            ffn_width: 64,
            vocab: 16,
            sparse_rate: 0.03,
            outliers: BTreeMap::new(),
        }
    }
}

impl RefNetSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_outlier(mut self, layer: &str, gain: f64) -> Self {
        self.outliers.insert(layer.to_string(), gain);
        self
    }

    /// Frames produced for one utterance, or an error if the conv chain
    /// collapses to nothing.
    pub fn frames(&self) -> Result<usize> {
        let mut len = self.input_len;
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.channels < 2 {
                return Err(Error::Config(format!(
                    "conv{i}: kernel and stride must be positive and channels at least 2"
                )));
            }
            if len < c.kernel {
                return Err(Error::Config(format!(
                    "conv{i}: kernel {} longer than its {len}-frame input",
                    c.kernel
                )));
            }
            len = (len - c.kernel) / c.stride + 1;
        }
        Ok(len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.is_empty() {
            return Err(Error::Config("at least one conv layer is required".into()));
        }
        self.frames()?;
        if self.width == 0 || self.ffn_width == 0 {
            return Err(Error::Config("width and ffn_width must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if !(self.sparse_rate > 0.0 && self.sparse_rate < 0.5) {
            return Err(Error::Config(format!(
                "sparse_rate {} outside (0, 0.5)",
                self.sparse_rate
            )));
        }
        for (layer, &gain) in &self.outliers {
            let idx = layer
                .strip_prefix("conv")
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&i| i < self.conv.len());
            if idx.is_none() {
                return Err(Error::Config(format!("outlier gain on unknown conv layer `{layer}`")));
            }
            if !(gain.is_finite() && gain >= 1.0) {
                return Err(Error::Config(format!("outlier gain {gain} on `{layer}` must be >= 1")));
            }
        }
        Ok(())
    }

    /// Stride and receptive field of one output frame, in input samples.
    fn frame_geometry(&self) -> (usize, usize) {
        let mut stride = 1;
        let mut field = 1;
        for c in &self.conv {
            field += (c.kernel - 1) * stride;
            stride *= c.stride;
        }
        (stride, field)
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    full: TensorView,
    quant: Option<(QuantParams, TensorView)>,
}

impl Param {
    fn new(name: String, full: TensorView) -> Self {
        Self { name, full, quant: None }
    }

    fn data(&self) -> &[f64] {
        match &self.quant {
            Some((_, q)) => q.data(),
            None => self.full.data(),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    /// `[out, in, kernel]`
    weight: Param,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    normalize: bool,
    // Per-channel standardization `alpha * n + beta`, then the outlier gain.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gain: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Linear {
    /// `[in, out]`
    weight: Param,
    bias: Vec<f64>,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
pub struct RefNet {
    spec: RefNetSpec,
    convs: Vec<Conv>,
    proj: Linear,
    blocks: Vec<Block>,
    head: Linear,
    sites: Vec<LayerInfo>,
    act_quant: Vec<Option<QuantParams>>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044715 * x * x * x)))
}

fn layer_norm_rows(x: &mut [f64], width: usize) {
    for row in x.chunks_mut(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl Conv {
    /// Raw (pre-standardization) responses, `[frames, cout]`.
    fn respond(&self, x: &[f64], len: usize) -> (Vec<f64>, usize) {
        let out_len = (len - self.kernel) / self.stride + 1;
        // Reorder each kernel to `[kernel, cin]` so it lines up with a
        // contiguous input window.
        let w = self.weight.data();
        let span = self.cin * self.kernel;
        let mut wt = vec![0.0; self.cout * span];
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for kk in 0..self.kernel {
                    wt[co * span + kk * self.cin + ci] = w[co * span + ci * self.kernel + kk];
                }
            }
        }
        let mut u = vec![0.0; out_len * self.cout];
        for t in 0..out_len {
            let window = &x[t * self.stride * self.cin..][..span];
            for (co, wc) in wt.chunks_exact(span).enumerate() {
                u[t * self.cout + co] = dot(wc, window);
            }
        }
        if self.normalize {
            layer_norm_rows(&mut u, self.cout);
        }
        (u, out_len)
    }

    fn pre_activation(&self, u: &mut [f64]) {
        for row in u.chunks_mut(self.cout) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.gain[c] * (self.alpha[c] * *v + self.beta[c]);
            }
        }
    }

    fn undo_gain(&self, a: &mut [f64]) {
        for row in a.chunks_mut(self.cout) {
            for (c, v) in row.iter_mut().enumerate() {
                if self.gain[c] != 1.0 {
                    *v /= self.gain[c];
                }
            }
        }
    }
}

impl Linear {
    fn new(rng: &mut rand_chacha::ChaCha8Rng, name: String, din: usize, dout: usize, std: f64) -> Self {
        let w = TensorView::from_parts_unchecked(vec![din, dout], gaussian(rng, din * dout, std));
        Self {
            weight: Param::new(name, w),
            bias: vec![0.0; dout],
            din,
            dout,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = self.weight.data();
        let rows = x.len() / self.din;
        let mut y = Vec::with_capacity(rows * self.dout);
        for r in 0..rows {
            let xr = &x[r * self.din..(r + 1) * self.din];
            let start = y.len();
            y.extend_from_slice(&self.bias);
            let yr = &mut y[start..];
            for (i, &xv) in xr.iter().enumerate() {
                let wr = &w[i * self.dout..(i + 1) * self.dout];
                for (yv, &wv) in yr.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
        y
    }
}

impl Block {
    fn attend(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        layer_norm_rows(&mut h, width);
        let q = self.q.apply(&h);
        let k = self.k.apply(&h);
        let v = self.v.apply(&h);
        let frames = x.len() / width;
        let inv_sqrt = 1.0 / (width as f64).sqrt();
        let mut mixed = vec![0.0; x.len()];
        let mut scores = vec![0.0; frames];
        for t in 0..frames {
            let qt = &q[t * width..(t + 1) * width];
            let mut peak = f64::NEG_INFINITY;
            for (s, score) in scores.iter_mut().enumerate() {
                let ks = &k[s * width..(s + 1) * width];
                *score = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                peak = peak.max(*score);
            }
            let mut norm = 0.0;
            for score in scores.iter_mut() {
                *score = libm::exp(*score - peak);
                norm += *score;
            }
            let out = &mut mixed[t * width..(t + 1) * width];
            for (s, &weight) in scores.iter().enumerate() {
                let p = weight / norm;
                for (o, &vv) in out.iter_mut().zip(&v[s * width..(s + 1) * width]) {
                    *o += p * vv;
                }
            }
        }
        self.o.apply(&mixed)
    }

    fn feed_forward(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        layer_norm_rows(&mut h, width);
        let mut up = self.up.apply(&h);
        up.iter_mut().for_each(|v| *v = gelu(*v));
        self.down.apply(&up)
    }
}

impl RefNet {
    pub fn spec(&self) -> &RefNetSpec {
        &self.spec
    }

    pub fn token_bank(&self) -> TokenBank {
        TokenBank::new(self.spec.seed, self.spec.vocab)
    }

    /// Frames per utterance.
    pub fn frames(&self) -> usize {
        self.spec.frames().expect("spec validated at build time")
    }

    /// Scales the output layer's weights and bias. Clears any weight quantizer
    /// on it. Intended for diagnostics and tests.
    pub fn scale_head(&mut self, weight_factor: f64, bias_factor: f64) {
        let w = &mut self.head.weight;
        let data = w.full.data().iter().map(|v| v * weight_factor).collect();
        w.full = TensorView::from_parts_unchecked(w.full.shape().to_vec(), data);
        w.quant = None;
        self.head.bias.iter_mut().for_each(|b| *b *= bias_factor);
    }

    fn params(&self) -> impl Iterator<Item = &Param> {
        self.convs
            .iter()
            .map(|c| &c.weight)
            .chain(std::iter::once(&self.proj.weight))
            .chain(self.blocks.iter().flat_map(|b| {
                [&b.q.weight, &b.k.weight, &b.v.weight, &b.o.weight, &b.up.weight, &b.down.weight]
            }))
            .chain(std::iter::once(&self.head.weight))
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        let convs = self.convs.iter_mut().map(|c| &mut c.weight);
        let blocks = self.blocks.iter_mut().flat_map(|b| {
            [
                &mut b.q.weight,
                &mut b.k.weight,
                &mut b.v.weight,
                &mut b.o.weight,
                &mut b.up.weight,
                &mut b.down.weight,
            ]
        });
        convs
            .chain(std::iter::once(&mut self.proj.weight))
            .chain(blocks)
            .chain(std::iter::once(&mut self.head.weight))
            .find(|p| p.name == name)
    }

    fn site_index(&self, layer: &str) -> Result<usize> {
        self.sites
            .iter()
            .position(|s| s.id == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    fn site(&self, idx: usize, values: &mut [f64], observer: &mut dyn FnMut(usize, &[f64])) {
        if let Some(p) = &self.act_quant[idx] {
            fake_quantize_in_place(values, p);
        }
        observer(idx, values);
    }

    /// Runs the conv stack; returns `[frames, channels]` activations.
    fn conv_stack(
        &self,
        input: &[f64],
        observer: &mut dyn FnMut(usize, &[f64]),
    ) -> (Vec<f64>, usize) {
        let mut x = input.to_vec();
        let mut len = input.len();
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut u, out_len) = conv.respond(&x, len);
            conv.pre_activation(&mut u);
            u.iter_mut().for_each(|v| *v = gelu(*v));
            self.site(i, &mut u, observer);
            conv.undo_gain(&mut u);
            x = u;
            len = out_len;
        }
        (x, len)
    }

    /// Final normalized features fed to the output layer, `[frames, width]`.
    fn features(&self, input: &[f64], observer: &mut dyn FnMut(usize, &[f64])) -> Vec<f64> {
        let width = self.spec.width;
        let (c, _) = self.conv_stack(input, observer);
        let mut x = self.proj.apply(&c);
        let first_attn = self.convs.len();
        for (b, block) in self.blocks.iter().enumerate() {
            let mut a = block.attend(&x, width);
            self.site(first_attn + b, &mut a, observer);
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv += RESIDUAL_SCALE * av);
            let f = block.feed_forward(&x, width);
            x.iter_mut().zip(&f).for_each(|(xv, fv)| *xv += fv);
        }
        layer_norm_rows(&mut x, width);
        x
    }

    fn check_input(&self, input: &TensorView) -> Result<()> {
        match input.shape() {
            [n] if *n == self.spec.input_len => Ok(()),
            s => Err(Error::Shape(format!(
                "refnet expects input shape [{}], got {s:?}",
                self.spec.input_len
            ))),
        }
    }
}

/// Builds the network described by `spec`.
pub fn build_refnet(spec: &RefNetSpec) -> Result<RefNet> {
    spec.validate()?;
    let mut rng = data::rng(spec.seed, data::STREAM_WEIGHTS);
    let bank = TokenBank::new(spec.seed, spec.vocab);
    let probe = data::labelled(&bank, spec.seed, data::STREAM_PROBE, PROBE_UTTERANCES, spec.input_len);

    // Conv layers, standardized channel by channel on the probe set.
    let mut convs = Vec::with_capacity(spec.conv.len());
    let mut cin = 1;
    let mut xs: Vec<(Vec<f64>, usize)> =
        probe.iter().map(|(w, _)| (w.data().to_vec(), spec.input_len)).collect();
    for (i, cs) in spec.conv.iter().enumerate() {
        let fan_in = (cin * cs.kernel) as f64;
        let mut w = gaussian(&mut rng, cs.channels * cin * cs.kernel, 1.0 / fan_in.sqrt());
        if i == 0 {
            // Hann-windowed bandpass filters spread evenly over the token band.
            let k = cs.kernel;
            for c in 0..cs.channels {
                let f = data::slot_center(c, cs.channels);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for t in 0..k {
                    let hann = 0.5 - 0.5 * libm::cos(std::f64::consts::TAU * (t as f64 + 0.5) / k as f64);
                    let idx = c * cin * k + t;
                    w[idx] = hann * libm::cos(std::f64::consts::TAU * f * t as f64 + phase) * 2.0 / (k as f64).sqrt()
                        + TAP_NOISE * w[idx];
                }
            }
        } else {
            // Later layers pool over time: one random weight per channel pair
            // shared by all taps, plus a little per-tap noise.
            let shared = gaussian(&mut rng, cs.channels * cin, 1.0 / fan_in.sqrt());
            for (j, v) in w.iter_mut().enumerate() {
                *v = shared[j / cs.kernel] + TAP_NOISE * *v;
            }
        }
        let mut conv = Conv {
            weight: Param::new(
                format!("conv{i}.weight"),
                TensorView::from_parts_unchecked(vec![cs.channels, cin, cs.kernel], w),
            ),
            cin,
            cout: cs.channels,
            kernel: cs.kernel,
            stride: cs.stride,
            normalize: cs.normalize,
            alpha: vec![1.0; cs.channels],
            beta: vec![0.0; cs.channels],
            gain: vec![1.0; cs.channels],
        };
        let responses: Vec<(Vec<f64>, usize)> =
            xs.iter().map(|(x, len)| conv.respond(x, *len)).collect();
        let n: usize = responses.iter().map(|(_, l)| l).sum();
        let mut peak = 0.0f64;
        let mut sparse = Vec::new();
        for c in 0..conv.cout {
            let vals: Vec<f64> = responses
                .iter()
                .flat_map(|(u, _)| u.iter().skip(c).step_by(conv.cout).copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt().max(1e-12);
            conv.alpha[c] = 1.0 / std;
            conv.beta[c] = -mean / std;
            let z = vals.iter().map(|v| (v - mean) / std);
            if c == 0 {
                sparse = z.collect();
            } else {
                peak = z.fold(peak, f64::max);
            }
        }
        // The sparse channel fires on the top `sparse_rate` of probe frames
        // and its strongest responses reach the busiest ordinary channel's peak.
        sparse.sort_by(f64::total_cmp);
        let at = |q: f64| sparse[(q * (sparse.len() - 1) as f64).round() as usize];
        let onset = at(1.0 - spec.sparse_rate);
        let top = at(1.0 - spec.sparse_rate / 10.0);
        let stretch = peak / (top - onset).max(1e-12);
        conv.alpha[0] *= stretch;
        conv.beta[0] = (conv.beta[0] - onset) * stretch;
        if let Some(&g) = spec.outliers.get(&format!("conv{i}")) {
            conv.gain[0] = g;
        }
        xs = responses
            .into_iter()
            .map(|(mut u, len)| {
                conv.pre_activation(&mut u);
                u.iter_mut().for_each(|v| *v = gelu(*v));
                conv.undo_gain(&mut u);
                (u, len)
            })
            .collect();
        cin = cs.channels;
        convs.push(conv);
    }

    let d = spec.width;
    let proj = Linear::new(&mut rng, "proj.weight".into(), cin, d, 1.0 / (cin as f64).sqrt());
    let blocks = (0..spec.attention_blocks)
        .map(|b| {
            let s = 1.0 / (d as f64).sqrt();
            let sf = 1.0 / (spec.ffn_width as f64).sqrt();
            Block {
                q: Linear::new(&mut rng, format!("attn{b}.q"), d, d, s),
                k: Linear::new(&mut rng, format!("attn{b}.k"), d, d, s),
                v: Linear::new(&mut rng, format!("attn{b}.v"), d, d, s),
                o: Linear::new(&mut rng, format!("attn{b}.o"), d, d, s),
                up: Linear::new(&mut rng, format!("ffn{b}.up"), d, spec.ffn_width, s),
                down: Linear::new(&mut rng, format!("ffn{b}.down"), spec.ffn_width, d, RESIDUAL_SCALE * sf),
            }
        })
        .collect();

    let mut sites: Vec<LayerInfo> = (0..spec.conv.len())
        .map(|i| LayerInfo::new(format!("conv{i}"), LayerKind::Conv))
        .collect();
    sites.extend((0..spec.attention_blocks).map(|b| LayerInfo::new(format!("attn{b}"), LayerKind::Attention)));
    sites.push(LayerInfo::new("head", LayerKind::Linear));

    let mut net = RefNet {
        spec: spec.clone(),
        convs,
        proj,
        blocks,
        head: Linear {
            weight: Param::new("head.weight".into(), TensorView::zeros(vec![d, spec.vocab])),
            bias: vec![0.0; spec.vocab],
            din: d,
            dout: spec.vocab,
        },
        act_quant: vec![None; sites.len()],
        sites,
    };

    // Output layer: ridge regression of one-hot targets on the probe
    // features, labelled by the token under each frame's receptive-field center.
    let (stride, field) = spec.frame_geometry();
    let mut gram = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut cross = DMatrix::<f64>::zeros(d + 1, spec.vocab);
    for (wave, labels) in &probe {
        let f = net.features(wave.data(), &mut |_, _| {});
        for (t, row) in f.chunks(d).enumerate() {
            let token = labels[(t * stride + field / 2).min(labels.len() - 1)];
            let z = DVector::from_iterator(d + 1, row.iter().copied().chain(std::iter::once(1.0)));
            gram.ger(1.0, &z, &z, 1.0);
            for i in 0..=d {
                cross[(i, token)] += z[i];
            }
        }
    }
    for i in 0..d {
        gram[(i, i)] += RIDGE;
    }
    let solution = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("singular probe features".into()))?
        .solve(&cross);
    let mut head_w = vec![0.0; d * spec.vocab];
    for k in 0..spec.vocab {
        for i in 0..d {
            head_w[i * spec.vocab + k] = solution[(i, k)];
        }
        net.head.bias[k] = solution[(d, k)];
    }
    net.head.weight.full = TensorView::from_parts_unchecked(vec![d, spec.vocab], head_w);
    Ok(net)
}

impl QuantizableModel for RefNet {
    fn layers(&self) -> Vec<LayerInfo> {
        self.sites.clone()
    }

    fn weight_names(&self) -> Vec<String> {
        self.params().map(|p| p.name.clone()).collect()
    }

    fn weight(&self, name: &str) -> Result<&TensorView> {
        self.params()
            .find(|p| p.name == name)
            .map(|p| &p.full)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    fn set_activation_quant(&mut self, layer: &str, params: Option<QuantParams>) -> Result<()> {
        let idx = self.site_index(layer)?;
        self.act_quant[idx] = params;
        Ok(())
    }

    fn set_weight_quant(&mut self, name: &str, params: Option<QuantParams>) -> Result<()> {
        let p = self
            .param_mut(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        p.quant = params.map(|q| (q, fake_quantize(&p.full, &q)));
        Ok(())
    }

    fn reset(&mut self) {
        self.act_quant.iter_mut().for_each(|q| *q = None);
        let names = self.weight_names();
        for n in names {
            if let Some(p) = self.param_mut(&n) {
                p.quant = None;
            }
        }
    }

    fn is_full_precision(&self) -> bool {
        self.act_quant.iter().all(Option::is_none) && self.params().all(|p| p.quant.is_none())
    }

    fn forward_observed(
        &self,
        input: &TensorView,
        observer: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<TensorView> {
        self.check_input(input)?;
        let feats = self.features(input.data(), observer);
        let mut logits = self.head.apply(&feats);
        let head_site = self.sites.len() - 1;
        self.site(head_site, &mut logits, observer);
        let frames = logits.len() / self.spec.vocab;
        Ok(TensorView::from_parts_unchecked(vec![frames, self.spec.vocab], logits))
    }
}
