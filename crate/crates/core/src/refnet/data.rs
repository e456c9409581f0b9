//! Synthetic "speech": waveforms built from a fixed bank of token sounds.
//!
//! Every token owns one tone on an evenly spaced frequency grid, jittered and
//! given an amplitude drawn once from the network seed.
//! An utterance concatenates randomly chosen token segments of random length,
//! with random per-segment phase, a random utterance gain, and white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::quant::TensorView;

// ChaCha stream ids keep the independent random streams of one seed apart.
pub(crate) const STREAM_WEIGHTS: u64 = 0;
pub(crate) const STREAM_PROBE: u64 = 1;
pub(crate) const STREAM_BANK: u64 = 2;
pub(crate) const STREAM_DATA: u64 = 3;

const SEGMENT_MIN: usize = 640;
const SEGMENT_MAX: usize = 1280;
const NOISE_STD: f64 = 0.05;
pub(crate) const BAND: (f64, f64) = (0.04, 0.44);

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone)]
struct Partial {
    freq: f64,
    amp: f64,
}

/// Center of slot `k` when `band` is split into `n` equal slots.
pub(crate) fn slot_center(k: usize, n: usize) -> f64 {
    BAND.0 + (k as f64 + 0.5) * (BAND.1 - BAND.0) / n as f64
}

/// The per-token sound table of one network seed.
#[derive(Debug, Clone)]
pub struct TokenBank {
    tones: Vec<Partial>,
}

impl TokenBank {
    pub fn new(seed: u64, vocab: usize) -> Self {
        let mut r = rng(seed, STREAM_BANK);
        let spacing = (BAND.1 - BAND.0) / vocab as f64;
        let tones = (0..vocab)
            .map(|k| Partial {
                freq: slot_center(k, vocab) + r.random_range(-0.1..0.1) * spacing,
                amp: r.random_range(0.6..1.0),
            })
            .collect();
        Self { tones }
    }

    pub fn vocab(&self) -> usize {
        self.tones.len()
    }

    /// One utterance of `len` samples plus the token label of every sample.
    pub fn utterance(&self, r: &mut ChaCha8Rng, len: usize) -> (Vec<f64>, Vec<usize>) {
        let noise = Normal::new(0.0, NOISE_STD).expect("valid noise std");
        let gain = r.random_range(0.7..1.3);
        let mut wave = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        while wave.len() < len {
            let token = r.random_range(0..self.vocab());
            let seg = r.random_range(SEGMENT_MIN..=SEGMENT_MAX).min(len - wave.len());
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let tone = &self.tones[token];
            for n in 0..seg {
                let v = tone.amp * libm::sin(std::f64::consts::TAU * tone.freq * n as f64 + phase);
                wave.push(gain * v + noise.sample(r));
                labels.push(token);
            }
        }
        (wave, labels)
    }
}

/// `count` labelled utterances drawn from `(network seed, data seed)` on `stream`.
pub(crate) fn labelled(
    bank: &TokenBank,
    data_seed: u64,
    stream: u64,
    count: usize,
    len: usize,
) -> Vec<(TensorView, Vec<usize>)> {
    let mut r = rng(data_seed, stream);
    (0..count)
        .map(|_| {
            let (wave, labels) = bank.utterance(&mut r, len);
            (
                TensorView::from_parts_unchecked(vec![len], wave),
                labels,
            )
        })
        .collect()
}
