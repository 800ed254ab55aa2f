//! VGG-style convolutional front end.
//!
//! Four blocks of `conv3x3 -> ReLU -> conv3x3 -> ReLU -> maxpool 2x2`
//! turn a `[frames, n_mels]` spectrogram into `[frames/16, M * n_mels/16]`,
//! where `M` is the last block's channel count and the halvings floor.
//!
//! Receptive field along time: final row `r` depends on input frames
//! `16r - 30 ..= 16r + 45`. Walking back from the output, a pool maps rows
//! `[a, b]` to `[2a, 2b + 1]` and a conv pair widens `[a, b]` to
//! `[a - 2, b + 2]`:
//!
//! ```text
//! [r, r] -> [2r-2, 2r+3] -> [4r-6, 4r+9] -> [8r-14, 8r+21] -> [16r-30, 16r+45]
//! ```
//!
//! So editing a 16-frame block starting at `16q` can touch rows `q-2..=q+2`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;
/// Total time/frequency downsampling of the encoder.
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of each block; the input has one channel.
    pub channels: [usize; NUM_BLOCKS],
    pub n_mels: usize,
}

impl EncoderConfig {
    /// Block widths `c, 2c, 4c, 8c`.
    pub fn doubling(base: usize, n_mels: usize) -> Self {
        EncoderConfig {
            channels: [base, 2 * base, 4 * base, 8 * base],
            n_mels,
        }
    }

    /// The full-size front end: 128, 256, 512, 1024 channels over 80 mels.
    pub fn full_scale() -> Self {
        Self::doubling(128, 80)
    }

    pub fn final_channels(&self) -> usize {
        self.channels[NUM_BLOCKS - 1]
    }

    /// Frequency extent after the four poolings.
    pub fn final_freq(&self) -> Result<usize> {
        if self.n_mels % DOWNSAMPLE != 0 || self.n_mels == 0 {
            return Err(Error::config(format!(
                "n_mels {} must be a positive multiple of {DOWNSAMPLE}",
                self.n_mels
            )));
        }
        Ok(self.n_mels / DOWNSAMPLE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("encoder channel counts must be positive"));
        }
        self.final_freq().map(|_| ())
    }
}

/// Hidden-state size `D = M * D'`.
pub fn output_dim(cfg: &EncoderConfig) -> Result<usize> {
    Ok(cfg.final_channels() * cfg.final_freq()?)
}

/// Sequence length after four floor-halvings.
pub fn output_len(frames: usize) -> usize {
    (0..NUM_BLOCKS).fold(frames, |n, _| n / 2)
}

/// Output rows that can change when input frames `first..=last` change.
pub fn affected_rows(first: usize, last: usize, out_len: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (first as isize - 45).max(0) as usize;
    let lo = lo.div_ceil(DOWNSAMPLE);
    let hi = ((last + 30) / DOWNSAMPLE).min(out_len.saturating_sub(1));
    lo..=hi
}

/// `T x D` hidden-state sequence for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence(Tensor);

impl EncodedSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(Error::shape("encoded_sequence", format!("expected [T, D], got {:?}", t.shape())));
        }
        Ok(EncodedSequence(t))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `[1, T, D]` batch of one.
    pub fn to_batch(&self) -> Tensor {
        self.0.reshape(&[1, self.len(), self.dim()]).expect("batch reshape")
    }
}

fn conv_name(block: usize, conv: usize, what: &str) -> String {
    format!("encoder.block{}.conv{}.{what}", block + 1, conv + 1)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        output_dim(&self.cfg).expect("validated")
    }

    /// He-normal conv weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut in_c = 1;
        for (b, &out_c) in self.cfg.channels.iter().enumerate() {
            for conv in 0..2 {
                let fan_in = in_c * 9;
                let w = Tensor::randn(&[out_c, in_c, 3, 3], (2.0 / fan_in as f64).sqrt(), rng);
                store.insert(conv_name(b, conv, "weight"), w, true);
                store.insert(conv_name(b, conv, "bias"), Tensor::zeros(&[out_c]), true);
                in_c = out_c;
            }
        }
    }

    /// `x: [N, 1, frames, n_mels]` to `[N, frames/16, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[3] != self.cfg.n_mels {
            return Err(Error::shape(
                "encoder",
                format!("expected [N, 1, frames, {}], got {s:?}", self.cfg.n_mels),
            ));
        }
        if s[2] < DOWNSAMPLE {
            return Err(Error::TooShort(format!(
                "utterance too short for {DOWNSAMPLE}x downsampling: {} frames, need at least {DOWNSAMPLE}",
                s[2]
            )));
        }
        let mut h = x;
        for b in 0..NUM_BLOCKS {
            for conv in 0..2 {
                let w = p.var(&conv_name(b, conv, "weight"));
                let bias = p.var(&conv_name(b, conv, "bias"));
                h = g.conv2d_same(h, w, bias)?;
                h = g.relu(h);
            }
            h = g.maxpool2x2(h)?;
        }
        g.channels_to_sequence(h)
    }

    /// Encodes one (already normalized) spectrogram.
    pub fn encode(&self, mel: &MelSpectrogram, params: &ParamStore) -> Result<EncodedSequence> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(mel.to_tensor());
        let out = self.forward(&mut g, &p, x)?;
        let v = g.value(out);
        EncodedSequence::new(v.reshape(&[v.shape()[1], v.shape()[2]])?)
    }
}
