//! Log-mel spectrogram front end with cepstral mean normalization.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to filterbank energies before the natural log.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms at 16 kHz).
    pub win_length: usize,
    /// Window shift in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            win_length: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8_000.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::config(format!(
                "win_length {} must be in 1..=n_fft ({})",
                self.win_length, self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.win_length {
            return Err(Error::config(format!(
                "hop {} must be in 1..=win_length ({})",
                self.hop, self.win_length
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }
}

/// Number of full analysis windows in a signal; the tail is not padded.
pub fn frame_count(num_samples: usize, cfg: &FeatureConfig) -> Result<usize> {
    if num_samples < cfg.win_length {
        return Err(Error::TooShort(format!(
            "{num_samples} samples is shorter than one {}-sample window",
            cfg.win_length
        )));
    }
    Ok(1 + (num_samples - cfg.win_length) / cfg.hop)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi n / (L - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

/// Triangular filters on the HTK mel scale, `n_mels x (n_fft/2 + 1)`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    /// `n_mels + 2` band edges in Hz; filter `m` spans
    /// `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
    edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(cfg.sample_rate) / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Ok(MelFilterbank {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
            edges,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Center frequency of filter `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges
    }

    /// Filterbank energies of one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        debug_assert_eq!(power.len(), self.n_bins);
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// `frames x n_mels` log-energies, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, data: Vec<f64>) -> Result<Self> {
        if n_mels == 0 || data.len() % n_mels != 0 || data.is_empty() {
            return Err(Error::shape(
                "mel_spectrogram",
                format!("{} values for {n_mels} mel bins", data.len()),
            ));
        }
        Ok(MelSpectrogram { n_mels, data })
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.n_mels
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> MelSpectrogram {
        MelSpectrogram {
            n_mels: self.n_mels,
            data: self.data[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
        }
    }

    /// Per-coefficient mean over frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let n = self.num_frames() as f64;
        let mut mean = vec![0.0; self.n_mels];
        for t in 0..self.num_frames() {
            for (m, v) in mean.iter_mut().zip(self.frame(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// `[1, 1, frames, n_mels]` encoder input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.num_frames(), self.n_mels], self.data.clone())
            .expect("mel tensor shape")
    }
}

/// Cepstral mean normalization: subtract the per-coefficient mean over
/// frames. Variance is left untouched.
pub fn cmn(m: &MelSpectrogram) -> MelSpectrogram {
    let mean = m.mean_frame();
    let data = m
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v - mean[i % m.n_mels])
        .collect();
    MelSpectrogram {
        n_mels: m.n_mels,
        data,
    }
}

/// Reusable feature extractor (window, filterbank and FFT plan).
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    bank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        let bank = MelFilterbank::new(&cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(FeatureExtractor {
            window: hamming(cfg.win_length),
            bank,
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Log-mel energies before mean normalization.
    pub fn log_mel(&self, audio: &[f64], sample_rate: u32) -> Result<MelSpectrogram> {
        if sample_rate != self.cfg.sample_rate {
            return Err(Error::invalid(format!(
                "audio is {sample_rate} Hz but features expect {} Hz (no resampling)",
                self.cfg.sample_rate
            )));
        }
        let n = frame_count(audio.len(), &self.cfg)?;
        let n_bins = self.bank.n_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        let mut data = Vec::with_capacity(n * self.cfg.n_mels);
        for t in 0..n {
            let start = t * self.cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (s, w)) in audio[start..start + self.cfg.win_length]
                .iter()
                .zip(&self.window)
                .enumerate()
            {
                buf[i].re = s * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            data.extend(self.bank.apply(&power).into_iter().map(|e| e.max(ENERGY_FLOOR).ln()));
        }
        MelSpectrogram::new(self.cfg.n_mels, data)
    }

    /// Log-mel followed by CMN: the network input.
    pub fn features(&self, audio: &[f64], sample_rate: u32) -> Result<MelSpectrogram> {
        Ok(cmn(&self.log_mel(audio, sample_rate)?))
    }
}

/// Reads a 16-bit PCM mono WAV file as samples in `[-1, 1)`, returning the
/// samples and the sample rate. The sample rate is checked by the caller.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reject = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => reject(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(reject(format!(
            "expected 16-bit integer PCM, got {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(reject(format!("expected mono, got {} channels", spec.channels)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| reject(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Reads a WAV file and insists on the configured sample rate.
pub fn read_wav_checked(path: &Path, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let (samples, rate) = read_wav(path)?;
    if rate != cfg.sample_rate {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            reason: format!("expected {} Hz, got {rate} Hz", cfg.sample_rate),
        });
    }
    Ok(samples)
}

/// Writes samples in `[-1, 1]` as 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Audio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in samples {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_examples() {
        let cfg = FeatureConfig::default();
        assert_eq!(frame_count(400, &cfg).unwrap(), 1);
        assert_eq!(frame_count(560, &cfg).unwrap(), 2);
        assert_eq!(frame_count(16_000, &cfg).unwrap(), 98);
        assert!(matches!(frame_count(399, &cfg), Err(Error::TooShort(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FeatureConfig::default().validate().is_ok());
        let bad = FeatureConfig {
            win_length: 600,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FeatureConfig {
            fmax: 9_000.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FeatureConfig {
            hop: 500,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn hamming_is_symmetric_with_054_peak_shape() {
        let w = hamming(400);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[399] - 0.08).abs() < 1e-12);
        for i in 0..200 {
            assert!((w[i] - w[399 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn silence_hits_energy_floor() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let m = fx.log_mel(&vec![0.0; 4000], 16_000).unwrap();
        assert!(m.data().iter().all(|v| *v == ENERGY_FLOOR.ln()));
    }

    #[test]
    fn wrong_sample_rate_rejected() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        assert!(fx.log_mel(&vec![0.0; 4000], 8_000).is_err());
    }

    #[test]
    fn cmn_examples() {
        let constant = MelSpectrogram::new(3, vec![2.0; 12]).unwrap();
        assert!(cmn(&constant).data().iter().all(|v| *v == 0.0));
        let single = MelSpectrogram::new(4, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        assert!(cmn(&single).data().iter().all(|v| *v == 0.0));
    }
}
