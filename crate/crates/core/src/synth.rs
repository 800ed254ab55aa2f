//! Deterministic synthetic speaker corpus.
//!
//! Each speaker has a fundamental frequency, a formant envelope and a
//! spectral tilt. An utterance is a train of voiced syllables: a harmonic
//! source whose partials are weighted by the speaker envelope, with
//! per-utterance jitter on f0 and formants, a per-syllable pitch contour,
//! a random channel (gain and first-order filter) and white noise at a fixed
//! SNR.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::Trial;
use crate::features::write_wav;
use crate::par;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub snr_db: f64,
    /// Minimum speaker distance, see [`speaker_distance`].
    pub min_margin: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 16,
            utts_per_speaker: 10,
            duration_s: 4.0,
            sample_rate: 16000,
            snr_db: 20.0,
            min_margin: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 speakers, got {}",
                self.num_speakers
            )));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::invalid("utts_per_speaker must be positive"));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }
}

/// A resonance of the speaker envelope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub f0: f64,
    pub formants: Vec<Formant>,
    /// Source roll-off in dB per octave (negative).
    pub tilt_db_per_octave: f64,
    /// Standard deviation of the per-utterance log-f0 offset.
    pub f0_jitter: f64,
    /// Standard deviation of per-utterance log-formant offsets.
    pub formant_jitter: f64,
}

impl SyntheticSpeaker {
    /// Envelope gain at `hz` with formant centres scaled by `warp`.
    pub fn envelope(&self, hz: f64, warp: &[f64]) -> f64 {
        let tilt = (hz / 100.0).max(1e-3).powf(self.tilt_db_per_octave / (20.0 * 2f64.log10()));
        if self.formants.is_empty() {
            return tilt;
        }
        let res: f64 = self
            .formants
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let c = f.center_hz * warp.get(i).copied().unwrap_or(1.0);
                let x = (hz - c) / f.bandwidth_hz;
                1.0 / (1.0 + x * x)
            })
            .sum();
        tilt * (0.03 + res)
    }

    /// Per-harmonic gains for fundamental `f0` up to `max_hz`.
    pub fn harmonic_gains(&self, f0: f64, max_hz: f64, warp: &[f64]) -> Vec<f64> {
        (1..)
            .map(|h| h as f64 * f0)
            .take_while(|&f| f < max_hz)
            .map(|f| self.envelope(f, warp))
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        let mut v = vec![self.f0.ln() / 0.08];
        v.extend(self.formants.iter().map(|f| f.center_hz.ln() / 0.1));
        v
    }
}

/// L1 distance between speakers in log-f0 (units of 8%) and log-formant
/// (units of 10%) space.
pub fn speaker_distance(a: &SyntheticSpeaker, b: &SyntheticSpeaker) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Draws `cfg.num_speakers` speakers, rejecting candidates closer than
/// `cfg.min_margin` to an accepted one.
pub fn sample_speakers(cfg: &SynthConfig) -> Result<Vec<SyntheticSpeaker>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "synth/speakers");
    let mut out: Vec<SyntheticSpeaker> = Vec::with_capacity(cfg.num_speakers);
    let mut tries = 0;
    while out.len() < cfg.num_speakers {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::invalid(format!(
                "cannot place {} speakers {} apart",
                cfg.num_speakers, cfg.min_margin
            )));
        }
        let cand = SyntheticSpeaker {
            id: speaker_id(out.len()),
            f0: log_uniform(&mut rng, 85.0, 260.0),
            formants: vec![
                Formant {
                    center_hz: log_uniform(&mut rng, 300.0, 900.0),
                    bandwidth_hz: 90.0,
                },
                Formant {
                    center_hz: log_uniform(&mut rng, 950.0, 2400.0),
                    bandwidth_hz: 120.0,
                },
                Formant {
                    center_hz: log_uniform(&mut rng, 2500.0, 3600.0),
                    bandwidth_hz: 180.0,
                },
            ],
            tilt_db_per_octave: rng.random_range(-12.0..-6.0),
            f0_jitter: 0.03,
            formant_jitter: 0.03,
        };
        if out.iter().all(|s| speaker_distance(s, &cand) >= cfg.min_margin) {
            out.push(cand);
        }
    }
    Ok(out)
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{i:03}")
}

pub fn utterance_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}-u{utt:03}")
}

/// Renders one utterance. `rng` should be the utterance's own stream.
pub fn synthesize<R: Rng + ?Sized>(
    speaker: &SyntheticSpeaker,
    num_samples: usize,
    sample_rate: u32,
    snr_db: f64,
    rng: &mut R,
) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let f0_utt = speaker.f0 * (speaker.f0_jitter * std_normal.sample(rng)).exp();
    let warp_utt: Vec<f64> = speaker
        .formants
        .iter()
        .map(|_| (speaker.formant_jitter * std_normal.sample(rng)).exp())
        .collect();
    let max_hz = (0.45 * sr).min(7000.0);

    let mut x = vec![0.0; num_samples];
    let mut pos = (rng.random_range(0.0..0.15) * sr) as usize;
    while pos < num_samples {
        let len = (rng.random_range(0.12..0.35) * sr) as usize;
        let end = (pos + len).min(num_samples);
        // vowel variety: small per-syllable formant movement
        let warp: Vec<f64> = warp_utt
            .iter()
            .map(|w| w * (0.05 * std_normal.sample(rng)).exp())
            .collect();
        let slope = rng.random_range(-0.12..0.12);
        let vib_rate = rng.random_range(4.0..6.5);
        let f0_syl = f0_utt * (0.03 * std_normal.sample(rng)).exp();
        let gains = speaker.harmonic_gains(f0_syl, max_hz, &warp);
        let ramp = (0.02 * sr) as usize;
        let mut phase = rng.random_range(0.0..2.0 * PI);
        let n = end - pos;
        for (k, s) in x[pos..end].iter_mut().enumerate() {
            let t = k as f64 / n as f64;
            let f = f0_syl * (1.0 + slope * (t - 0.5)) * (1.0 + 0.01 * (2.0 * PI * vib_rate * k as f64 / sr).sin());
            phase += 2.0 * PI * f / sr;
            let mut v = 0.0;
            for (h, g) in gains.iter().enumerate() {
                if (h + 1) as f64 * f >= max_hz {
                    break;
                }
                v += g * ((h + 1) as f64 * phase).sin();
            }
            let a = if k < ramp {
                0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos()
            } else if n - k < ramp {
                0.5 - 0.5 * (PI * (n - k) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            *s = a * v;
        }
        pos = end + (rng.random_range(0.04..0.15) * sr) as usize;
    }

    // channel: first-order filter and gain
    let a = rng.random_range(-0.6..0.6);
    let mut prev = 0.0;
    for s in x.iter_mut() {
        let cur = *s;
        *s = cur + a * prev;
        prev = cur;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / num_samples.max(1) as f64).sqrt();
    let gain = 10f64.powf(rng.random_range(-6.0..6.0) / 20.0);
    let scale = if rms > 0.0 { 0.05 * gain / rms } else { 0.0 };
    let signal_rms = if rms > 0.0 { 0.05 * gain } else { 0.05 };
    let noise = Normal::new(0.0, signal_rms / 10f64.powf(snr_db / 20.0)).expect("noise std");
    x.iter_mut()
        .map(|s| (*s * scale + noise.sample(rng)).clamp(-1.0, 1.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub utterance: String,
    pub path: PathBuf,
}

/// Tab-separated `speaker, utterance, wav path` listing. Relative paths are
/// resolved against the manifest's directory when loaded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
                return Err(Error::Parse {
                    what: "manifest",
                    line: i + 1,
                    reason: format!("expected speaker<TAB>utterance<TAB>path, got {line:?}"),
                });
            }
            let p = PathBuf::from(cols[2]);
            entries.push(ManifestEntry {
                speaker: cols[0].to_string(),
                utterance: cols[1].to_string(),
                path: if p.is_absolute() { p } else { base.join(p) },
            });
        }
        let m = Manifest { entries };
        m.check_unique()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id {}", e.utterance)));
            }
        }
        Ok(())
    }

    /// Text form with paths written relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            let _ = writeln!(s, "{}\t{}\t{}", e.speaker, e.utterance, p.display());
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text(path.parent().unwrap_or(Path::new("."))))?;
        Ok(())
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.iter().map(|e| e.speaker.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn find(&self, utterance: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance == utterance)
    }

    /// Splits off the last `per_speaker` utterances of every speaker (in
    /// manifest order). Returns `(kept, held_out)`.
    pub fn hold_out(&self, per_speaker: usize) -> Result<(Manifest, Manifest)> {
        let mut by_spk: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            by_spk.entry(&e.speaker).or_default().push(e);
        }
        let mut held = std::collections::HashSet::new();
        for (spk, list) in &by_spk {
            if list.len() <= per_speaker {
                return Err(Error::invalid(format!(
                    "speaker {spk} has {} utterances, cannot hold out {per_speaker}",
                    list.len()
                )));
            }
            for e in &list[list.len() - per_speaker..] {
                held.insert(e.utterance.as_str());
            }
        }
        let (a, b): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .cloned()
            .partition(|e| !held.contains(e.utterance.as_str()));
        Ok((Manifest { entries: a }, Manifest { entries: b }))
    }
}

/// Writes `cfg.num_speakers * cfg.utts_per_speaker` WAV files under
/// `out_dir/wav` and a `manifest.tsv` next to them.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let speakers = sample_speakers(cfg)?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir)?;
    let n = cfg.num_samples();
    let jobs: Vec<(usize, usize)> = (0..cfg.num_speakers)
        .flat_map(|s| (0..cfg.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    let results = par::map_slice(&jobs, |&(s, u)| -> Result<ManifestEntry> {
        let idx = (s * cfg.utts_per_speaker + u) as u64;
        let mut r = rng::indexed_stream(cfg.seed, "synth/utt", idx);
        let audio = synthesize(&speakers[s], n, cfg.sample_rate, cfg.snr_db, &mut r);
        let id = utterance_id(s, u);
        let path = wav_dir.join(format!("{id}.wav"));
        write_wav(&path, &audio, cfg.sample_rate)?;
        Ok(ManifestEntry {
            speaker: speakers[s].id.clone(),
            utterance: id,
            path,
        })
    });
    let manifest = Manifest {
        entries: results.into_iter().collect::<Result<_>>()?,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Samples distinct same-speaker and cross-speaker pairs. Pairs are
/// unordered and never pair an utterance with itself.
pub fn make_trials(manifest: &Manifest, num_target: usize, num_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    if manifest.speakers().len() < 2 {
        return Err(Error::invalid("trials need at least 2 speakers"));
    }
    let e = &manifest.entries;
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            if e[i].speaker == e[j].speaker {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if num_target > targets.len() {
        return Err(Error::invalid(format!(
            "requested {num_target} target trials but only {} available",
            targets.len()
        )));
    }
    if num_nontarget > nontargets.len() {
        return Err(Error::invalid(format!(
            "requested {num_nontarget} nontarget trials but only {} available",
            nontargets.len()
        )));
    }
    let mut r = rng::stream(seed, "synth/trials");
    let pick = |pool: &[(usize, usize)], k: usize, r: &mut rng::StreamRng, target: bool| -> Vec<Trial> {
        let mut idx = rand::seq::index::sample(r, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|p| {
                let (i, j) = pool[p];
                Trial {
                    target,
                    enroll: e[i].utterance.clone(),
                    test: e[j].utterance.clone(),
                }
            })
            .collect()
    };
    let mut trials = pick(&targets, num_target, &mut r, true);
    trials.extend(pick(&nontargets, num_nontarget, &mut r, false));
    trials.shuffle(&mut r);
    Ok(trials)
}

/// Every same-speaker pair and every cross-speaker pair.
pub fn all_trials(manifest: &Manifest) -> Result<Vec<Trial>> {
    let e = &manifest.entries;
    let nt = (0..e.len())
        .flat_map(|i| (i + 1..e.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| e[i].speaker == e[j].speaker)
        .count();
    let total = e.len() * e.len().saturating_sub(1) / 2;
    make_trials(manifest, nt, total - nt, 0).map(|mut t| {
        t.sort_by(|a, b| (&a.enroll, &a.test).cmp(&(&b.enroll, &b.test)));
        t
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(spk: usize, utts: usize) -> Manifest {
        Manifest {
            entries: (0..spk)
                .flat_map(|s| {
                    (0..utts).map(move |u| ManifestEntry {
                        speaker: speaker_id(s),
                        utterance: utterance_id(s, u),
                        path: PathBuf::from(format!("{s}-{u}.wav")),
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn one_speaker_rejected() {
        let cfg = SynthConfig {
            num_speakers: 1,
            ..SynthConfig::default()
        };
        assert!(sample_speakers(&cfg).is_err());
        assert!(make_trials(&manifest(1, 4), 1, 0, 0).is_err());
    }

    #[test]
    fn speakers_respect_margin() {
        let s = sample_speakers(&SynthConfig::default()).unwrap();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert!(speaker_distance(&s[i], &s[j]) >= 1.0);
            }
        }
    }

    #[test]
    fn trial_counts_and_limits() {
        let m = manifest(2, 2);
        let t = make_trials(&m, 2, 2, 5).unwrap();
        assert_eq!(t.iter().filter(|t| t.target).count(), 2);
        assert_eq!(t.iter().filter(|t| !t.target).count(), 2);
        let err = make_trials(&m, 3, 0, 5).unwrap_err().to_string();
        assert!(err.contains("only 2"), "{err}");
        assert!(make_trials(&m, 0, 5, 5).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let base = Path::new("/data/corpus");
        let mut m = manifest(2, 2);
        for e in &mut m.entries {
            e.path = base.join(&e.path);
        }
        let text = m.to_text(base);
        assert!(text.starts_with("spk000\tspk000-u000\t0-0.wav\n"));
        assert_eq!(Manifest::parse(&text, base).unwrap(), m);
        assert!(Manifest::parse("a\tb\n", base).is_err());
    }

    #[test]
    fn hold_out_splits_per_speaker() {
        let (a, b) = manifest(3, 5).hold_out(2).unwrap();
        assert_eq!((a.entries.len(), b.entries.len()), (9, 6));
        assert!(b.entries.iter().all(|e| e.utterance.ends_with("u003") || e.utterance.ends_with("u004")));
        assert!(manifest(3, 2).hold_out(2).is_err());
    }
}
