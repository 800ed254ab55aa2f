//! Speaker-classification training.
//!
//! An epoch visits every training utterance once, in a seeded shuffled
//! order, taking one random fixed-length chunk from each. A trailing batch
//! smaller than two is dropped since batchnorm needs at least two samples.
//! After each epoch the classification loss on a held-back set of
//! utterances (same speakers) drives a step learning-rate schedule, and
//! the best-validation parameters are kept.
//!
//! All randomness comes from named streams of one seed, and the batch plan
//! of an epoch depends only on `(seed, epoch)`, so a run can be resumed
//! from any step.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, NormMode};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::features::{read_wav_checked, FeatureExtractor, MelSpectrogram};
use crate::head::update_running_stats;
use crate::model::{stack_mels, SpeakerModel};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;
use crate::par;
use crate::rng;
use crate::synth::Manifest;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub chunk_frames: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub anneal_patience: usize,
    pub anneal_factor: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            chunk_frames: 350,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-3,
            max_epochs: 100,
            anneal_patience: 15,
            anneal_factor: 0.5,
            validation_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames < DOWNSAMPLE {
            return Err(Error::config(format!(
                "chunk_frames must be at least {DOWNSAMPLE}, got {}",
                self.chunk_frames
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for batchnorm"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr and weight_decay must be non-negative"));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return Err(Error::config(format!(
                "anneal_factor must be in (0, 1), got {}",
                self.anneal_factor
            )));
        }
        if self.anneal_patience == 0 {
            return Err(Error::config("anneal_patience must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Random window of exactly `chunk` frames. Utterances shorter than the
/// chunk are first tiled by repetition.
pub fn sample_chunk<R: Rng + ?Sized>(mel: &MelSpectrogram, chunk: usize, rng: &mut R) -> MelSpectrogram {
    let t = mel.num_frames();
    let src = if t < chunk {
        let reps = chunk.div_ceil(t);
        let data: Vec<f64> = std::iter::repeat_n(mel.data(), reps).flatten().copied().collect();
        MelSpectrogram::new(mel.n_mels(), data).expect("tiled spectrogram")
    } else {
        mel.clone()
    };
    let start = rng.random_range(0..=src.num_frames() - chunk);
    src.window(start, chunk)
}

/// Step learning-rate annealing on a monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LrScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl LrScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        LrScheduler {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss. Returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return true;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    pub mel: MelSpectrogram,
}

/// Normalized features with integer speaker labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Labels follow the sorted order of speaker ids.
    pub fn new(items: Vec<(String, String, MelSpectrogram)>) -> Result<Self> {
        let mut speakers: Vec<String> = items.iter().map(|(s, _, _)| s.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let utterances = items
            .into_iter()
            .map(|(s, id, mel)| Utterance {
                id,
                label: speakers.binary_search(&s).expect("listed"),
                mel,
            })
            .collect();
        Ok(Dataset { speakers, utterances })
    }

    /// Reads and featurizes every manifest entry.
    pub fn load(fx: &FeatureExtractor, manifest: &Manifest) -> Result<Self> {
        let mels = par::map_slice(&manifest.entries, |e| -> Result<MelSpectrogram> {
            let audio = read_wav_checked(&e.path, fx.config())?;
            fx.features(&audio, fx.config().sample_rate)
        });
        let items = manifest
            .entries
            .iter()
            .zip(mels)
            .map(|(e, m)| Ok((e.speaker.clone(), e.utterance.clone(), m?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    fn check_trainable(&self) -> Result<()> {
        if self.num_speakers() < 2 {
            return Err(Error::invalid(format!(
                "training needs at least 2 speakers, got {}",
                self.num_speakers()
            )));
        }
        let mut counts = vec![0usize; self.num_speakers()];
        for u in &self.utterances {
            counts[u.label] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c < 2) {
            return Err(Error::invalid(format!(
                "speaker {} has {} utterance(s), need at least 2",
                self.speakers[i], counts[i]
            )));
        }
        Ok(())
    }

    /// Moves `max(1, round(fraction * n))` utterances of every speaker
    /// (at most `n - 1`) into a validation set, chosen by a seeded shuffle.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        self.check_trainable()?;
        let mut r = rng::stream(seed, "train/split");
        let mut val_idx = Vec::new();
        for label in 0..self.num_speakers() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.utterances[i].label == label).collect();
            let n = idx.len();
            let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            idx.shuffle(&mut r);
            val_idx.extend_from_slice(&idx[..k]);
        }
        val_idx.sort_unstable();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, u) in self.utterances.iter().enumerate() {
            if val_idx.binary_search(&i).is_ok() {
                val.push(u.clone());
            } else {
                train.push(u.clone());
            }
        }
        let mk = |utterances| Dataset {
            speakers: self.speakers.clone(),
            utterances,
        };
        Ok((mk(train), mk(val)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in log {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", e.epoch, e.train_loss, e.val_loss, e.lr);
    }
    s
}

/// Everything besides parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Steps already taken in the current epoch.
    pub cursor: usize,
    pub loss_sum: f64,
    pub scheduler: LrScheduler,
    pub adam: AdamState,
}

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";
const BEST_PREFIX: &str = "best/";

pub struct Trainer {
    run: RunConfig,
    model: SpeakerModel,
    state: TrainState,
    best: ParamStore,
    train: Dataset,
    val_batches: Vec<(Tensor, Vec<usize>)>,
    log: Vec<EpochLog>,
}

impl Trainer {
    /// `run.model.num_speakers` must match the dataset.
    pub fn new(run: RunConfig, train: Dataset, val: Dataset) -> Result<Self> {
        let model = SpeakerModel::init(run.model.clone(), run.train.seed)?;
        Self::with_model(run, model, train, val)
    }

    pub fn with_model(run: RunConfig, model: SpeakerModel, train: Dataset, val: Dataset) -> Result<Self> {
        run.validate()?;
        if train.num_speakers() != run.model.num_speakers || val.speakers != train.speakers {
            return Err(Error::config(format!(
                "model has {} classes but the data has {} speakers",
                run.model.num_speakers,
                train.num_speakers()
            )));
        }
        if train.len() < 2 || val.is_empty() {
            return Err(Error::invalid("need at least 2 training and 1 validation utterance"));
        }
        let val_batches = validation_batches(&run, &val)?;
        let state = TrainState {
            epoch: 0,
            cursor: 0,
            loss_sum: 0.0,
            scheduler: LrScheduler::new(run.train.lr, run.train.anneal_factor, run.train.anneal_patience),
            adam: AdamState::new(model.params()),
        };
        Ok(Trainer {
            best: model.params().clone(),
            run,
            model,
            state,
            train,
            val_batches,
            log: Vec::new(),
        })
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn model(&self) -> &SpeakerModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn lr(&self) -> f64 {
        self.state.scheduler.lr
    }

    /// Changes the epoch budget, e.g. to continue a finished run.
    pub fn set_max_epochs(&mut self, epochs: usize) {
        self.run.train.max_epochs = epochs;
    }

    pub fn done(&self) -> bool {
        self.state.epoch >= self.run.train.max_epochs
    }

    /// Utterance indices of each batch in `epoch`.
    pub fn epoch_plan(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::indexed_stream(self.run.train.seed, "train/order", epoch as u64));
        order
            .chunks(self.run.train.batch_size)
            .filter(|b| b.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn batch(&self, epoch: usize, step: usize, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let chunk = self.run.train.chunk_frames;
        let seed = self.run.train.seed;
        let name = format!("train/chunk/{epoch}/{step}");
        let chunks: Vec<MelSpectrogram> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| sample_chunk(&self.train.utterances[i].mel, chunk, &mut rng::indexed_stream(seed, &name, k as u64)))
            .collect();
        let refs: Vec<&MelSpectrogram> = chunks.iter().collect();
        let labels = idx.iter().map(|&i| self.train.utterances[i].label).collect();
        Ok((stack_mels(&refs)?, labels))
    }

    /// One optimizer step on a labelled batch. Returns the batch loss
    /// before the update.
    pub fn step_on(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g, true);
        let (loss, out) = self.model.loss(&mut g, &p, batch, labels, NormMode::Train)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::invalid(format!("training loss is {value}")));
        }
        let mut grads = g.backward(loss)?;
        let grads = p.gradients(&mut grads);
        let lr = self.state.scheduler.lr;
        adam_step(self.model.params_mut(), &grads, &mut self.state.adam, lr, self.run.train.weight_decay)?;
        update_running_stats(self.model.params_mut(), &out.head.bn_stats)?;
        Ok(value)
    }

    /// Next step of the current epoch. Returns `None` once the epoch's
    /// batches are exhausted (call [`Trainer::end_epoch`] then).
    pub fn step(&mut self) -> Result<Option<f64>> {
        let plan = self.epoch_plan(self.state.epoch);
        let Some(idx) = plan.get(self.state.cursor) else {
            return Ok(None);
        };
        let (batch, labels) = self.batch(self.state.epoch, self.state.cursor, idx)?;
        let loss = self.step_on(&batch, &labels)?;
        self.state.cursor += 1;
        self.state.loss_sum += loss;
        Ok(Some(loss))
    }

    /// Mean eval-mode classification loss on the validation set.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for (x, labels) in &self.val_batches {
            let mut g = Graph::new();
            let p = self.model.params().bind(&mut g, false);
            let (loss, _) = self.model.loss(&mut g, &p, x, labels, NormMode::Eval)?;
            total += g.value(loss).item() * labels.len() as f64;
            count += labels.len();
        }
        Ok(total / count as f64)
    }

    /// Validates, updates the schedule and best parameters, and starts the
    /// next epoch.
    pub fn end_epoch(&mut self) -> Result<EpochLog> {
        let steps = self.state.cursor.max(1);
        let train_loss = self.state.loss_sum / steps as f64;
        let val_loss = self.validation_loss()?;
        let lr = self.state.scheduler.lr;
        if self.state.scheduler.observe(val_loss) {
            self.best = self.model.params().clone();
        }
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.state.loss_sum = 0.0;
        let entry = EpochLog {
            epoch: self.state.epoch,
            train_loss,
            val_loss,
            lr,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        while self.step()?.is_some() {}
        self.end_epoch()
    }

    /// Trains until `max_epochs`, calling `on_epoch` after each.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<()> {
        while !self.done() {
            let e = self.run_epoch()?;
            on_epoch(self, &e)?;
        }
        Ok(())
    }

    /// Model with the best-validation parameters.
    pub fn best_model(&self) -> Result<SpeakerModel> {
        SpeakerModel::from_params(self.run.model.clone(), self.best.clone())
    }

    /// Best-validation model in the deployable checkpoint form.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = model_checkpoint(&self.run, &self.best);
        c.config.push(("state.epoch".into(), self.state.epoch.to_string()));
        c.config.push(("state.best_val".into(), format!("{:?}", self.state.scheduler.best)));
        c
    }

    /// Full resumable state: parameters, optimizer moments, schedule and
    /// best parameters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = model_checkpoint(&self.run, self.model.params());
        let s = &self.state;
        let sch = &s.scheduler;
        for (k, v) in [
            ("state.epoch", s.epoch.to_string()),
            ("state.cursor", s.cursor.to_string()),
            ("state.loss_sum", format!("{:?}", s.loss_sum)),
            ("state.lr", format!("{:?}", sch.lr)),
            ("state.best_val", format!("{:?}", sch.best)),
            ("state.bad_epochs", sch.bad_epochs.to_string()),
            ("state.adam_step", s.adam.step.to_string()),
        ] {
            c.config.push((k.to_string(), v));
        }
        let trainable: Vec<&str> = self
            .model
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        for (name, (m, v)) in trainable.iter().zip(s.adam.m.iter().zip(&s.adam.v)) {
            c.tensors.push((format!("{M_PREFIX}{name}"), m.clone()));
            c.tensors.push((format!("{V_PREFIX}{name}"), v.clone()));
        }
        for p in self.best.iter() {
            c.tensors.push((format!("{BEST_PREFIX}{}", p.name), p.tensor.clone()));
        }
        c
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, train: Dataset, val: Dataset) -> Result<Self> {
        let (run, model) = load_model(ckpt)?;
        let mut t = Trainer::with_model(run, model, train, val)?;
        let get = |k: &str| {
            ckpt.config_value(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}, not a training checkpoint")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        t.state.epoch = int("state.epoch")?;
        t.state.cursor = int("state.cursor")?;
        t.state.loss_sum = num("state.loss_sum")?;
        t.state.scheduler.lr = num("state.lr")?;
        t.state.scheduler.best = num("state.best_val")?;
        t.state.scheduler.bad_epochs = int("state.bad_epochs")?;
        t.state.adam.step = int("state.adam_step")? as u64;
        let names: Vec<String> = t
            .model
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [(M_PREFIX, &mut t.state.adam.m[i]), (V_PREFIX, &mut t.state.adam.v[i])] {
                let src = ckpt
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
                if src.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
                }
                *slot = src.clone();
            }
        }
        for p in t.best.iter_mut() {
            let src = ckpt
                .tensor(&format!("{BEST_PREFIX}{}", p.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing best parameter {}", p.name)))?;
            p.tensor = src.clone();
        }
        Ok(t)
    }
}

fn validation_batches(run: &RunConfig, val: &Dataset) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let chunk = run.train.chunk_frames;
    let chunks: Vec<(MelSpectrogram, usize)> = val
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut r = rng::indexed_stream(run.train.seed, "val/chunk", i as u64);
            (sample_chunk(&u.mel, chunk, &mut r), u.label)
        })
        .collect();
    chunks
        .chunks(run.train.batch_size)
        .map(|b| {
            let refs: Vec<&MelSpectrogram> = b.iter().map(|(m, _)| m).collect();
            Ok((stack_mels(&refs)?, b.iter().map(|(_, l)| *l).collect()))
        })
        .collect()
}

fn is_model_tensor(name: &str) -> bool {
    !(name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) || name.starts_with(BEST_PREFIX))
}

/// Config snapshot plus parameters (buffers included).
pub fn model_checkpoint(run: &RunConfig, params: &ParamStore) -> Checkpoint {
    Checkpoint {
        config: run.to_pairs(),
        tensors: params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
    }
}

/// Rebuilds the run config and model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, SpeakerModel)> {
    let mut run = RunConfig::default();
    run.apply_pairs(
        ckpt.config
            .iter()
            .filter(|(k, _)| !k.starts_with("state."))
            .map(|(k, v)| (k.as_str(), v.as_str())),
    )?;
    let template = SpeakerModel::init(run.model.clone(), 0)?;
    let mut params = ParamStore::new();
    for p in template.params().iter() {
        let t = ckpt
            .tensor(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
        params.insert(p.name.clone(), t.clone(), p.trainable);
    }
    let extra = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| is_model_tensor(n) && template.params().index_of(n).is_none())
        .count();
    if extra > 0 {
        return Err(Error::Checkpoint(format!("{extra} unexpected tensors")));
    }
    let model = SpeakerModel::from_params(run.model.clone(), params)?;
    Ok((run, model))
}

pub fn load_model_file(path: &Path) -> Result<(RunConfig, SpeakerModel)> {
    load_model(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(frames: usize) -> MelSpectrogram {
        MelSpectrogram::new(2, (0..frames * 2).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn chunk_of_equal_length_is_identity() {
        let m = mel(350);
        assert_eq!(sample_chunk(&m, 350, &mut rng::stream(0, "t")), m);
    }

    #[test]
    fn chunk_offset_in_range() {
        let m = mel(700);
        for i in 0..50 {
            let c = sample_chunk(&m, 350, &mut rng::indexed_stream(1, "t", i));
            assert_eq!(c.num_frames(), 350);
            let start = (c.frame(0)[0] / 2.0) as usize;
            assert!(start <= 350);
            assert_eq!(c, m.window(start, 350));
        }
    }

    #[test]
    fn short_utterance_wraps() {
        let m = mel(100);
        let c = sample_chunk(&m, 350, &mut rng::stream(2, "t"));
        assert_eq!(c.num_frames(), 350);
        let start = (c.frame(0)[0] / 2.0) as usize;
        for t in 0..350 {
            assert_eq!(c.frame(t), m.frame((start + t) % 100));
        }
    }

    #[test]
    fn scheduler_anneals_after_patience() {
        let mut s = LrScheduler::new(1.0, 0.5, 15);
        let mut annealed_at = None;
        for epoch in 1..=40 {
            let before = s.lr;
            s.observe(3.0);
            if s.lr < before && annealed_at.is_none() {
                annealed_at = Some(epoch);
            }
        }
        assert_eq!(annealed_at, Some(16));
        assert_eq!(s.lr, 0.25);
    }

    #[test]
    fn config_ranges() {
        TrainConfig::default().validate().unwrap();
        for f in [
            |c: &mut TrainConfig| c.chunk_frames = 15,
            |c: &mut TrainConfig| c.anneal_factor = 1.0,
            |c: &mut TrainConfig| c.anneal_patience = 0,
            |c: &mut TrainConfig| c.batch_size = 1,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn degenerate_datasets_rejected() {
        let one_speaker = Dataset::new(vec![("a".into(), "1".into(), mel(20)), ("a".into(), "2".into(), mel(20))]).unwrap();
        assert!(one_speaker.split(0.5, 0).is_err());
        let one_utt = Dataset::new(vec![
            ("a".into(), "1".into(), mel(20)),
            ("a".into(), "2".into(), mel(20)),
            ("b".into(), "3".into(), mel(20)),
        ])
        .unwrap();
        assert!(one_utt.split(0.5, 0).is_err());
    }

    #[test]
    fn split_keeps_speakers_and_disjoint_utterances() {
        let items = (0..3)
            .flat_map(|s| (0..7).map(move |u| (format!("s{s}"), format!("s{s}u{u}"), mel(20))))
            .collect();
        let d = Dataset::new(items).unwrap();
        let (tr, va) = d.split(0.1, 3).unwrap();
        assert_eq!(va.len(), 3);
        assert_eq!(tr.len(), 18);
        for l in 0..3 {
            assert_eq!(va.utterances.iter().filter(|u| u.label == l).count(), 1);
        }
        assert!(va.utterances.iter().all(|v| tr.utterances.iter().all(|t| t.id != v.id)));
    }
}
