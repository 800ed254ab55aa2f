//! The full embedding extractor: encoder, pooling and classifier head.

use crate::autodiff::{Graph, NormMode, Var};
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, MelSpectrogram};
use crate::head::{Head, HeadConfig, HeadOutput, SpeakerEmbedding};
use crate::params::{Bound, ParamStore};
use crate::pooling::{self, AttentionWeights, PoolOutput, PoolingConfig, PoolingKind, PoolingParams};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub hidden: usize,
    pub num_speakers: usize,
    pub am_scale: f64,
    pub am_margin: f64,
}

impl ModelConfig {
    pub fn hidden_dim(&self) -> Result<usize> {
        encoder::output_dim(&self.encoder)
    }

    pub fn pooled_dim(&self) -> Result<usize> {
        pooling::pooled_dim(
            self.pooling.kind,
            self.hidden_dim()?,
            self.pooling.effective_heads(),
        )
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        Ok(HeadConfig {
            in_dim: self.pooled_dim()?,
            hidden: self.hidden,
            num_speakers: self.num_speakers,
            scale: self.am_scale,
            margin: self.am_margin,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.encoder.validate()?;
        if self.encoder.n_mels != self.features.n_mels {
            return Err(Error::config(format!(
                "encoder expects {} mel bins but features produce {}",
                self.encoder.n_mels, self.features.n_mels
            )));
        }
        self.pooling.validate(self.hidden_dim()?)?;
        self.head_config()?.validate()
    }

    /// Fewest samples that still yield 16 frames.
    pub fn min_samples(&self) -> usize {
        self.features.win_length + (encoder::DOWNSAMPLE - 1) * self.features.hop
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub pool: PoolOutput,
    pub head: HeadOutput,
}

#[derive(Clone, Debug)]
pub struct SpeakerModel {
    cfg: ModelConfig,
    encoder: Encoder,
    head: Head,
    params: ParamStore,
}

impl SpeakerModel {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let head = Head::new(cfg.head_config()?)?;
        let mut params = ParamStore::new();
        encoder.init_params(&mut params, &mut rng::stream(seed, "init/encoder"));
        PoolingParams::init(&cfg.pooling, encoder.output_dim(), &mut rng::stream(seed, "init/pooling"))?
            .store_into(&mut params);
        head.init_params(&mut params, &mut rng::stream(seed, "init/head"));
        Ok(SpeakerModel {
            cfg,
            encoder,
            head,
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking every shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = SpeakerModel::init(cfg, 0)?;
        for p in template.params.iter() {
            let got = params.get(&p.name).map_err(|_| {
                Error::Checkpoint(format!("missing parameter {}", p.name))
            })?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        Ok(SpeakerModel { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn pooling_params(&self) -> Result<PoolingParams> {
        Ok(PoolingParams {
            u: self.params.get(pooling::U_NAME)?.clone(),
            u_prime: match self.cfg.pooling.kind {
                PoolingKind::DoubleMha => Some(self.params.get(pooling::U_PRIME_NAME)?.clone()),
                _ => None,
            },
            heads: self.cfg.pooling.effective_heads(),
        })
    }

    /// `x: [N, 1, frames, n_mels]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: NormMode) -> Result<ModelOutput> {
        let h = self.encoder.forward(g, p, x)?;
        let pool = pooling::pool_bound(g, p, &self.cfg.pooling, h)?;
        let head = self.head.forward(g, p, pool.context, mode)?;
        Ok(ModelOutput { pool, head })
    }

    /// Mean AM-Softmax loss of a labelled batch.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Tensor,
        labels: &[usize],
        mode: NormMode,
    ) -> Result<(Var, ModelOutput)> {
        let x = g.constant(batch.clone());
        let out = self.forward(g, p, x, mode)?;
        let loss = g.am_softmax_loss(out.head.cos_logits, labels, self.cfg.am_scale, self.cfg.am_margin)?;
        Ok((loss, out))
    }

    /// Eval-mode embedding and attention weights of one normalized
    /// spectrogram.
    pub fn embed_with_attention(&self, mel: &MelSpectrogram) -> Result<(Vec<f64>, AttentionWeights)> {
        if mel.num_frames() < encoder::DOWNSAMPLE {
            return Err(Error::TooShort(format!(
                "{} frames; need at least {} frames ({} samples)",
                mel.num_frames(),
                encoder::DOWNSAMPLE,
                self.cfg.min_samples()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(mel.to_tensor());
        let out = self.forward(&mut g, &p, x, NormMode::Eval)?;
        let heads = self.cfg.pooling.effective_heads();
        let t = g.shape(out.pool.weights)[1];
        let weights = AttentionWeights {
            w: g.value(out.pool.weights).reshape(&[t, heads])?,
            w_prime: out
                .pool
                .head_weights
                .map(|v| g.value(v).reshape(&[heads]))
                .transpose()?,
        };
        Ok((g.value(out.head.embedding).data().to_vec(), weights))
    }

    pub fn embed(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        Ok(self.embed_with_attention(mel)?.0)
    }

    /// Audio to embedding: features, encoder, pooling and head (eval mode).
    pub fn extract_embedding(
        &self,
        fx: &FeatureExtractor,
        audio: &[f64],
        sample_rate: u32,
        id: &str,
    ) -> Result<SpeakerEmbedding> {
        if audio.len() < self.cfg.min_samples() {
            return Err(Error::TooShort(format!(
                "{id}: {} samples, need at least {} for {} frames",
                audio.len(),
                self.cfg.min_samples(),
                encoder::DOWNSAMPLE
            )));
        }
        let mel = fx.features(audio, sample_rate)?;
        Ok(SpeakerEmbedding {
            id: id.to_string(),
            vector: self.embed(&mel)?,
        })
    }
}

/// Stacks equal-length spectrograms into `[N, 1, frames, n_mels]`.
pub fn stack_mels(mels: &[&MelSpectrogram]) -> Result<Tensor> {
    let first = mels.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (t, f) = (first.num_frames(), first.n_mels());
    let mut data = Vec::with_capacity(mels.len() * t * f);
    for m in mels {
        if m.num_frames() != t || m.n_mels() != f {
            return Err(Error::shape(
                "stack_mels",
                format!("{}x{} vs {t}x{f}", m.num_frames(), m.n_mels()),
            ));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(&[mels.len(), 1, t, f], data)
}
