//! Classifier head: `FC1 -> BN -> ReLU -> FC2 -> BN -> ReLU -> FC3 -> cosine`.
//!
//! The speaker embedding is tapped after the second block's ReLU. FC3 is
//! linear without normalization; its output and the class weights are both
//! L2-normalized so the logits are cosines, trained with additive-margin
//! softmax.

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, NormMode, Var, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Guard for normalizing zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub num_speakers: usize,
    /// AM-Softmax scale `s`.
    pub scale: f64,
    /// AM-Softmax margin `m`.
    pub margin: f64,
}

impl HeadConfig {
    pub fn new(in_dim: usize, hidden: usize, num_speakers: usize) -> Self {
        HeadConfig {
            in_dim,
            hidden,
            num_speakers,
            scale: 30.0,
            margin: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        if self.num_speakers < 2 {
            return Err(Error::config(format!(
                "need at least 2 speakers, got {}",
                self.num_speakers
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config(format!("AM-Softmax scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config(format!(
                "AM-Softmax margin must be in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// A speaker embedding with the utterance it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Graph handles produced by [`Head::forward`].
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[N, hidden]`, after FC2's batchnorm and ReLU.
    pub embedding: Var,
    /// `[N, hidden]`, FC3 output before normalization.
    pub projection: Var,
    /// `[N, num_speakers]`.
    pub cos_logits: Var,
    /// Batch statistics per batchnorm layer (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

const BN_LAYERS: [&str; 2] = ["head.bn1", "head.bn2"];

#[derive(Clone, Debug)]
pub struct Head {
    cfg: HeadConfig,
}

impl Head {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Head { cfg })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let HeadConfig {
            in_dim,
            hidden,
            num_speakers,
            ..
        } = self.cfg;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        store.insert("head.fc1.weight", Tensor::randn(&[in_dim, hidden], he(in_dim), rng), true);
        store.insert("head.fc1.bias", Tensor::zeros(&[hidden]), true);
        store.insert("head.fc2.weight", Tensor::randn(&[hidden, hidden], he(hidden), rng), true);
        store.insert("head.fc2.bias", Tensor::zeros(&[hidden]), true);
        for bn in BN_LAYERS {
            store.insert(format!("{bn}.gamma"), Tensor::ones(&[hidden]), true);
            store.insert(format!("{bn}.beta"), Tensor::zeros(&[hidden]), true);
            store.insert(format!("{bn}.running_mean"), Tensor::zeros(&[hidden]), false);
            store.insert(format!("{bn}.running_var"), Tensor::ones(&[hidden]), false);
        }
        let lin = (1.0 / hidden as f64).sqrt();
        store.insert("head.fc3.weight", Tensor::randn(&[hidden, hidden], lin, rng), true);
        store.insert("head.fc3.bias", Tensor::zeros(&[hidden]), true);
        store.insert("head.classes", Tensor::randn(&[hidden, num_speakers], 1.0, rng), true);
    }

    fn linear(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, p.var(&format!("{name}.weight")))?;
        g.add_bias(y, p.var(&format!("{name}.bias")))
    }

    fn norm(
        g: &mut Graph,
        p: &Bound,
        x: Var,
        name: &str,
        mode: NormMode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = p.var(&format!("{name}.gamma"));
        let beta = p.var(&format!("{name}.beta"));
        match mode {
            NormMode::Train => {
                let (y, s) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                stats.push((name.to_string(), s));
                Ok(y)
            }
            NormMode::Eval => {
                let rm = g.value(p.var(&format!("{name}.running_mean"))).data().to_vec();
                let rv = g.value(p.var(&format!("{name}.running_var"))).data().to_vec();
                g.batchnorm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }

    /// `c: [N, in_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, c: Var, mode: NormMode) -> Result<HeadOutput> {
        let s = g.shape(c);
        if s.len() != 2 || s[1] != self.cfg.in_dim {
            return Err(Error::shape(
                "head",
                format!("expected [N, {}], got {s:?}", self.cfg.in_dim),
            ));
        }
        let mut bn_stats = Vec::new();
        let x = Self::linear(g, p, c, "head.fc1")?;
        let x = Self::norm(g, p, x, BN_LAYERS[0], mode, &mut bn_stats)?;
        let x = g.relu(x);
        let x = Self::linear(g, p, x, "head.fc2")?;
        let x = Self::norm(g, p, x, BN_LAYERS[1], mode, &mut bn_stats)?;
        let embedding = g.relu(x);
        let projection = Self::linear(g, p, embedding, "head.fc3")?;
        let cos_logits = cosine_logits(g, projection, p.var("head.classes"))?;
        Ok(HeadOutput {
            embedding,
            projection,
            cos_logits,
            bn_stats,
        })
    }
}

/// Cosines between rows of `x: [N, F]` and columns of `w: [F, C]`.
pub fn cosine_logits(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let xn = g.l2_normalize(x, 1, NORM_EPS)?;
    let wn = g.l2_normalize(w, 0, NORM_EPS)?;
    g.matmul(xn, wn)
}

/// Folds training-mode batch statistics into the running buffers.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
    for (name, s) in stats {
        let rm = store.get_mut(&format!("{name}.running_mean"))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.get_mut(&format!("{name}.running_var"))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(())
}

/// Mean AM-Softmax loss of a batch of cosine logits `[N, C]`.
pub fn am_softmax_loss(cos_logits: &Tensor, labels: &[usize], scale: f64, margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(cos_logits.clone());
    let l = g.am_softmax_loss(c, labels, scale, margin)?;
    Ok(g.value(l).item())
}
