//! Attention pooling over an encoded sequence.
//!
//! * Self attention: one head over the full hidden vector.
//! * Self multi-head attention (MHA): the hidden vector is split into `K`
//!   contiguous heads of size `d_h = D / K`; head `j` has its own vector
//!   `u_j` and alignment `w_tj = softmax_t(<h_tj, u_j> / sqrt(d_h))`. The
//!   per-head contexts `c_j = sum_t w_tj h_tj` are concatenated.
//! * Double MHA: the `K` head contexts are pooled once more with a shared
//!   vector `u'`, `w'_i = softmax_i(<c_i, u'>)` (no scaling), giving
//!   `c = sum_i w'_i c_i` of size `d_h`.
//!
//! Self attention is exactly MHA with `K = 1`, including the `1/sqrt(D)`
//! logit scale.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingKind {
    Attention,
    Mha,
    DoubleMha,
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Attention => "attention",
            PoolingKind::Mha => "mha",
            PoolingKind::DoubleMha => "dmha",
        })
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(PoolingKind::Attention),
            "mha" => Ok(PoolingKind::Mha),
            "dmha" => Ok(PoolingKind::DoubleMha),
            other => Err(Error::config(format!(
                "unknown pooling {other:?} (expected attention, mha or dmha)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    pub heads: usize,
}

impl PoolingConfig {
    pub fn new(kind: PoolingKind, heads: usize) -> Self {
        PoolingConfig { kind, heads }
    }

    /// Head count actually used: self attention always has one head.
    pub fn effective_heads(&self) -> usize {
        match self.kind {
            PoolingKind::Attention => 1,
            _ => self.heads,
        }
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.kind == PoolingKind::Attention && self.heads != 1 {
            return Err(Error::config(format!(
                "self attention pooling has exactly one head, got heads = {}",
                self.heads
            )));
        }
        head_dim(hidden, self.effective_heads()).map(|_| ())
    }
}

fn head_dim(hidden: usize, heads: usize) -> Result<usize> {
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide hidden dimension {hidden}"
        )));
    }
    Ok(hidden / heads)
}

/// Size of the pooled utterance vector.
pub fn pooled_dim(kind: PoolingKind, hidden: usize, heads: usize) -> Result<usize> {
    let d_h = head_dim(hidden, heads)?;
    Ok(match kind {
        PoolingKind::Attention | PoolingKind::Mha => hidden,
        PoolingKind::DoubleMha => d_h,
    })
}

/// Views `h: [T, D]` as `[T, K, D/K]`; head `j` of step `t` is the slice
/// `j * D/K .. (j + 1) * D/K` of `h_t`.
pub fn head_split(h: &EncodedSequence, heads: usize) -> Result<Tensor> {
    let d_h = head_dim(h.dim(), heads)?;
    h.tensor().reshape(&[h.len(), heads, d_h])
}

/// Attention vectors: `u = [u_1 .. u_K]` and, for double MHA, `u'`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingParams {
    pub u: Tensor,
    pub u_prime: Option<Tensor>,
    pub heads: usize,
}

impl PoolingParams {
    pub fn head_dim(&self) -> usize {
        self.u.len() / self.heads
    }

    /// Zero-mean normal with `std = 1/sqrt(d_h)`.
    pub fn init<R: Rng + ?Sized>(cfg: &PoolingConfig, hidden: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(hidden)?;
        let heads = cfg.effective_heads();
        let d_h = hidden / heads;
        let std = 1.0 / (d_h as f64).sqrt();
        let u = Tensor::randn(&[hidden], std, rng);
        let u_prime = (cfg.kind == PoolingKind::DoubleMha).then(|| Tensor::randn(&[d_h], std, rng));
        Ok(PoolingParams { u, u_prime, heads })
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        store.insert(U_NAME, self.u.clone(), true);
        if let Some(up) = &self.u_prime {
            store.insert(U_PRIME_NAME, up.clone(), true);
        }
    }
}

pub const U_NAME: &str = "pooling.u";
pub const U_PRIME_NAME: &str = "pooling.u_prime";

/// Alignments `w: [T, K]` and, for double MHA, head weights `w': [K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w: Tensor,
    pub w_prime: Option<Tensor>,
}

impl AttentionWeights {
    /// Text dump: one line per time step with `K` columns, then one line of
    /// `K` head weights when present.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (t, k) = (self.w.shape()[0], self.w.shape()[1]);
        for step in 0..t {
            let row: Vec<String> = self.w.data()[step * k..(step + 1) * k]
                .iter()
                .map(|v| format!("{v:.9}"))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        if let Some(wp) = &self.w_prime {
            let row: Vec<String> = wp.data().iter().map(|v| format!("{v:.9}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Per-head contexts `[K, D/K]` and the pooled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector {
    pub heads: Tensor,
    pub pooled: Tensor,
}

/// Graph handles produced by [`pool`].
#[derive(Clone, Copy, Debug)]
pub struct PoolOutput {
    /// `[N, pooled_dim]`.
    pub context: Var,
    /// Concatenated per-head contexts, `[N, D]`.
    pub head_contexts: Var,
    /// `[N, T, K]`.
    pub weights: Var,
    /// `[N, K, 1]` for double MHA.
    pub head_weights: Option<Var>,
}

/// Pools `h: [N, T, D]` on the graph. `u` is `[D]`; `u_prime` is `[D/K]`
/// and switches on the second (head-level) attention stage.
pub fn pool(g: &mut Graph, h: Var, u: Var, u_prime: Option<Var>, heads: usize) -> Result<PoolOutput> {
    let s = g.shape(h).to_vec();
    let [n, t, dim] = s[..] else {
        return Err(Error::shape("pool", format!("expected [N, T, D], got {s:?}")));
    };
    if t == 0 {
        return Err(Error::shape("pool", "empty sequence"));
    }
    let d_h = head_dim(dim, heads).map_err(|e| Error::shape("pool", e.to_string()))?;
    let logits = g.head_scores(h, u, heads, 1.0 / (d_h as f64).sqrt())?;
    let weights = g.softmax(logits, 1)?;
    let head_contexts = g.head_weighted_sum(weights, h, heads)?;
    let Some(up) = u_prime else {
        return Ok(PoolOutput {
            context: head_contexts,
            head_contexts,
            weights,
            head_weights: None,
        });
    };
    // second stage: the K head contexts form a length-K sequence with one head
    let seq = g.reshape(head_contexts, &[n, heads, d_h])?;
    let head_logits = g.head_scores(seq, up, 1, 1.0)?;
    let head_weights = g.softmax(head_logits, 1)?;
    let context = g.head_weighted_sum(head_weights, seq, 1)?;
    Ok(PoolOutput {
        context,
        head_contexts,
        weights,
        head_weights: Some(head_weights),
    })
}

/// Binds the pooling vectors from a parameter store and pools.
pub fn pool_bound(g: &mut Graph, p: &Bound, cfg: &PoolingConfig, h: Var) -> Result<PoolOutput> {
    let u = p.var(U_NAME);
    let up = (cfg.kind == PoolingKind::DoubleMha).then(|| p.var(U_PRIME_NAME));
    pool(g, h, u, up, cfg.effective_heads())
}

fn run(h: &EncodedSequence, u: &Tensor, u_prime: Option<&Tensor>, heads: usize) -> Result<(ContextVector, AttentionWeights)> {
    if u.shape() != [h.dim()] {
        return Err(Error::shape(
            "pool",
            format!("attention vector {:?} for hidden size {}", u.shape(), h.dim()),
        ));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.to_batch());
    let uv = g.constant(u.clone());
    let upv = u_prime.map(|t| g.constant(t.clone()));
    let out = pool(&mut g, hv, uv, upv, heads)?;
    let d_h = h.dim() / heads;
    let context = ContextVector {
        heads: g.value(out.head_contexts).reshape(&[heads, d_h])?,
        pooled: {
            let c = g.value(out.context);
            c.reshape(&[c.len()])?
        },
    };
    let weights = AttentionWeights {
        w: g.value(out.weights).reshape(&[h.len(), heads])?,
        w_prime: out.head_weights.map(|v| g.value(v).reshape(&[heads])).transpose()?,
    };
    Ok((context, weights))
}

/// Self multi-head attention: concatenated head contexts (dim `D`).
pub fn mha_pool(h: &EncodedSequence, params: &PoolingParams) -> Result<(ContextVector, AttentionWeights)> {
    run(h, &params.u, None, params.heads)
}

/// Vanilla self attention, the one-head case of [`mha_pool`].
pub fn self_attention_pool(h: &EncodedSequence, params: &PoolingParams) -> Result<(ContextVector, AttentionWeights)> {
    if params.heads != 1 {
        return Err(Error::invalid(format!(
            "self attention uses one head, got {}",
            params.heads
        )));
    }
    run(h, &params.u, None, 1)
}

/// Double MHA: head contexts re-weighted by a second attention (dim `D/K`).
pub fn double_mha_pool(h: &EncodedSequence, params: &PoolingParams) -> Result<(ContextVector, AttentionWeights)> {
    let up = params
        .u_prime
        .as_ref()
        .ok_or_else(|| Error::invalid("double MHA needs the head-level vector u'"))?;
    if up.shape() != [params.head_dim()] {
        return Err(Error::shape(
            "double_mha_pool",
            format!("u' has shape {:?}, expected [{}]", up.shape(), params.head_dim()),
        ));
    }
    run(h, &params.u, Some(up), params.heads)
}

/// Dispatches on the pooling kind.
pub fn pool_sequence(
    kind: PoolingKind,
    h: &EncodedSequence,
    params: &PoolingParams,
) -> Result<(ContextVector, AttentionWeights)> {
    match kind {
        PoolingKind::Attention => self_attention_pool(h, params),
        PoolingKind::Mha => mha_pool(h, params),
        PoolingKind::DoubleMha => double_mha_pool(h, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_dims_follow_head_count() {
        assert_eq!(pooled_dim(PoolingKind::Mha, 5120, 8).unwrap(), 5120);
        assert_eq!(pooled_dim(PoolingKind::DoubleMha, 5120, 16).unwrap(), 320);
        assert_eq!(pooled_dim(PoolingKind::DoubleMha, 5120, 32).unwrap(), 160);
        assert!(pooled_dim(PoolingKind::Mha, 10, 3).is_err());
    }

    #[test]
    fn kind_round_trips_through_text() {
        for k in [PoolingKind::Attention, PoolingKind::Mha, PoolingKind::DoubleMha] {
            assert_eq!(k.to_string().parse::<PoolingKind>().unwrap(), k);
        }
        assert!("max".parse::<PoolingKind>().is_err());
    }

    #[test]
    fn head_split_examples() {
        let h = EncodedSequence::new(Tensor::new(&[1, 4], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let s = head_split(&h, 2).unwrap();
        assert_eq!(s.shape(), &[1, 2, 2]);
        assert_eq!(s.data(), &[1., 2., 3., 4.]);
        assert_eq!(head_split(&h, 1).unwrap().data(), h.tensor().data());
        assert!(head_split(&h, 3).is_err());
    }

    #[test]
    fn attention_requires_one_head() {
        assert!(PoolingConfig::new(PoolingKind::Attention, 4).validate(8).is_err());
        assert!(PoolingConfig::new(PoolingKind::Attention, 1).validate(8).is_ok());
        assert!(PoolingConfig::new(PoolingKind::DoubleMha, 3).validate(8).is_err());
    }
}
