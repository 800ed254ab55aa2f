//! Layer-by-layer finite-difference gradient checks on tiny shapes.

use rand::seq::SliceRandom;

use crate::autodiff::{GradCheck, Graph, NormMode, Var, BN_EPS, DEFAULT_STEP};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::features::FeatureConfig;
use crate::head::{Head, HeadConfig};
use crate::model::{ModelConfig, SpeakerModel};
use crate::params::{Bound, ParamStore};
use crate::pooling::{pool, pooled_dim, PoolingConfig, PoolingKind};
use crate::rng;
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Coordinates sampled per tensor for the larger checks.
const SAMPLED: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub layer: &'static str,
    /// Worst relative error over every seed and input.
    pub worst: f64,
    pub seeds: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

/// Every checked layer, in report order.
pub const LAYERS: &[&str] = &[
    "conv2d",
    "maxpool",
    "batchnorm-train",
    "batchnorm-eval",
    "softmax",
    "attention",
    "mha",
    "dmha",
    "am-softmax",
    "encoder",
    "head",
    "model",
];

fn randn(shape: &[usize], seed: u64, name: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed, name))
}

/// Weighted sum with fixed random weights.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(v), seed, "gradsuite/probe"));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn worst(errs: Vec<f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// Binds trainable tensors to checker leaves and the rest as constants.
fn bind_mixed(g: &mut Graph, store: &ParamStore, names: &[String], leaves: &[Var]) -> Bound {
    let mut all = names.to_vec();
    let mut vars = leaves.to_vec();
    for p in store.iter().filter(|p| !p.trainable) {
        all.push(p.name.clone());
        vars.push(g.constant(p.tensor.clone()));
    }
    Bound::from_vars(all, vars)
}

/// Zero biases leave dead feature maps with pre-activations of exactly
/// zero, right on the ReLU kink.
fn jitter_biases(store: &mut ParamStore, seed: u64) -> Result<()> {
    let names: Vec<String> = store.iter().filter(|p| p.name.ends_with(".bias")).map(|p| p.name.clone()).collect();
    for name in names {
        let t = store.get_mut(&name)?;
        *t = Tensor::randn(t.shape(), 0.1, &mut rng::stream(seed, &name));
    }
    Ok(())
}

fn check_pooling(kind: PoolingKind, heads: usize, seed: u64) -> Result<f64> {
    let d = 8;
    let mut inputs = vec![randn(&[2, 5, d], seed, "gradsuite/h"), randn(&[d], seed, "gradsuite/u")];
    let dm = kind == PoolingKind::DoubleMha;
    if dm {
        inputs.push(randn(&[d / heads], seed, "gradsuite/up"));
    }
    let w = randn(&[2, pooled_dim(kind, d, heads)?], seed, "gradsuite/pw");
    let errs = GradCheck::new(DEFAULT_STEP).run(&inputs, |g, v| {
        let out = pool(g, v[0], v[1], dm.then(|| v[2]), heads)?;
        let wv = g.constant(w.clone());
        let p = g.mul(out.context, wv)?;
        Ok(g.sum(p))
    })?;
    Ok(worst(errs))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        features: FeatureConfig {
            n_mels: 16,
            ..FeatureConfig::default()
        },
        encoder: EncoderConfig::doubling(2, 16),
        pooling: PoolingConfig::new(PoolingKind::DoubleMha, 2),
        hidden: 8,
        num_speakers: 3,
        am_scale: 30.0,
        am_margin: 0.4,
    }
}

/// Checks one layer at one seed and returns its worst relative error.
pub fn check_layer(layer: &str, seed: u64) -> Result<f64> {
    check_layer_inputs(layer, seed, step_for(layer)).map(worst)
}

/// Central-difference step used for `layer`. The full model has thousands
/// of ReLU and max-pool kinks, so it gets a finer step.
pub fn step_for(layer: &str) -> f64 {
    if layer == "model" {
        1e-6
    } else {
        DEFAULT_STEP
    }
}

/// Worst relative error per input tensor of one layer check.
pub fn check_layer_inputs(layer: &str, seed: u64, step: f64) -> Result<Vec<f64>> {
    let gc = GradCheck::new(step);
    let errs = match layer {
        "conv2d" => gc.run(
            &[
                randn(&[2, 2, 5, 4], seed, "gradsuite/x"),
                randn(&[3, 2, 3, 3], seed, "gradsuite/w"),
                randn(&[3], seed, "gradsuite/b"),
            ],
            |g, v| {
                let y = g.conv2d_same(v[0], v[1], v[2])?;
                probe(g, y, seed)
            },
        )?,
        "maxpool" => {
            // a shuffled ramp: no ties, gaps far above the step
            let mut vals: Vec<f64> = (0..2 * 6 * 8).map(|i| i as f64 / 64.0).collect();
            vals.shuffle(&mut rng::stream(seed, "gradsuite/ramp"));
            gc.run(&[Tensor::new(&[2, 6, 8], vals)?], |g, v| {
                let y = g.maxpool2x2(v[0])?;
                probe(g, y, seed)
            })?
        }
        "batchnorm-train" | "batchnorm-eval" => {
            let train = layer == "batchnorm-train";
            gc.run(
                &[
                    randn(&[5, 3], seed, "gradsuite/x"),
                    randn(&[3], seed, "gradsuite/gamma"),
                    randn(&[3], seed, "gradsuite/beta"),
                ],
                |g, v| {
                    let y = if train {
                        g.batchnorm_train(v[0], v[1], v[2], BN_EPS)?.0
                    } else {
                        g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], BN_EPS)?
                    };
                    probe(g, y, seed)
                },
            )?
        }
        "softmax" => gc.run(&[randn(&[2, 3, 4], seed, "gradsuite/x")], |g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.softmax(v[0], 2)?;
            let s = g.add(a, b)?;
            probe(g, s, seed)
        })?,
        "attention" => vec![check_pooling(PoolingKind::Attention, 1, seed)?],
        "mha" => vec![check_pooling(PoolingKind::Mha, 4, seed)?],
        "dmha" => vec![
            check_pooling(PoolingKind::DoubleMha, 2, seed)?,
            check_pooling(PoolingKind::DoubleMha, 4, seed)?,
        ],
        "am-softmax" => {
            // moderate cosines keep every probability well above rounding noise
            let cos = Tensor::uniform(&[4, 5], -0.2, 0.2, &mut rng::stream(seed, "gradsuite/cos"));
            gc.run(&[cos], |g, v| g.am_softmax_loss(v[0], &[0, 3, 1, 4], 30.0, 0.4))?
        }
        "encoder" => {
            let enc = Encoder::new(EncoderConfig::doubling(2, 16))?;
            let mut store = ParamStore::new();
            enc.init_params(&mut store, &mut rng::stream(seed, "gradsuite/enc"));
            jitter_biases(&mut store, seed)?;
            let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
            let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
            inputs.push(randn(&[2, 1, 32, 16], seed, "gradsuite/x"));
            gc.sample(SAMPLED, seed).run(&inputs, |g, v| {
                let b = Bound::from_vars(names.clone(), v[..names.len()].to_vec());
                let h = enc.forward(g, &b, v[names.len()])?;
                probe(g, h, seed)
            })?
        }
        "head" => {
            let head = Head::new(HeadConfig::new(8, 4, 3))?;
            let mut store = ParamStore::new();
            head.init_params(&mut store, &mut rng::stream(seed, "gradsuite/head"));
            // zero biases can put a projection at the origin, where normalization is singular
            for name in ["head.fc1.bias", "head.fc2.bias", "head.fc3.bias"] {
                *store.get_mut(name)? = Tensor::randn(&[4], 0.5, &mut rng::stream(seed, name));
            }
            let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
            let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).cloned()).collect::<Result<_>>()?;
            inputs.push(randn(&[4, 8], seed, "gradsuite/x"));
            let errs = gc.run(&inputs, |g, v| {
                let b = bind_mixed(g, &store, &names, &v[..names.len()]);
                let out = head.forward(g, &b, v[names.len()], NormMode::Train)?;
                g.am_softmax_loss(out.cos_logits, &[0, 1, 2, 1], 30.0, 0.4)
            })?;
            // biases in front of training-mode batchnorm have an exactly zero gradient
            names
                .iter()
                .zip(&errs)
                .filter(|(n, _)| *n != "head.fc1.bias" && *n != "head.fc2.bias")
                .map(|(_, e)| *e)
                .chain(errs.last().copied())
                .collect()
        }
        "model" => {
            let mut model = SpeakerModel::init(tiny_model_config(), seed)?;
            jitter_biases(model.params_mut(), seed)?;
            let store = model.params();
            let pre_bn = ["head.fc1.bias", "head.fc2.bias"];
            let names: Vec<String> = store
                .iter()
                .filter(|p| p.trainable && !pre_bn.contains(&p.name.as_str()))
                .map(|p| p.name.clone())
                .collect();
            let fixed: Vec<(String, Tensor)> = store
                .iter()
                .filter(|p| !p.trainable || pre_bn.contains(&p.name.as_str()))
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect();
            let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).cloned()).collect::<Result<_>>()?;
            // with two samples a training-mode batchnorm outputs +-1 whatever its input
            inputs.push(randn(&[4, 1, 32, 16], seed, "gradsuite/x"));
            gc.sample(SAMPLED, seed).run(&inputs, |g, v| {
                let mut all = names.clone();
                let mut vars = v[..names.len()].to_vec();
                for (n, t) in &fixed {
                    all.push(n.clone());
                    vars.push(g.constant(t.clone()));
                }
                let b = Bound::from_vars(all, vars);
                let out = model.forward(g, &b, v[names.len()], NormMode::Train)?;
                g.am_softmax_loss(out.head.cos_logits, &[0, 2, 1, 0], 30.0, 0.4)
            })?
        }
        other => return Err(crate::Error::invalid(format!("unknown layer {other:?}"))),
    };
    Ok(errs)
}

/// Runs every layer in [`LAYERS`] over `seeds`.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    LAYERS
        .iter()
        .map(|&layer| {
            let mut w: f64 = 0.0;
            for &s in seeds {
                w = w.max(check_layer(layer, s)?);
            }
            Ok(SuiteRow {
                layer,
                worst: w,
                seeds: seeds.len(),
            })
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<16} {:>12} {:>6}  result\n", "layer", "max rel err", "seeds");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>12.3e} {:>6}  {}\n",
            r.layer,
            r.worst,
            r.seeds,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
